"""Prioritized experience replay: uniform, latent-bucket and loss-based priorities."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import kernels

MODES = ("uniform", "bucket", "loss")


class SumTree:
    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.tree = np.zeros(2 * capacity - 1)

    @property
    def total(self):
        return float(self.tree[0])

    def set(self, leaves, values):
        kernels.sumtree_set(self.tree, self.capacity, leaves, values)

    def leaf(self, i):
        return self.tree[self.capacity - 1 + np.asarray(i)]

    def find(self, targets):
        return kernels.sumtree_find(self.tree, self.capacity, targets)


def anneal_to_one(value0, tau, t, t0=0):
    if t <= t0:
        return value0
    return value0 + (1.0 - value0) * (1.0 - (1.0 - tau) ** (t - t0))


@dataclass
class BufferConfig:
    capacity: int = 1_000_000
    mode: str = "uniform"
    varsigma: float = 0.0  # priority exponent
    omega: float = 0.4  # importance-sampling exponent at t0
    tau_omega: float = 0.0
    x_star: float = 1.0  # maximum loss-based priority
    t0: int = 10_000

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.varsigma <= 1.0 or not 0.0 <= self.omega <= 1.0:
            raise ValueError("varsigma and omega must lie in [0, 1]")
        if self.x_star <= 0:
            raise ValueError("x_star must be positive")


class PrioritizedReplay:
    """FIFO ring buffer of column arrays with proportional sampling."""

    def __init__(self, config: BufferConfig):
        self.cfg = config
        self.tree = SumTree(config.capacity)
        self.priorities = np.zeros(config.capacity)
        self.insert_index = np.full(config.capacity, -1, dtype=np.int64)
        self.columns = None
        self.size = 0
        self.cursor = 0
        self.n_inserted = 0
        # bucket bookkeeping: lifetime counts, never decremented
        self.bucket_counts = defaultdict(int)
        self.max_priority = config.x_star if config.mode == "loss" else 1.0
        self.loss_max = -math.inf
        self.loss_min = math.inf
        self.step = 0

    def __len__(self):
        return self.size

    @property
    def omega(self):
        return anneal_to_one(self.cfg.omega, self.cfg.tau_omega, self.step, self.cfg.t0)

    def _alloc(self, item):
        cap = self.cfg.capacity
        self.columns = {}
        for k, v in item.items():
            v = np.asarray(v)
            self.columns[k] = np.zeros((cap,) + v.shape, dtype=v.dtype)

    def _write_priority(self, slots, p):
        p = np.asarray(p, dtype=np.float64)
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise ValueError("priorities must be positive and finite")
        self.priorities[slots] = p
        self.tree.set(slots, p ** self.cfg.varsigma)

    def insert(self, item, latent_state_hint=None):
        """Add one transition (a dict of arrays/scalars). Returns its priority."""
        if self.columns is None:
            self._alloc(item)
        slot = self.cursor
        for k, v in item.items():
            self.columns[k][slot] = v
        mode = self.cfg.mode
        if mode == "bucket":
            if latent_state_hint is None:
                raise ValueError("bucket mode needs a latent state hint")
            N = self.n_inserted
            b = self.bucket_counts[latent_state_hint]
            # first visits would divide by zero; clamp both counters at one
            p = max(N, 1) / max(b, 1)
            self.bucket_counts[latent_state_hint] = b + 1
        elif mode == "loss":
            p = self.max_priority
        else:
            p = 1.0
        self._write_priority([slot], [p])
        self.insert_index[slot] = self.n_inserted
        self.n_inserted += 1
        self.cursor = (self.cursor + 1) % self.cfg.capacity
        self.size = min(self.size + 1, self.cfg.capacity)
        return p

    def sample(self, batch_size, rng):
        """i.i.d. proportional draws; weights ``(|D| P)^-omega`` over the batch max."""
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} < batch_size {batch_size} transitions")
        total = self.tree.total
        targets = rng.random(batch_size) * total
        idx = self.tree.find(targets)
        idx = np.minimum(idx, self.size - 1)
        probs = self.tree.leaf(idx) / total
        w = (self.size * probs) ** (-self.omega)
        w = w / w.max()
        batch = {k: v[idx] for k, v in self.columns.items()}
        return idx, batch, w

    def probabilities(self):
        pw = self.priorities[: self.size] ** self.cfg.varsigma
        return pw / pw.sum()

    def loss_priority(self, losses):
        """Logistic map of per-transition losses onto (0, x_star)."""
        x_star = self.cfg.x_star
        span = self.loss_max - self.loss_min
        losses = np.asarray(losses, dtype=np.float64)
        if not span > 0:
            return np.full(losses.shape, x_star / 2.0)
        x0 = span / 2.0
        k = x_star / span
        z = k * (losses - x0)
        return x_star / (1.0 + np.exp(-z))

    def update_priority_loss(self, slots, losses):
        if self.cfg.mode != "loss":
            raise ValueError("loss-based updates need mode='loss'")
        losses = np.asarray(losses, dtype=np.float64)
        self.loss_max = max(self.loss_max, float(losses.max()))
        self.loss_min = min(self.loss_min, float(losses.min()))
        p = self.loss_priority(losses)
        p = np.maximum(p, np.finfo(float).tiny)
        self._write_priority(np.asarray(slots), p)
        self.max_priority = max(self.max_priority, float(p.max()))
        return p
