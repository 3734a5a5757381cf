"""Tabular latent MDPs, embeddings and frequency estimation of latent dynamics.

A latent state is the unsigned integer of its bit pattern; bit ``k`` for
``k < n_ap`` is label bit ``k``.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import PolicyHandle, rollout

SCHEMA_VERSION = 1


class UnsupportedPairError(LookupError):
    """A latent state-action pair with no observed transitions was queried."""

    def __init__(self, s, a):
        super().__init__(f"unsupported latent pair (state={s}, action={a})")
        self.pair = (s, a)


class LabelMismatchError(ValueError):
    """An embedding assigned a latent state whose label bits disagree with the ground label."""


def bits_to_int(bits):
    bits = np.asarray(bits, dtype=np.int64)
    return (bits << np.arange(bits.shape[-1], dtype=np.int64)).sum(axis=-1)


def int_to_bits(z, n_bits):
    z = np.asarray(z, dtype=np.int64)
    return ((z[..., None] >> np.arange(n_bits, dtype=np.int64)) & 1).astype(np.uint8)


def label_of(z, n_ap):
    return int_to_bits(z, n_ap)


@dataclass
class LatentMdp:
    """Immutable-by-convention tabular latent MDP.

    ``rows[(s, a)]`` is ``(successors, probs)`` with sorted successor ids.
    """

    n_bits: int
    n_ap: int
    n_actions: int
    rows: dict
    rewards: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_bits < self.n_ap:
            raise ValueError("n_bits must be at least n_ap")
        for key, (succ, prob) in self.rows.items():
            if np.any(prob < 0) or abs(prob.sum() - 1.0) > 1e-9:
                raise ValueError(f"row {key} is not a distribution")
            if key not in self.rewards:
                raise ValueError(f"row {key} has no reward")

    def supported(self, s, a):
        return (s, a) in self.rows

    def row(self, s, a):
        try:
            return self.rows[(s, a)]
        except KeyError:
            raise UnsupportedPairError(s, a) from None

    def prob(self, s, a, s_next):
        succ, prob = self.row(s, a)
        k = np.searchsorted(succ, s_next)
        if k < len(succ) and succ[k] == s_next:
            return float(prob[k])
        return 0.0

    def reward(self, s, a):
        if (s, a) not in self.rewards:
            raise UnsupportedPairError(s, a)
        return self.rewards[(s, a)]

    def label(self, s):
        return label_of(s, self.n_ap)

    def states(self):
        """Every instantiated latent state, sorted (sources and successors)."""
        out = {s for s, _ in self.rows}
        for succ, _ in self.rows.values():
            out.update(int(x) for x in succ)
        return np.array(sorted(out), dtype=np.int64)

    def actions_of(self, s):
        return sorted(a for (x, a) in self.rows if x == s)

    # -- serialization -----------------------------------------------------

    def to_json(self):
        trans, rews = [], []
        for (s, a) in sorted(self.rows):
            succ, prob = self.rows[(s, a)]
            for x, p in zip(succ, prob):
                trans.append([int(s), int(a), int(x), float(p)])
            rews.append([int(s), int(a), float(self.rewards[(s, a)])])
        return {
            "version": SCHEMA_VERSION,
            "n_bits": self.n_bits,
            "n_ap": self.n_ap,
            "n_actions": self.n_actions,
            "transitions": trans,
            "rewards": rews,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, obj):
        groups = defaultdict(list)
        for s, a, x, p in obj["transitions"]:
            groups[(int(s), int(a))].append((int(x), float(p)))
        rows = {}
        for key, items in groups.items():
            items.sort()
            rows[key] = (
                np.array([x for x, _ in items], dtype=np.int64),
                np.array([p for _, p in items], dtype=np.float64),
            )
        rewards = {(int(s), int(a)): float(r) for s, a, r in obj["rewards"]}
        return cls(obj["n_bits"], obj["n_ap"], obj["n_actions"], rows, rewards, dict(obj.get("metadata", {})))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class EmbeddingPair:
    """``phi`` maps a ground state to a latent id; ``psi`` maps (state, latent action)
    to a ground action. ``psi=None`` means latent and ground actions coincide."""

    phi: Callable
    n_bits: int
    n_ap: int
    psi: Callable | None = None
    phi_batch: Callable | None = None

    def embed_states(self, states):
        if self.phi_batch is not None:
            return np.asarray(self.phi_batch(states), dtype=np.int64)
        return np.array([self.phi(s) for s in states], dtype=np.int64)

    def to_ground(self, s, a_bar):
        return a_bar if self.psi is None else self.psi(s, a_bar)


def chain_embedding(env):
    """Analytic embedding of the lifted chain: node index above the label bits."""
    spec = env.spec
    n_ap = spec.node_labels.shape[1]
    node_bits = max(1, math.ceil(math.log2(spec.n_nodes)))
    codes = bits_to_int(spec.node_labels) + (np.arange(spec.n_nodes) << n_ap)

    def phi(s):
        return int(codes[env.node_of(s)])

    def phi_batch(states):
        ang = np.arctan2(states[:, 1], states[:, 0])
        nodes = np.rint(ang * spec.n_nodes / (2 * np.pi)).astype(np.int64) % spec.n_nodes
        return codes[nodes]

    return EmbeddingPair(phi, n_ap + node_bits, n_ap, phi_batch=phi_batch)


@dataclass
class LatentTrace:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    resets: np.ndarray

    def __len__(self):
        return len(self.r)

    def slice(self, idx):
        return LatentTrace(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.resets[idx])

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("s", "a", "r", "s_next", "resets")))


def embed_trace(trace, emb, action_encoder=None):
    """Map a ground trace to latent transitions, checking label preservation."""
    T = len(trace)
    if T == 0:
        e = np.zeros(0, dtype=np.int64)
        return LatentTrace(e, e.copy(), np.zeros(0), e.copy(), np.zeros(0, dtype=bool))
    z = emb.embed_states(trace.states)
    got = int_to_bits(z, emb.n_ap)
    bad = np.nonzero(np.any(got != trace.labels, axis=1))[0]
    if bad.size:
        raise LabelMismatchError(
            f"embedding breaks label preservation at step {int(bad[0])}: "
            f"latent label {got[bad[0]].tolist()} vs ground {trace.labels[bad[0]].tolist()}"
        )
    if action_encoder is not None:
        a = np.array([action_encoder(trace.states[t], trace.actions[t]) for t in range(T)], dtype=np.int64)
    else:
        if trace.actions.ndim != 1:
            raise ValueError("continuous actions need an action_encoder")
        a = trace.actions.astype(np.int64)
    return LatentTrace(z[:-1], a, trace.rewards.copy(), z[1:], trace.resets.copy())


@dataclass
class CountTable:
    """Transition counts plus per-pair reward samples.

    Rewards are kept as samples so the mean is an exactly rounded sum
    (``math.fsum``), which makes estimation independent of input order.
    """

    counts: dict = field(default_factory=dict)  # (s, a, s') -> int
    reward_samples: dict = field(default_factory=dict)  # (s, a) -> 1-d array

    @property
    def totals(self):
        out = defaultdict(int)
        for (s, a, _), c in self.counts.items():
            out[(s, a)] += c
        return dict(out)

    @classmethod
    def from_latent(cls, lt):
        table = cls()
        if len(lt) == 0:
            return table
        keys = np.stack([lt.s, lt.a, lt.s_next], axis=1)
        uniq, cnt = np.unique(keys, axis=0, return_counts=True)
        table.counts = {(int(s), int(a), int(x)): int(c) for (s, a, x), c in zip(uniq, cnt)}
        pairs = np.stack([lt.s, lt.a], axis=1)
        order = np.lexsort((lt.a, lt.s))
        sorted_pairs = pairs[order]
        cuts = np.nonzero(np.any(np.diff(sorted_pairs, axis=0) != 0, axis=1))[0] + 1
        for chunk in np.split(order, cuts):
            s, a = pairs[chunk[0]]
            table.reward_samples[(int(s), int(a))] = lt.r[chunk]
        return table

    def merge(self, other):
        counts = dict(self.counts)
        for k, c in other.counts.items():
            counts[k] = counts.get(k, 0) + c
        rs = dict(self.reward_samples)
        for k, v in other.reward_samples.items():
            rs[k] = np.concatenate([rs[k], v]) if k in rs else v
        return CountTable(counts, rs)


def frequency_estimate(counts, n_bits, n_ap, n_actions, smoothing=None):
    """P(s'|s,a) = counts / totals and R(s,a) = mean observed reward.

    ``smoothing="add-one"`` fills every pair over the instantiated states
    (export only; flagged in metadata).
    """
    groups = defaultdict(list)
    for (s, a, x), c in counts.counts.items():
        if c > 0:
            groups[(s, a)].append((x, c))
    rows, rewards = {}, {}
    for key, items in groups.items():
        items.sort()
        succ = np.array([x for x, _ in items], dtype=np.int64)
        c = np.array([n for _, n in items], dtype=np.float64)
        rows[key] = (succ, c / c.sum())
        samples = counts.reward_samples[key]
        rewards[key] = math.fsum(samples) / len(samples)
    meta = {"smoothing": smoothing or "none", "n_pairs": len(rows)}
    if smoothing == "add-one":
        states = sorted({s for s, _ in rows} | {int(x) for succ, _ in rows.values() for x in succ})
        idx = {s: k for k, s in enumerate(states)}
        filled, n_filled = {}, 0
        for s in states:
            for a in range(n_actions):
                c = np.ones(len(states))
                if (s, a) in rows:
                    succ, p = rows[(s, a)]
                    tot = sum(counts.counts[(s, a, int(x))] for x in succ)
                    for x, pk in zip(succ, p):
                        c[idx[int(x)]] += pk * tot
                else:
                    rewards[(s, a)] = 0.0
                    n_filled += 1
                filled[(s, a)] = (np.array(states, dtype=np.int64), c / c.sum())
        rows = filled
        meta["smoothed_pairs"] = n_filled
    elif smoothing is not None:
        raise ValueError(f"unknown smoothing {smoothing!r}")
    return LatentMdp(n_bits, n_ap, n_actions, rows, rewards, meta)


def estimate_latent_mdp(latent_trace, n_bits, n_ap, n_actions, smoothing=None):
    return frequency_estimate(CountTable.from_latent(latent_trace), n_bits, n_ap, n_actions, smoothing)


# ---------------------------------------------------------------------------
# latent policies
# ---------------------------------------------------------------------------


@dataclass
class LatentPolicyTable:
    """Tabular latent policy recorded on visited latent states only."""

    probs: dict  # latent state -> action distribution
    n_actions: int

    def distribution(self, z):
        try:
            return self.probs[int(z)]
        except KeyError:
            raise UnsupportedPairError(int(z), None) from None

    def __call__(self, z, rng):
        p = self.distribution(z)
        return min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), len(p) - 1)

    def to_json(self):
        return {"n_actions": self.n_actions, "probs": {str(k): [float(x) for x in v] for k, v in sorted(self.probs.items())}}

    @classmethod
    def from_json(cls, obj):
        return cls({int(k): np.asarray(v, dtype=np.float64) for k, v in obj["probs"].items()}, obj["n_actions"])

    @classmethod
    def from_latent_trace(cls, lt, n_actions):
        """Empirical action frequencies per latent state."""
        probs = {}
        for z in np.unique(lt.s):
            c = np.bincount(lt.a[lt.s == z], minlength=n_actions).astype(np.float64)
            probs[int(z)] = c / c.sum()
        return cls(probs, n_actions)


def mimic_policy(emb, latent_policy, epsilon, base_policy=None):
    """Mixture: latent policy with probability ``epsilon``, else ``base_policy``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon_mimic must lie in [0, 1]")
    if epsilon < 1.0 and base_policy is None:
        raise ValueError("base_policy is required when epsilon_mimic < 1")

    def latent_act(s, rng):
        return emb.to_ground(s, latent_policy(emb.phi(s), rng))

    if epsilon == 1.0:
        return PolicyHandle("latent", latent_act, {"epsilon": 1.0})
    if epsilon == 0.0:
        return PolicyHandle("mixture", base_policy.act, {"epsilon": 0.0})

    def act(s, rng):
        if rng.random() < epsilon:
            return latent_act(s, rng)
        return base_policy.act(s, rng)

    return PolicyHandle("mixture", act, {"epsilon": epsilon})


def run_latent_policy(env, latent_mdp, emb, latent_policy, steps, seed, epsilon_mimic=1.0, base_policy=None):
    """Execute the latent policy (through phi and psi) mixed with ``base_policy``.

    If ``latent_mdp`` is given, every latent state reached must be one of its states.
    """
    policy = mimic_policy(emb, latent_policy, epsilon_mimic, base_policy)
    if latent_mdp is not None and epsilon_mimic > 0:
        known = set(int(x) for x in latent_mdp.states())
        inner = policy.act

        def checked(s, rng):
            z = emb.phi(s)
            if z not in known:
                raise UnsupportedPairError(z, None)
            return inner(s, rng)

        policy = PolicyHandle(policy.kind, checked, policy.params)
    return rollout(env, policy, steps, seed)


def chain_latent_mdp(env):
    """Exact latent MDP of the lifted chain under :func:`chain_embedding`."""
    spec = env.spec
    emb = chain_embedding(env)
    codes = emb.phi_batch(spec.centers)
    rows, rewards = {}, {}
    for a in range(spec.n_actions):
        for i in range(spec.n_nodes):
            p = spec.transition_matrix[a, i]
            nz = np.nonzero(p)[0]
            order = np.argsort(codes[nz])
            key = (int(codes[i]), a)
            rows[key] = (codes[nz][order], p[nz][order])
            rewards[key] = float(spec.node_rewards[i])
    m = LatentMdp(emb.n_bits, emb.n_ap, spec.n_actions, rows, rewards, {"source": "lifted_chain"})
    policy = LatentPolicyTable({int(codes[i]): np.asarray(spec.policy_table[i], dtype=np.float64) for i in range(spec.n_nodes)}, spec.n_actions)
    return m, policy, emb


def fill_missing_pairs(m):
    """Add-one fill for pairs without counts: a uniform row over the
    instantiated states and reward 0. Observed rows are kept as estimated
    (their counts are not stored with the model). Export only."""
    states = m.states()
    rows, rewards = dict(m.rows), dict(m.rewards)
    filled = 0
    for z in states:
        for a in range(m.n_actions):
            if (int(z), a) not in rows:
                rows[(int(z), a)] = (states.copy(), np.full(len(states), 1.0 / len(states)))
                rewards[(int(z), a)] = 0.0
                filled += 1
    return LatentMdp(m.n_bits, m.n_ap, m.n_actions, rows, rewards, dict(m.metadata, smoothing="add-one", smoothed_pairs=filled))
