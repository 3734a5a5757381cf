"""Ground MDP plumbing: transitions, traces, policies and the rollout loop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np


class DynamicsError(RuntimeError):
    """Raised when an environment produces a non-finite state."""


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: Any
    r: float
    s_next: np.ndarray
    l: np.ndarray
    l_next: np.ndarray
    reset: bool = False


@dataclass
class Trace:
    """Columnar record of one interaction stream.

    ``states`` and ``labels`` hold ``T + 1`` rows so that the successor of
    step ``t`` is by construction the source of step ``t + 1``. ``resets[t]``
    marks a step whose successor is a fresh initial state.
    """

    env_id: str
    seed: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    labels: np.ndarray
    resets: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rewards)

    @property
    def n_ap(self):
        return self.labels.shape[1]

    @property
    def dim(self):
        return self.states.shape[1]

    def transition(self, t):
        return Transition(
            s=self.states[t],
            a=self.actions[t] if self.actions.ndim == 1 else self.actions[t].copy(),
            r=float(self.rewards[t]),
            s_next=self.states[t + 1],
            l=self.labels[t],
            l_next=self.labels[t + 1],
            reset=bool(self.resets[t]),
        )

    @property
    def transitions(self):
        return [self.transition(t) for t in range(len(self))]

    def slice(self, start, stop=None):
        stop = len(self) if stop is None else stop
        return Trace(
            env_id=self.env_id,
            seed=self.seed,
            states=self.states[start : stop + 1],
            actions=self.actions[start:stop],
            rewards=self.rewards[start:stop],
            labels=self.labels[start : stop + 1],
            resets=self.resets[start:stop],
            info={k: v[start : stop + 1] for k, v in self.info.items()},
        )


@dataclass
class PolicyHandle:
    """A memoryless policy. ``act(state, rng)`` returns one action."""

    kind: str
    act: Callable[[np.ndarray, np.random.Generator], Any]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("heuristic", "latent", "mixture", "tabular", "random"):
            raise ValueError(f"unknown policy kind {self.kind!r}")


def scale_reward(raw, bounds):
    lo, hi = bounds
    if not lo < hi:
        raise ValueError(f"invalid reward bounds {bounds}")
    if raw < lo or raw > hi:
        raise ValueError(f"reward {raw} outside bounds {bounds}")
    return (raw - lo) / (hi - lo) - 0.5


def make_streams(seed):
    """Disjoint counter-based generators for dynamics and policy sampling."""
    dyn, pol = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(dyn)), np.random.Generator(np.random.Philox(pol))


def rollout(env, policy, steps, seed, *, select=None):
    """Run ``policy`` in ``env`` for exactly ``steps`` transitions.

    Episodes are concatenated into one stream: a terminal or truncated step
    records the freshly reset state as its successor and sets ``reset``.
    ``select(state, action)`` may rewrite the executed action (used by
    mixtures); it defaults to the identity.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dyn_rng, pol_rng = make_streams(seed)
    dim = env.dim
    states = np.empty((steps + 1, dim))
    labels = np.empty((steps + 1, env.n_ap), dtype=np.uint8)
    rewards = np.empty(steps)
    resets = np.zeros(steps, dtype=bool)
    acts = []
    s = env.reset(dyn_rng)
    states[0] = s
    labels[0] = env.label(s)
    episode_t = 0
    for t in range(steps):
        a = policy.act(s, pol_rng)
        if select is not None:
            a = select(s, a)
        s_next, r, terminated = env.step(s, a, dyn_rng)
        if not np.all(np.isfinite(s_next)):
            raise DynamicsError(f"{env.env_id}: non-finite state at step {t}")
        episode_t += 1
        truncated = env.max_episode_steps is not None and episode_t >= env.max_episode_steps
        if terminated or truncated:
            s_next = env.reset(dyn_rng)
            resets[t] = True
            episode_t = 0
        acts.append(a)
        rewards[t] = r
        states[t + 1] = s_next
        labels[t + 1] = env.label(s_next)
        s = s_next
    if env.discrete_actions:
        actions = np.asarray(acts, dtype=np.int64)
    else:
        actions = np.asarray(acts, dtype=np.float64).reshape(steps, -1)
    trace = Trace(env.env_id, seed, states, actions, rewards, labels, resets)
    if hasattr(env, "node_of"):
        trace.info["node"] = np.array([env.node_of(x) for x in states], dtype=np.int64)
    return trace


def episode_returns(trace, raw=False, env=None):
    """Per-episode sums of rewards, split at reset markers (last partial episode dropped).

    With ``raw=True`` the scaled rewards are mapped back through ``env.reward_bounds``.
    """
    r = trace.rewards
    if raw:
        lo, hi = env.reward_bounds
        r = (r + 0.5) * (hi - lo) + lo
    ends = np.nonzero(trace.resets)[0]
    out, start = [], 0
    for e in ends:
        out.append(float(r[start : e + 1].sum()))
        start = e + 1
    return out


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------


def evaluate_episodes(env, policy, episodes=30, seed=0):
    """Mean and per-episode raw returns over full episodes from fresh resets."""
    if env.max_episode_steps is None:
        raise ValueError("episode evaluation needs an episodic environment")
    dyn, pol = make_streams(seed)
    lo, hi = env.reward_bounds
    out = []
    for _ in range(episodes):
        s = env.reset(dyn)
        total = 0.0
        for _ in range(env.max_episode_steps):
            s, r, done = env.step(s, policy.act(s, pol), dyn)
            total += (r + 0.5) * (hi - lo) + lo
            if done:
                break
        out.append(total)
    return float(np.mean(out)), out


def _action_json(a):
    if np.ndim(a) == 0:
        return int(a)
    return [float(x) for x in np.ravel(a)]


def write_trace(path, trace, header_extra=None):
    header = {"env": trace.env_id, "seed": int(trace.seed), "ap": trace.n_ap, "dim": trace.dim}
    header.update(header_extra or {})
    lines = [json.dumps(header)]
    for t in range(len(trace)):
        rec = {
            "t": t,
            "s": [float(x) for x in trace.states[t]],
            "a": _action_json(trace.actions[t]),
            "r": float(trace.rewards[t]),
            "l": [int(x) for x in trace.labels[t]],
            "reset": bool(trace.resets[t]),
        }
        if t == len(trace) - 1:
            # the stream's final successor has no line of its own
            rec["s_next"] = [float(x) for x in trace.states[t + 1]]
            rec["l_next"] = [int(x) for x in trace.labels[t + 1]]
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    if not recs:
        raise ValueError(f"{path}: trace has no transitions")
    states = [r["s"] for r in recs] + [recs[-1]["s_next"]]
    labels = [r["l"] for r in recs] + [recs[-1]["l_next"]]
    if isinstance(recs[0]["a"], list):
        actions = np.asarray([r["a"] for r in recs], dtype=np.float64)
    else:
        actions = np.asarray([r["a"] for r in recs], dtype=np.int64)
    return Trace(
        env_id=header["env"],
        seed=header["seed"],
        states=np.asarray(states, dtype=np.float64).reshape(len(states), header["dim"]),
        actions=actions,
        rewards=np.asarray([r["r"] for r in recs], dtype=np.float64),
        labels=np.asarray(labels, dtype=np.uint8).reshape(len(labels), header["ap"]),
        resets=np.asarray([r["reset"] for r in recs], dtype=bool),
    )
