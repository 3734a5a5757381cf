"""Simulators, labeling functions and scripted input policies."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import constants as C
from .core import PolicyHandle, scale_reward

ENV_IDS = ("cartpole", "mountaincar", "pendulum", "lifted_chain")


@dataclass(frozen=True)
class LabelingSpec:
    """Ordered threshold predicates ``(name, coord, op, threshold)``."""

    predicates: tuple

    def __post_init__(self):
        for name, coord, op, thr in self.predicates:
            if op not in ("<", ">="):
                raise ValueError(f"predicate {name}: unsupported op {op!r}")

    @property
    def n_ap(self):
        return len(self.predicates)

    @property
    def names(self):
        return [p[0] for p in self.predicates]

    def __call__(self, s):
        out = np.empty(len(self.predicates), dtype=np.uint8)
        for k, (_, coord, op, thr) in enumerate(self.predicates):
            v = s[coord]
            out[k] = (v < thr) if op == "<" else (v >= thr)
        return out

    def with_thresholds(self, overrides):
        known = set(self.names)
        bad = set(overrides) - known
        if bad:
            raise ValueError(f"unknown label predicates: {sorted(bad)}")
        preds = tuple(
            (n, c, op, float(overrides.get(n, thr))) for n, c, op, thr in self.predicates
        )
        return LabelingSpec(preds)


@dataclass(frozen=True, eq=False)
class EnvironmentHandle:
    env_id: str
    constants: dict
    label_spec: LabelingSpec
    reward_bounds: tuple
    dim: int
    n_actions: int  # count for discrete actions, dimension otherwise
    discrete_actions: bool
    max_episode_steps: int | None

    @property
    def n_ap(self):
        return self.label_spec.n_ap

    def label(self, s):
        return self.label_spec(s)

    def reset(self, rng):
        raise NotImplementedError

    def raw_step(self, s, a, rng):
        """Returns ``(next_state, raw_reward, terminated)``."""
        raise NotImplementedError

    def step(self, s, a, rng):
        if self.discrete_actions and not 0 <= int(a) < self.n_actions:
            raise ValueError(f"{self.env_id}: action {a} not enabled")
        s_next, raw, done = self.raw_step(s, a, rng)
        if not np.all(np.isfinite(s_next)):
            from .core import DynamicsError

            raise DynamicsError(f"{self.env_id}: non-finite state")
        return s_next, scale_reward(raw, self.reward_bounds), done


class CartPole(EnvironmentHandle):
    def reset(self, rng):
        b = self.constants["reset_bound"]
        return rng.uniform(-b, b, size=4)

    def raw_step(self, s, a, rng):
        c = self.constants
        x, x_dot, th, th_dot = s
        force = c["force_mag"] if int(a) == 1 else -c["force_mag"]
        total_mass = c["masspole"] + c["masscart"]
        pml = c["masspole"] * c["length"]
        cos, sin = math.cos(th), math.sin(th)
        temp = (force + pml * th_dot * th_dot * sin) / total_mass
        th_acc = (c["gravity"] * sin - cos * temp) / (
            c["length"] * (4.0 / 3.0 - c["masspole"] * cos * cos / total_mass)
        )
        x_acc = temp - pml * th_acc * cos / total_mass
        tau = c["tau"]
        x = x + tau * x_dot
        x_dot = x_dot + tau * x_acc
        th = th + tau * th_dot
        th_dot = th_dot + tau * th_acc
        done = x < -c["x_threshold"] or x > c["x_threshold"] or abs(th) > c["theta_threshold"]
        return np.array([x, x_dot, th, th_dot]), 1.0, done


class MountainCar(EnvironmentHandle):
    def reset(self, rng):
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def raw_step(self, s, a, rng):
        c = self.constants
        pos, vel = s
        vel += (int(a) - 1) * c["force"] + math.cos(3 * pos) * (-c["gravity"])
        vel = min(max(vel, -c["max_speed"]), c["max_speed"])
        pos += vel
        pos = min(max(pos, c["min_position"]), c["max_position"])
        if pos == c["min_position"] and vel < 0:
            vel = 0.0
        done = pos >= c["goal_position"] and vel >= c["goal_velocity"]
        return np.array([pos, vel]), -1.0, done


class Pendulum(EnvironmentHandle):
    """State is ``(cos theta, sin theta, omega)`` with theta = 0 upright."""

    def reset(self, rng):
        th = rng.uniform(-math.pi, math.pi)
        om = rng.uniform(-1.0, 1.0)
        return np.array([math.cos(th), math.sin(th), om])

    def raw_step(self, s, a, rng):
        c = self.constants
        th = math.atan2(s[1], s[0])
        om = s[2]
        u = float(np.clip(np.ravel(a)[0], -c["max_torque"], c["max_torque"]))
        cost = th * th + 0.1 * om * om + 0.001 * u * u
        om = om + (3 * c["g"] / (2 * c["l"]) * math.sin(th) + 3.0 / (c["m"] * c["l"] ** 2) * u) * c["dt"]
        om = min(max(om, -c["max_speed"]), c["max_speed"])
        th = th + om * c["dt"]
        return np.array([math.cos(th), math.sin(th), om]), -cost, False


@dataclass
class LiftedChainSpec:
    """Finite MDP whose nodes are observed as noisy points in disjoint discs."""

    n_nodes: int
    transition_matrix: np.ndarray  # (n_actions, n_nodes, n_nodes)
    node_rewards: np.ndarray
    observation_radius: float
    node_labels: np.ndarray  # (n_nodes, n_ap) bits
    reward_noise: float = 0.0  # half-width of uniform reward noise
    policy_table: np.ndarray | None = None  # (n_nodes, n_actions)
    initial_node: int = 0

    def __post_init__(self):
        self.transition_matrix = np.asarray(self.transition_matrix, dtype=np.float64)
        self.node_rewards = np.asarray(self.node_rewards, dtype=np.float64)
        self.node_labels = np.asarray(self.node_labels, dtype=np.uint8)
        P = self.transition_matrix
        n = self.n_nodes
        if P.ndim != 3 or P.shape[1:] != (n, n):
            raise ValueError("transition_matrix must have shape (n_actions, n_nodes, n_nodes)")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition_matrix rows must be stochastic")
        if self.node_rewards.shape != (n,):
            raise ValueError("node_rewards must have one entry per node")
        if np.max(np.abs(self.node_rewards)) + self.reward_noise > 0.5:
            raise ValueError("node rewards plus noise must stay within [-1/2, 1/2]")
        if not 0 < self.observation_radius < self.max_radius:
            raise ValueError(f"observation_radius must lie in (0, {self.max_radius})")
        if self.node_labels.ndim != 2 or self.node_labels.shape[0] != n:
            raise ValueError("node_labels must have shape (n_nodes, n_ap)")
        if self.policy_table is None:
            self.policy_table = np.full((n, self.n_actions), 1.0 / self.n_actions)
        self.policy_table = np.asarray(self.policy_table, dtype=np.float64)
        if self.policy_table.shape != (n, self.n_actions) or np.max(
            np.abs(self.policy_table.sum(axis=1) - 1.0)
        ) > 1e-12:
            raise ValueError("policy_table rows must be distributions over actions")

    @property
    def n_actions(self):
        return self.transition_matrix.shape[0]

    @property
    def max_radius(self):
        # half the chord between neighbouring centres on the unit circle
        return math.sin(math.pi / self.n_nodes) if self.n_nodes > 1 else 1.0

    @property
    def centers(self):
        ang = 2 * np.pi * np.arange(self.n_nodes) / self.n_nodes
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def default_chain_spec(reward_noise=0.0):
    n = 6
    P = np.zeros((2, n, n))
    for i in range(n):
        # action 0 mostly holds, action 1 mostly advances
        P[0, i, i] += 0.5
        P[0, i, (i - 1) % n] += 0.3
        P[0, i, (i + 1) % n] += 0.2
        P[1, i, (i + 1) % n] += 0.6
        P[1, i, (i + 2) % n] += 0.2
        P[1, i, i] += 0.2
    labels = np.array([[i >= 3, i == n - 1] for i in range(n)], dtype=np.uint8)
    return LiftedChainSpec(
        n_nodes=n,
        transition_matrix=P,
        node_rewards=np.array([-0.4, -0.2, 0.0, 0.1, 0.25, 0.4]),
        observation_radius=0.3,
        node_labels=labels,
        reward_noise=reward_noise,
        policy_table=np.tile([0.3, 0.7], (n, 1)),
    )


class LiftedChain(EnvironmentHandle):
    """Ground observations are 2-d points; the hidden node drives the dynamics."""

    @property
    def spec(self) -> LiftedChainSpec:
        return self.constants["spec"]

    def label(self, s):
        return self.spec.node_labels[self.node_of(s)].copy()

    def node_of(self, s):
        # discs are disjoint and centred on the unit circle, so the angle decides
        n = self.spec.n_nodes
        k = int(round(math.atan2(s[1], s[0]) * n / (2 * math.pi)))
        return k % n

    def observe(self, node, rng):
        r = self.spec.observation_radius * math.sqrt(rng.random())
        ang = 2 * math.pi * rng.random()
        cx, cy = self.constants["centers"][node]
        return np.array([cx + r * math.cos(ang), cy + r * math.sin(ang)])

    def reset(self, rng):
        return self.observe(self.spec.initial_node, rng)

    def raw_step(self, s, a, rng):
        spec = self.spec
        i = self.node_of(s)
        row = self.constants["cum"][int(a), i]
        j = min(int(np.searchsorted(row, rng.random(), side="right")), spec.n_nodes - 1)
        r = spec.node_rewards[i]
        if spec.reward_noise > 0:
            r += rng.uniform(-spec.reward_noise, spec.reward_noise)
        return self.observe(j, rng), r, False


def _label_spec(env_id, overrides):
    spec = LabelingSpec(tuple(C.LABELS[env_id]))
    return spec.with_thresholds(overrides) if overrides else spec


def make_env(env_id, config=None):
    """Build an environment handle; ``config`` may carry ``labels`` threshold
    overrides and, for ``lifted_chain``, a ``chain`` block or a ``spec`` object."""
    config = dict(config or {})
    if env_id not in ENV_IDS:
        raise ValueError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")
    overrides = config.pop("labels", None)
    allowed = ("spec", "chain") if env_id == "lifted_chain" else ()
    unknown = sorted(set(config) - set(allowed))
    if unknown:
        raise ValueError(f"unknown {env_id} config keys: {unknown}")
    if env_id == "cartpole":
        k = dict(C.CARTPOLE)
        return CartPole("cartpole", k, _label_spec(env_id, overrides), C.REWARD_BOUNDS[env_id], 4, 2, True, k["max_episode_steps"])
    if env_id == "mountaincar":
        k = dict(C.MOUNTAINCAR)
        return MountainCar("mountaincar", k, _label_spec(env_id, overrides), C.REWARD_BOUNDS[env_id], 2, 3, True, k["max_episode_steps"])
    if env_id == "pendulum":
        k = dict(C.PENDULUM)
        return Pendulum("pendulum", k, _label_spec(env_id, overrides), C.REWARD_BOUNDS[env_id], 3, 1, False, k["max_episode_steps"])
    spec = config.pop("spec", None)
    if spec is None:
        block = config.pop("chain", None)
        spec = LiftedChainSpec(**block) if block else default_chain_spec()
    if overrides:
        raise ValueError("lifted_chain labels are set per node, not by thresholds")
    names = tuple((f"p{k}", -1, ">=", 0.0) for k in range(spec.node_labels.shape[1]))
    return LiftedChain(
        "lifted_chain", {"spec": spec, "cum": np.cumsum(spec.transition_matrix, axis=2), "centers": spec.centers}, LabelingSpec(names), C.REWARD_BOUNDS[env_id], 2, spec.n_actions, True, None
    )


# ---------------------------------------------------------------------------
# scripted input policies
# ---------------------------------------------------------------------------

CARTPOLE_GAINS = (1.0, 0.5, 0.02, 0.05)  # theta, theta_dot, x, x_dot


def _cartpole_pd(s, rng, gains=CARTPOLE_GAINS):
    kth, kom, kx, kv = gains
    return int(kth * s[2] + kom * s[3] + kx * s[0] + kv * s[1] > 0)


def _mountaincar_bang(s, rng):
    return 2 if s[1] >= 0 else 0


def _pendulum_energy(s, rng, c=C.PENDULUM):
    cos, sin, om = s
    th = math.atan2(sin, cos)
    if cos > 0.85:
        u = -(10.0 * th + 2.0 * om)
    else:
        # dE/dt = 3 u omega with E = omega^2 / 2 + (3 g / 2 l) cos(theta)
        e_target = 1.5 * c["g"] / c["l"]
        e = 0.5 * om * om + 1.5 * c["g"] / c["l"] * cos
        u = (e_target - e) * (1.0 if om >= 0 else -1.0)
    return np.array([min(max(u, -c["max_torque"]), c["max_torque"])])


def tabular_policy(table, node_of):
    table = np.asarray(table, dtype=np.float64)
    cum = np.cumsum(table, axis=1)

    def act(s, rng):
        row = cum[node_of(s)]
        return min(int(np.searchsorted(row, rng.random(), side="right")), len(row) - 1)

    return PolicyHandle("tabular", act, {"table": table})


def heuristic_policy(env):
    """Scripted stand-in for a trained input policy."""
    if isinstance(env, str):
        env = make_env(env)
    if env.env_id == "cartpole":
        return PolicyHandle("heuristic", _cartpole_pd, {"gains": CARTPOLE_GAINS})
    if env.env_id == "mountaincar":
        return PolicyHandle("heuristic", _mountaincar_bang)
    if env.env_id == "pendulum":
        return PolicyHandle("heuristic", _pendulum_energy)
    if env.env_id == "lifted_chain":
        return tabular_policy(env.spec.policy_table, env.node_of)
    raise ValueError(f"no heuristic policy for {env.env_id!r}")


def random_policy(env):
    if env.discrete_actions:
        return PolicyHandle("random", lambda s, rng: int(rng.integers(env.n_actions)))
    lim = env.constants.get("max_torque", 1.0)
    return PolicyHandle("random", lambda s, rng: rng.uniform(-lim, lim, size=env.n_actions))
