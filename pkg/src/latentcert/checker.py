"""Exact analysis of small latent models: policy evaluation, stationary
distributions, Lipschitz constants, transport distances, the bisimulation
pseudometric and PRISM explicit-format export."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import kernels
from .latent import LatentMdp, LatentPolicyTable, UnsupportedPairError, label_of

OBJECTIVE_KINDS = ("discounted_return", "reach", "constrained_reach")


class ReducibleChainError(ValueError):
    """The chain has several bottom strongly connected components (not ergodic)."""


@dataclass(frozen=True)
class Objective:
    kind: str
    gamma: float
    T: tuple = ()
    C: tuple = ()

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.kind != "discounted_return" and not self.T:
            raise ValueError("reachability objectives need a nonempty target set T")


def has_any(z, props, n_ap):
    """Membership in the states whose label intersects ``props``."""
    if not props:
        return False
    bits = label_of(z, n_ap)
    return bool(any(bits[p] for p in props))


def transform_for_objective(m, obj):
    """Make target (and, for constrained reach, non-C) states absorbing and
    replace rewards by (1 - gamma) on target states."""
    if obj.kind == "discounted_return":
        raise ValueError("transform applies to reachability objectives only")
    g = obj.gamma
    rows, rewards = {}, {}
    targets = set()
    for z in m.states():
        z = int(z)
        in_t = has_any(z, obj.T, m.n_ap)
        absorb = in_t or (obj.kind == "constrained_reach" and not has_any(z, obj.C, m.n_ap))
        if in_t:
            targets.add(z)
        if absorb:
            for a in range(m.n_actions):
                rows[(z, a)] = (np.array([z], dtype=np.int64), np.ones(1))
                rewards[(z, a)] = (1.0 - g) if in_t else 0.0
        else:
            for a in m.actions_of(z):
                rows[(z, a)] = m.rows[(z, a)]
                rewards[(z, a)] = 0.0
    meta = dict(m.metadata, objective=obj.kind, targets=sorted(targets))
    return LatentMdp(m.n_bits, m.n_ap, m.n_actions, rows, rewards, meta)


@dataclass
class InducedChain:
    """Markov chain ``M_pi`` over ``states``; ``P`` may leave rows empty for
    states seen only as successors (flagged in ``has_row``)."""

    states: np.ndarray
    P: sp.csr_matrix
    R: np.ndarray
    labels: np.ndarray
    has_row: np.ndarray

    @property
    def n(self):
        return len(self.states)

    def index(self):
        return {int(z): k for k, z in enumerate(self.states)}


def _policy_probs(policy, z, m):
    if policy is None:
        acts = m.actions_of(z)
        if m.n_actions == 1 or len(acts) == 1:
            p = np.zeros(m.n_actions)
            p[acts[0] if acts else 0] = 1.0
            return p
        raise ValueError("a latent policy is needed for models with several actions")
    if isinstance(policy, LatentPolicyTable):
        return policy.distribution(z)
    if isinstance(policy, dict):
        if z not in policy:
            raise UnsupportedPairError(z, None)
        return np.asarray(policy[z], dtype=np.float64)
    return np.asarray(policy(z), dtype=np.float64)


def induce_chain(m, policy=None, strict=True):
    """Combine a latent MDP with a latent policy.

    With ``strict`` every instantiated state must have rows for the actions
    the policy plays; otherwise states without rows are kept as columns only.
    """
    states = m.states()
    idx = {int(z): k for k, z in enumerate(states)}
    n = len(states)
    data, ri, ci = [], [], []
    R = np.zeros(n)
    has_row = np.zeros(n, dtype=bool)
    sources = {s for s, _ in m.rows}
    for k, z in enumerate(states):
        z = int(z)
        if z not in sources:
            if strict:
                raise UnsupportedPairError(z, None)
            continue
        probs = _policy_probs(policy, z, m)
        for a in np.nonzero(probs > 0)[0]:
            succ, p = m.row(z, int(a))
            R[k] += probs[a] * m.rewards[(z, int(a))]
            data.extend(probs[a] * p)
            ri.extend([k] * len(succ))
            ci.extend(idx[int(x)] for x in succ)
        has_row[k] = True
    P = sp.csr_matrix((data, (ri, ci)), shape=(n, n))
    P.sum_duplicates()
    return InducedChain(states, P, R, label_of(states, m.n_ap), has_row)


def chain_from_dense(P, R, labels=None):
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    labels = np.zeros((n, 0), dtype=np.uint8) if labels is None else np.asarray(labels, dtype=np.uint8)
    return InducedChain(np.arange(n), sp.csr_matrix(P), np.asarray(R, dtype=np.float64), labels, np.ones(n, dtype=bool))


@dataclass
class ValueTable:
    values: dict
    qvalues: dict
    residual: float
    iterations: int
    residuals: list = field(default_factory=list)

    def as_array(self, states):
        return np.array([self.values[int(z)] for z in states])


def evaluate_chain(chain, gamma, tol=1e-10, max_iter=1_000_000, monotone_check=False):
    """Iterate V <- R + gamma P V from zero until the gamma-weighted stopping rule."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if not chain.has_row.all():
        z = int(chain.states[np.argmin(chain.has_row)])
        raise UnsupportedPairError(z, None)
    V = np.zeros(chain.n)
    stop = tol * (1.0 - gamma) / gamma if gamma > 0 else np.inf
    residuals = []
    for it in range(1, max_iter + 1):
        V_new = chain.R + gamma * (chain.P @ V)
        res = float(np.max(np.abs(V_new - V))) if chain.n else 0.0
        residuals.append(res)
        V = V_new
        if res <= stop:
            break
    return V, residuals


def value_iteration(m, policy, obj, tol=1e-10, max_iter=1_000_000):
    """Policy evaluation of ``policy`` in ``m`` for ``obj``; value error <= tol."""
    model = m if obj.kind == "discounted_return" else transform_for_objective(m, obj)
    chain = induce_chain(model, policy, strict=True)
    V, residuals = evaluate_chain(chain, obj.gamma, tol, max_iter)
    values = {int(z): float(v) for z, v in zip(chain.states, V)}
    idx = chain.index()
    q = {}
    for (z, a), (succ, p) in model.rows.items():
        q[(z, a)] = model.rewards[(z, a)] + obj.gamma * float(p @ V[[idx[int(x)] for x in succ]])
    return ValueTable(values, q, residuals[-1], len(residuals), residuals)


def stationary_distribution(chain, tol=1e-10):
    """Stationary vector of the unique bottom SCC (zero on transient states)."""
    if not chain.has_row.all():
        raise UnsupportedPairError(int(chain.states[np.argmin(chain.has_row)]), None)
    n = chain.n
    P = chain.P
    ncomp, comp = connected_components(P, directed=True, connection="strong")
    # a component is bottom if no edge leaves it
    coo = P.tocoo()
    leaving = np.zeros(ncomp, dtype=bool)
    mask = (comp[coo.row] != comp[coo.col]) & (coo.data > 0)
    leaving[comp[coo.row[mask]]] = True
    bottoms = np.nonzero(~leaving)[0]
    if len(bottoms) != 1:
        raise ReducibleChainError(
            f"chain has {len(bottoms)} bottom SCCs; a unique one is required (ergodicity assumption)"
        )
    members = np.nonzero(comp == bottoms[0])[0]
    Q = P[members][:, members].toarray()
    k = len(members)
    # xi (Q - I) = 0 with the last equation replaced by normalization
    A = (Q - np.eye(k)).T
    A[-1, :] = 1.0
    b = np.zeros(k)
    b[-1] = 1.0
    xi_b = np.linalg.solve(A, b)
    xi_b = np.clip(xi_b, 0.0, None)
    xi_b /= xi_b.sum()
    xi = np.zeros(n)
    xi[members] = xi_b
    res = float(np.max(np.abs(P.T @ xi - xi)))
    if res > tol:
        raise ArithmeticError(f"stationary residual {res:.3e} exceeds tol {tol:.1e}")
    return xi


def total_variation(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support universe")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("inputs must be probability vectors")
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class LipschitzConstants:
    KR: float
    KP: float
    KV: float
    Rmax: float
    gamma: float
    KR_pair: tuple = ()
    KP_pair: tuple = ()
    warnings: list = field(default_factory=list)

    def to_json(self):
        return {"KR": self.KR, "KP": self.KP, "KV": self.KV, "Rmax": self.Rmax}


def value_constant(Rmax, KR, KP, gamma):
    """K_V and a warning string when the second branch of the min is undefined."""
    a = Rmax / (1.0 - gamma)
    if gamma * KP < 1.0:
        return min(a, KR / (1.0 - gamma * KP)), None
    return a, "gamma * KP >= 1: K_V falls back to Rmax / (1 - gamma)"


def _first_pair(mask):
    i, j = np.nonzero(mask)
    k = np.lexsort((j, i))[0]
    return int(i[k]), int(j[k])


def lipschitz_constants(chain, gamma):
    """Smallest constants for the discrete metric over states that carry a row.

    Ties are broken by the lexicographically smallest latent-state pair.
    """
    rows = np.nonzero(chain.has_row)[0]
    states = chain.states[rows]
    R = chain.R[rows]
    P = chain.P[rows].toarray()
    n = len(rows)
    Rmax = float(np.max(np.abs(R))) if n else 0.0
    KR = KP = 0.0
    KR_pair = KP_pair = ()
    if n >= 2:
        dR = np.abs(R[:, None] - R[None, :])
        KR = float(dR.max())
        i, j = _first_pair(np.triu(dR == KR, 1))
        KR_pair = (int(states[i]), int(states[j]))
        tv = np.zeros((n, n))
        for i in range(n - 1):
            tv[i, i + 1 :] = 0.5 * np.abs(P[i] - P[i + 1 :]).sum(axis=1)
        KP = float(min(tv.max(), 1.0))
        i, j = _first_pair(np.triu(tv == tv.max(), 1))
        KP_pair = (int(states[i]), int(states[j]))
    KV, warn = value_constant(Rmax, KR, KP, gamma)
    return LipschitzConstants(KR, KP, KV, Rmax, gamma, KR_pair, KP_pair, [warn] if warn else [])


def wasserstein_exact(p, q, ground_metric, tol=1e-9):
    """Optimal transport cost between two distributions on a finite space."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(ground_metric, dtype=np.float64)
    if abs(p.sum() - q.sum()) > tol:
        raise ValueError(f"infeasible marginals: masses {p.sum()} and {q.sum()} differ")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("negative mass")
    if d.shape != (len(p), len(q)):
        raise ValueError("metric shape does not match the marginals")
    si = np.nonzero(p > 0)[0]
    sj = np.nonzero(q > 0)[0]
    if len(si) == 0 or len(sj) == 0:
        return 0.0
    return kernels.transport_cost(p[si], q[sj], d[np.ix_(si, sj)])


def discrete_metric(n):
    return 1.0 - np.eye(n)


def bisim_pseudometric(chain, variant, gamma, tol=1e-8, max_iter=100_000):
    """Fixed point of the bisimulation operator by iteration from d = 0."""
    if variant not in ("reward", "label"):
        raise ValueError("variant must be 'reward' or 'label'")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    P = chain.P.toarray()
    lab = chain.labels
    differs = np.any(lab[:, None, :] != lab[None, :, :], axis=2)
    d = np.zeros((chain.n, chain.n))
    for it in range(1, max_iter + 1):
        d_new = kernels.pseudometric_sweep(d, P, chain.R, differs, gamma, variant == "reward", variant == "label")
        change = float(np.max(np.abs(d_new - d))) if chain.n else 0.0
        d = d_new
        if change <= tol:
            return d, it
    warnings.warn(f"pseudometric iteration stopped at max_iter={max_iter} (change {change:.2e})")
    return d, max_iter


# ---------------------------------------------------------------------------
# PRISM explicit format
# ---------------------------------------------------------------------------


def _fmt(x):
    # shortest round-trip decimal
    return repr(float(x))


def export_prism(m, path_prefix, policy=None, initial_state=None):
    """Write ``.tra``, ``.sta``, ``.lab``, ``.srew``, ``.trew`` and a JSON sidecar.

    States are renumbered 0..n-1 in increasing latent id; ``.sta`` keeps the
    latent id. With a policy, the induced chain is written as ``<prefix>_mc.*``.
    """
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    states = m.states()
    idx = {int(z): k for k, z in enumerate(states)}
    missing = [int(z) for z in states if not m.actions_of(int(z))]
    if missing:
        raise UnsupportedPairError(missing[0], None)
    choices = []  # (src, local choice, action, successors, probs)
    for z in states:
        z = int(z)
        for c, a in enumerate(m.actions_of(z)):
            succ, p = m.rows[(z, a)]
            choices.append((idx[z], c, a, succ, p))
    n_trans = sum(len(ch[3]) for ch in choices)
    tra = [f"{len(states)} {len(choices)} {n_trans}"]
    trew = [f"{len(states)} {len(choices)} {n_trans}"]
    srew = [f"{len(states)} {len(choices)}"]
    for src, c, a, succ, p in choices:
        order = np.argsort([idx[int(x)] for x in succ], kind="stable")
        r = m.rewards[(int(states[src]), a)]
        srew.append(f"{src} {c} {_fmt(r)}")
        for k in order:
            tra.append(f"{src} {c} {idx[int(succ[k])]} {_fmt(p[k])} a{a}")
            trew.append(f"{src} {c} {idx[int(succ[k])]} {_fmt(r)}")
    sta = ["(z)"] + [f"{k}:({int(z)})" for k, z in enumerate(states)]
    init = idx[int(initial_state)] if initial_state is not None else 0
    names = ['0="init"', '1="deadlock"'] + [f'{k + 2}="p{k}"' for k in range(m.n_ap)]
    lab = [" ".join(names)]
    bits = label_of(states, m.n_ap)
    for k in range(len(states)):
        ids = ([0] if k == init else []) + [p + 2 for p in range(m.n_ap) if bits[k, p]]
        if ids:
            lab.append(f"{k}: " + " ".join(map(str, ids)))
    files = {
        ".tra": tra,
        ".sta": sta,
        ".lab": lab,
        ".srew": srew,
        ".trew": trew,
    }
    written = []
    for ext, lines in files.items():
        path = prefix.with_name(prefix.name + ext)
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    meta = {"n_bits": m.n_bits, "n_ap": m.n_ap, "n_actions": m.n_actions, "initial": init, "metadata": m.metadata}
    side = prefix.with_name(prefix.name + ".meta.json")
    side.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    written.append(side)
    if policy is not None:
        chain = induce_chain(m, policy, strict=True)
        coo = chain.P.tocoo()
        order = np.lexsort((coo.col, coo.row))
        mc = [f"{chain.n} {len(order)}"] + [f"{coo.row[k]} {coo.col[k]} {_fmt(coo.data[k])}" for k in order]
        nz = np.nonzero(chain.R)[0]
        mrew = [f"{chain.n} {len(nz)}"] + [f"{k} {_fmt(chain.R[k])}" for k in nz]
        for ext, lines in ((".tra", mc), (".srew", mrew)):
            path = prefix.with_name(prefix.name + "_mc" + ext)
            path.write_text("\n".join(lines) + "\n")
            written.append(path)
    return written


def import_prism(path_prefix):
    """Rebuild a latent MDP from files written by :func:`export_prism`."""
    prefix = Path(path_prefix)
    read = lambda ext: prefix.with_name(prefix.name + ext).read_text().splitlines()
    meta = json.loads(prefix.with_name(prefix.name + ".meta.json").read_text())
    sta = read(".sta")
    ids = {}
    for line in sta[1:]:
        k, v = line.split(":", 1)
        ids[int(k)] = int(v.strip()[1:-1])
    rows_acc = {}
    choice_action = {}
    for line in read(".tra")[1:]:
        src, c, dst, p, act = line.split()
        a = int(act[1:])
        key = (ids[int(src)], a)
        choice_action[(int(src), int(c))] = a
        rows_acc.setdefault(key, []).append((ids[int(dst)], float(p)))
    rewards = {}
    for line in read(".srew")[1:]:
        src, c, r = line.split()
        rewards[(ids[int(src)], choice_action[(int(src), int(c))])] = float(r)
    rows = {}
    for key, items in rows_acc.items():
        items.sort()
        rows[key] = (np.array([x for x, _ in items], dtype=np.int64), np.array([p for _, p in items]))
    return LatentMdp(meta["n_bits"], meta["n_ap"], meta["n_actions"], rows, rewards, meta.get("metadata", {}))


def close_deadlocks(m):
    """Give successor-only states an absorbing action-0 self-loop with zero
    reward so the model can be exported; the patched states are recorded."""
    sources = {s for s, _ in m.rows}
    dead = [int(z) for z in m.states() if int(z) not in sources]
    if not dead:
        return m
    rows, rewards = dict(m.rows), dict(m.rewards)
    for z in dead:
        rows[(z, 0)] = (np.array([z], dtype=np.int64), np.ones(1))
        rewards[(z, 0)] = 0.0
    return LatentMdp(m.n_bits, m.n_ap, m.n_actions, rows, rewards, dict(m.metadata, closed_deadlocks=dead))
