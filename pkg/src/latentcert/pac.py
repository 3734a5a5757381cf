"""PAC estimation of local losses and assembly of the certificate bounds."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .checker import LipschitzConstants
from .latent import LatentTrace, UnsupportedPairError

REPORT_VERSION = 1
BOUND_NAMES = ("value_diff_return", "value_diff_reach", "bisim_reward", "bisim_label")


class InsufficientSamplesError(ValueError):
    def __init__(self, have, need, what="value-difference"):
        super().__init__(f"{what} certificate needs T >= {need} transitions, got {have}")
        self.have = have
        self.need = need


@dataclass(frozen=True)
class PacParams:
    epsilon: float
    delta: float
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    def to_json(self):
        return {"epsilon": self.epsilon, "delta": self.delta, "gamma": self.gamma}


def required_samples_loss(params):
    """Hoeffding sample size for both loss estimates (natural log)."""
    return math.ceil(-math.log(params.delta / 4.0) / (2.0 * params.epsilon**2))


def required_samples_value(params, KV):
    if KV < 0:
        raise ValueError("KV must be nonnegative")
    g = params.gamma
    return math.ceil(
        -math.log(params.delta / 4.0) * (1.0 + g * KV) ** 2 / (2.0 * params.epsilon**2 * (1.0 - g) ** 2)
    )


@dataclass
class LossEstimate:
    L_R_hat: float
    L_P_hat: float
    T_used: int
    params: PacParams
    burn_in: int = 0
    thin: int = 1
    reward_kind: str = "state_action"


def loss_terms(lt, m, on_unsupported="raise"):
    """Per-transition reward errors and transition-loss terms.

    Pairs missing from ``m`` raise by default; with ``on_unsupported="max"``
    they contribute the largest possible term (1 for both losses on scaled
    rewards), which keeps the estimate an upper bound.
    """
    if on_unsupported not in ("raise", "max"):
        raise ValueError("on_unsupported must be 'raise' or 'max'")
    pairs = np.stack([lt.s, lt.a], axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    x_r = np.ones(len(lt))
    x_p = np.ones(len(lt))
    for k, (s, a) in enumerate(uniq):
        s, a = int(s), int(a)
        if not m.supported(s, a):
            if on_unsupported == "raise":
                raise UnsupportedPairError(s, a)
            continue
        sel = inv == k
        x_r[sel] = np.abs(lt.r[sel] - m.rewards[(s, a)])
        succ, prob = m.rows[(s, a)]
        pos = np.minimum(np.searchsorted(succ, lt.s_next[sel]), len(succ) - 1)
        hit = succ[pos] == lt.s_next[sel]
        x_p[sel] = 1.0 - np.where(hit, prob[pos], 0.0)
    return x_r, x_p


def select_samples(lt, burn_in=0, thin=1):
    if burn_in < 0 or thin < 1:
        raise ValueError("burn_in must be >= 0 and thin >= 1")
    return lt.slice(slice(burn_in, None, thin))


def estimate_losses(lt, m, params, burn_in=0, thin=1, reward_kind="state_action", on_unsupported="raise"):
    """Empirical means of |r - R(phi(s), a)| and 1 - P(phi(s') | phi(s), a)."""
    kept = select_samples(lt, burn_in, thin)
    if len(kept) == 0:
        raise ValueError("no transitions left to estimate from (T = 0)")
    x_r, x_p = loss_terms(kept, m, on_unsupported)
    return LossEstimate(
        float(math.fsum(x_r) / len(x_r)),
        float(math.fsum(x_p) / len(x_p)),
        len(kept),
        params,
        burn_in,
        thin,
        reward_kind,
    )


def bound_values(LR, LP, KR, KP, KV, epsilon, gamma):
    """Closed-form value-difference and bisimulation bounds with PAC slack."""
    g, e = gamma, epsilon
    out = {
        "value_diff_return": (LR + g * KV * LP) / (1.0 - g) + e,
        "value_diff_reach": g * LP / (1.0 - g) + g * e / (1.0 + g * KV),
        "bisim_label": g * (LP + e) / (1.0 - g),
    }
    if g * KP < 1.0:
        out["bisim_reward"] = (LR + e) + g * (LP + e) * KR / (1.0 - g * KP)
    else:
        out["bisim_reward"] = math.inf
    return out


def vacuity(bounds, Rmax, gamma):
    """A bound is vacuous when it exceeds the trivial range of its quantity."""
    return {
        "value_diff_return": bounds["value_diff_return"] > Rmax / (1.0 - gamma),
        "value_diff_reach": bounds["value_diff_reach"] > 1.0,
        "bisim_reward": bounds["bisim_reward"] > 1.0,
        "bisim_label": bounds["bisim_label"] > 1.0,
    }


@dataclass
class CertificateReport:
    estimate: LossEstimate
    constants: LipschitzConstants
    bounds: dict
    vacuous: dict
    required: dict
    objectives: tuple = ()
    provenance: dict = field(default_factory=dict)

    def to_json(self):
        p = self.estimate.params
        fin = lambda x: None if not math.isfinite(x) else float(x)
        bounds = {k: fin(self.bounds[k]) for k in BOUND_NAMES}
        bounds["vacuous"] = bool(any(self.vacuous.values()))
        bounds["vacuous_by_bound"] = {k: bool(v) for k, v in self.vacuous.items()}
        return {
            "version": REPORT_VERSION,
            "params": p.to_json(),
            "T": int(self.estimate.T_used),
            "T_required": dict(self.required),
            "losses": {"LR": self.estimate.L_R_hat, "LP": self.estimate.L_P_hat, "reward_kind": self.estimate.reward_kind},
            "constants": self.constants.to_json(),
            "constant_pairs": {"KR": list(self.constants.KR_pair), "KP": list(self.constants.KP_pair)},
            "warnings": list(self.constants.warnings),
            "objectives": list(self.objectives),
            "bounds": bounds,
            "provenance": dict(self.provenance, burn_in=self.estimate.burn_in, thin=self.estimate.thin),
        }

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"


def assemble_certificate(est, consts, obj_kinds=("return", "reach"), provenance=None, require_value_samples=True):
    p = est.params
    need_loss = required_samples_loss(p)
    need_value = required_samples_value(p, consts.KV)
    if est.T_used < need_loss:
        raise InsufficientSamplesError(est.T_used, need_loss, "loss")
    if require_value_samples and est.T_used < need_value:
        raise InsufficientSamplesError(est.T_used, need_value)
    bounds = bound_values(est.L_R_hat, est.L_P_hat, consts.KR, consts.KP, consts.KV, p.epsilon, p.gamma)
    return CertificateReport(
        est,
        consts,
        bounds,
        vacuity(bounds, consts.Rmax, p.gamma),
        {"loss": need_loss, "value": need_value},
        tuple(obj_kinds),
        dict(provenance or {}),
    )


def pointwise_bounds(s1, s2, xi, est, consts, objective="return"):
    """Bounds for two ground states sharing a latent image.

    Returns ``(value_difference_bound, bisimulation_distance_bound)`` where the
    bisimulation variant is the reward one for returns and the label one for
    reachability. Losses enter as ``L_hat + epsilon``.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi[s1] <= 0 or xi[s2] <= 0:
        raise ValueError("pointwise bounds need positive stationary mass at both states")
    factor = 1.0 / xi[s1] + 1.0 / xi[s2]
    p = est.params
    g, e = p.gamma, p.epsilon
    LR, LP = est.L_R_hat + e, est.L_P_hat + e
    if objective == "return":
        value = (LR + g * consts.KV * LP) / (1.0 - g)
        bisim = LR + g * LP * consts.KR / (1.0 - g * consts.KP) if g * consts.KP < 1.0 else math.inf
    elif objective in ("reach", "constrained_reach"):
        value = g * LP / (1.0 - g)
        bisim = value
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return value * factor, bisim * factor


def digest_arrays(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def digest_trace(trace):
    return digest_arrays(trace.states, trace.actions, trace.rewards, trace.labels, trace.resets)


def weighted_merge(estimates):
    """Length-weighted mean of per-shard estimates (same params)."""
    T = sum(e.T_used for e in estimates)
    LR = sum(e.L_R_hat * e.T_used for e in estimates) / T
    LP = sum(e.L_P_hat * e.T_used for e in estimates) / T
    return LossEstimate(LR, LP, T, estimates[0].params, estimates[0].burn_in, estimates[0].thin, estimates[0].reward_kind)
