"""Variational MDP: discrete latent encoder, latent dynamics prior, decoders,
the distortion/rate objective, annealing and policy distillation."""
from __future__ import annotations

import csv
import dataclasses
import json
from collections import Counter
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import PolicyHandle, evaluate_episodes, make_streams, rollout
from .latent import (
    EmbeddingPair,
    LabelMismatchError,
    LatentPolicyTable,
    bits_to_int,
    embed_trace,
    estimate_latent_mdp,
)
from .replay import BufferConfig, PrioritizedReplay, anneal_to_one

METRICS_HEADER = (
    "step", "D", "R", "elbo", "alpha", "beta", "lam_enc", "lam_prior",
    "eps_mimic", "usage_entropy", "return_eval",
)
ACTIVATIONS = {"relu": ad.relu, "leaky_relu": ad.leaky_relu, "tanh": ad.tanh}
_NP_ACT = {
    "relu": lambda x: np.maximum(x, 0.0),
    "leaky_relu": lambda x: np.where(x > 0, x, 0.2 * x),
    "tanh": np.tanh,
}
LOG_SCALE_MAX = 2.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, checkpoint):
        super().__init__(f"non-finite loss at step {step}; last good state saved to {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class VaeConfig:
    n_bits: int = 9
    n_latent_actions: int = 0  # 0: latent actions are the ground actions
    hidden: tuple = (64, 64)
    activation: str = "leaky_relu"
    lam_enc: float = 2.0 / 3.0
    lam_prior: float = 0.5
    tau_lam_enc: float = 1e-6
    tau_lam_prior: float = 2e-6
    lam_act_enc: float = 0.5
    lam_act_prior: float = 1.0 / 3.0
    tau_lam_act_enc: float = 1e-6
    tau_lam_act_prior: float = 2e-6
    alpha0: float = 10.0
    alpha_A: float = 1.0
    tau_alpha: float = 1e-5
    beta0: float = 0.0
    tau_beta: float = 5e-5
    eps_mimic0: float = 0.0
    tau_eps: float = 0.0
    lr: float = 1e-3
    batch: int = 128
    capacity: int = 1_000_000
    warmup: int = 10_000
    steps_per_update: int = 16
    buffer_mode: str = "bucket"
    varsigma: float = 1.0 / 3.0
    omega: float = 0.4
    tau_omega: float = 7e-5
    x_star: float = 1.0
    log_scale_min: float = -1.0  # floor of decoder log standard deviations
    steps: int = 200_000
    eval_interval: int = 10_000
    eval_batch: int = 2048
    eval_episodes: int = 0
    checkpoint_interval: int = 0
    mdp_steps: int = 20_000
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_bits < 1:
            raise ValueError("n_bits must be positive")
        if self.n_latent_actions < 0 or self.n_latent_actions == 1:
            raise ValueError("n_latent_actions must be 0 or at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        temps = (self.lam_enc, self.lam_prior, self.lam_act_enc, self.lam_act_prior)
        if any(not t > 0 for t in temps):
            raise ValueError("temperatures must be positive")
        n = self.n_latent_actions
        if n >= 2 and max(self.lam_act_enc, self.lam_act_prior) > 1.0 / (n - 1):
            raise ValueError(f"Gumbel-softmax temperature must be <= 1/(n-1) = {1.0 / (n - 1):.6g}")
        if not 0.0 <= self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in [0, 1]")
        if self.alpha0 < 0 or self.alpha_A < 0:
            raise ValueError("alpha must be nonnegative")
        if not self.log_scale_min < LOG_SCALE_MAX:
            raise ValueError(f"log_scale_min must be below {LOG_SCALE_MAX}")
        if not 0.0 <= self.eps_mimic0 <= 1.0:
            raise ValueError("eps_mimic0 must lie in [0, 1]")
        for name in ("tau_lam_enc", "tau_lam_prior", "tau_lam_act_enc", "tau_lam_act_prior",
                     "tau_alpha", "tau_beta", "tau_eps", "tau_omega"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.batch < 1 or self.steps_per_update < 1 or self.warmup < self.batch:
            raise ValueError("need batch >= 1, steps_per_update >= 1 and warmup >= batch")
        if self.checkpoint_interval % self.steps_per_update:
            raise ValueError("checkpoint_interval must be a multiple of steps_per_update")
        self.buffer_config()  # validates buffer fields

    def buffer_config(self):
        return BufferConfig(self.capacity, self.buffer_mode, self.varsigma, self.omega, self.tau_omega, self.x_star, self.warmup)

    def to_json(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown VaeConfig keys: {unknown}")
        return cls(**obj)

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def anneal(value0, tau, t, mode, t0=0):
    """Exponential schedules starting at ``t0``: decay to zero or rise to one."""
    if t <= t0:
        return value0
    if mode == "to_zero":
        return value0 * (1.0 - tau) ** (t - t0)
    if mode == "to_one":
        return anneal_to_one(value0, tau, t, t0)
    raise ValueError(f"unknown annealing mode {mode!r}")


@dataclass
class Schedule:
    alpha: float
    beta: float
    lam_enc: float
    lam_prior: float
    lam_act_enc: float
    lam_act_prior: float
    eps_mimic: float


def schedule_at(cfg, t):
    t0 = cfg.warmup
    z = lambda v, tau: anneal(v, tau, t, "to_zero", t0)
    return Schedule(
        alpha=z(cfg.alpha0, cfg.tau_alpha),
        beta=anneal(cfg.beta0, cfg.tau_beta, t, "to_one", t0),
        lam_enc=z(cfg.lam_enc, cfg.tau_lam_enc),
        lam_prior=z(cfg.lam_prior, cfg.tau_lam_prior),
        lam_act_enc=z(cfg.lam_act_enc, cfg.tau_lam_act_enc),
        lam_act_prior=z(cfg.lam_act_prior, cfg.tau_lam_act_prior),
        eps_mimic=z(cfg.eps_mimic0, cfg.tau_eps),
    )


# ---------------------------------------------------------------------------
# relaxed discrete samples
# ---------------------------------------------------------------------------


def _rng(noise_seed):
    if isinstance(noise_seed, np.random.Generator):
        return noise_seed
    return np.random.default_rng(noise_seed)


@dataclass
class RelaxedBernoulliSample:
    logits: object
    temperature: float
    soft: object  # Tensor when logits is a Tensor
    hard: np.ndarray
    logit_sample: object  # (logits + logistic noise) / temperature


def sample_relaxed_bernoulli(logits, temperature, noise_seed=None):
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    rng = _rng(noise_seed)
    shape = logits.shape if isinstance(logits, ad.Tensor) else np.shape(logits)
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    noise = np.log(u) - np.log1p(-u)
    if isinstance(logits, ad.Tensor):
        z = ad.mul(ad.add(logits, noise), 1.0 / temperature)
        soft = ad.sigmoid(z)
        hard = (soft.data >= 0.5).astype(np.uint8)
    else:
        z = (np.asarray(logits, dtype=np.float64) + noise) / temperature
        soft = ad._sigmoid(z)
        hard = (soft >= 0.5).astype(np.uint8)
    return RelaxedBernoulliSample(logits, temperature, soft, hard, z)


def relaxed_bernoulli_log_density(z, logits, temperature):
    """Log density of the tempered logit ``z`` (a logistic variable)."""
    lz = ad.mul(z, temperature)
    return ad.add(ad.sub(ad.add(ad.neg(lz), logits), ad.mul(ad.softplus(ad.sub(logits, lz)), 2.0)), math.log(temperature))


@dataclass
class GumbelSoftmaxSample:
    logits: object
    temperature: float
    soft: object
    hard: np.ndarray  # one-hot
    log_soft: object


def sample_gumbel_softmax(logits, temperature, noise_seed=None):
    shape = logits.shape if isinstance(logits, ad.Tensor) else np.shape(logits)
    n = shape[-1]
    if n < 2:
        raise ValueError("need at least two categories")
    if not 0.0 < temperature <= 1.0 / (n - 1) + 1e-12:
        raise ValueError(f"temperature {temperature} outside (0, 1/(n-1)] = (0, {1.0 / (n - 1):.6g}]")
    rng = _rng(noise_seed)
    u = rng.random(shape)
    g = -np.log(-np.log(np.clip(u, 1e-300, None)))
    if isinstance(logits, ad.Tensor):
        log_soft = ad.log_softmax(ad.mul(ad.add(logits, g), 1.0 / temperature))
        soft = ad.exp(log_soft)
        arg = np.argmax(log_soft.data, axis=-1)
    else:
        x = (np.asarray(logits, dtype=np.float64) + g) / temperature
        x = x - x.max(axis=-1, keepdims=True)
        log_soft = x - np.log(np.exp(x).sum(axis=-1, keepdims=True))
        soft = np.exp(log_soft)
        arg = np.argmax(log_soft, axis=-1)
    hard = np.eye(n, dtype=np.uint8)[arg]
    return GumbelSoftmaxSample(logits, temperature, soft, hard, log_soft)


def exp_concrete_log_density(y, logits, temperature):
    """Log density of a log-space relaxed categorical sample ``y``."""
    n = y.shape[-1]
    lam = temperature
    a = ad.sub(logits, ad.mul(y, lam))
    const = math.lgamma(n) + (n - 1) * math.log(lam)
    return ad.add(ad.sub(ad.reduce_sum(a, axis=-1), ad.mul(ad.logsumexp(a), float(n))), const)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class Mlp:
    def __init__(self, name, sizes, activation, rng):
        self.name = name
        self.activation = activation
        self.params = []
        for k, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = math.sqrt(6.0 / (m + n))
            W = ad.Tensor(rng.uniform(-lim, lim, size=(m, n)), requires_grad=True, name=f"{name}.W{k}")
            b = ad.Tensor(np.zeros(n), requires_grad=True, name=f"{name}.b{k}")
            self.params += [W, b]

    def __call__(self, x):
        act = ACTIVATIONS[self.activation]
        n = len(self.params) // 2
        for k in range(n):
            x = ad.bias_add(ad.matmul(x, self.params[2 * k]), self.params[2 * k + 1])
            if k < n - 1:
                x = act(x)
        return x

    def np_forward(self, x):
        act = _NP_ACT[self.activation]
        n = len(self.params) // 2
        for k in range(n):
            x = x @ self.params[2 * k].data + self.params[2 * k + 1].data
            if k < n - 1:
                x = act(x)
        return x


def _squash_log_scale(raw, lo):
    # smooth map onto [lo, LOG_SCALE_MAX]
    half = 0.5 * (LOG_SCALE_MAX - lo)
    return ad.add(ad.mul(ad.tanh(raw), half), lo + half)


def _np_log_scale(raw, lo):
    half = 0.5 * (LOG_SCALE_MAX - lo)
    return np.tanh(raw) * half + lo + half


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    @classmethod
    def fit(cls, x, floor=1e-3):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))


class VaeMdp:
    """All networks of the variational model plus the data normalizers."""

    def __init__(self, cfg, state_dim, n_ap, n_actions, discrete_actions, action_scale=1.0, seed=0):
        if cfg.n_bits <= n_ap:
            raise ValueError(f"n_bits={cfg.n_bits} leaves no free bits beyond {n_ap} label bits")
        if not discrete_actions and cfg.n_latent_actions == 0:
            raise ValueError("continuous action spaces need n_latent_actions >= 2")
        self.cfg = cfg
        self.state_dim = state_dim
        self.n_ap = n_ap
        self.n_free = cfg.n_bits - n_ap
        self.n_actions = n_actions  # ground: count (discrete) or dimension (continuous)
        self.discrete_actions = discrete_actions
        self.action_scale = float(action_scale)
        self.shared_actions = cfg.n_latent_actions == 0
        self.n_bar = n_actions if self.shared_actions else cfg.n_latent_actions
        self.state_norm = Normalizer(np.zeros(state_dim), np.ones(state_dim))
        rng = np.random.default_rng(seed)
        h, nb, act = list(cfg.hidden), cfg.n_bits, cfg.activation
        self.nets = {"enc": Mlp("enc", [state_dim] + h + [self.n_free], act, rng)}
        if self.shared_actions:
            self.nets["trans"] = Mlp("trans", [nb] + h + [self.n_bar * nb], act, rng)
        else:
            self.nets["trans"] = Mlp("trans", [nb + self.n_bar] + h + [nb], act, rng)
            self.nets["act_enc"] = Mlp("act_enc", [nb + n_actions] + h + [self.n_bar], act, rng)
            self.nets["psi"] = Mlp("psi", [nb + self.n_bar] + h + [2 * n_actions], act, rng)
        self.nets["policy"] = Mlp("policy", [nb] + h + [self.n_bar], act, rng)
        self.nets["reward"] = Mlp("reward", [nb + self.n_bar] + h + [2], act, rng)
        self.nets["dec"] = Mlp("dec", [nb] + h + [2 * state_dim], act, rng)

    @property
    def params(self):
        return [p for name in sorted(self.nets) for p in self.nets[name].params]

    def named_params(self):
        return {p.name: p for p in self.params}

    # ----- deterministic (mode) evaluation, plain numpy -----

    def free_logits(self, states):
        return self.nets["enc"].np_forward(self.state_norm(np.atleast_2d(states)))

    def encode_bits(self, states, labels):
        """Mode of the state encoder: label bits verbatim, free bits sigmoid >= 0.5."""
        free = (self.free_logits(states) >= 0.0).astype(np.uint8)
        return np.concatenate([np.atleast_2d(labels).astype(np.uint8), free], axis=1)

    def policy_logits(self, bits):
        return self.nets["policy"].np_forward(np.asarray(bits, dtype=np.float64))

    def latent_action_mode(self, bits, ground_actions):
        """Mode of the latent action encoder for ground actions."""
        x = np.concatenate([np.asarray(bits, np.float64), self._norm_action(ground_actions)], axis=1)
        return np.argmax(self.nets["act_enc"].np_forward(x), axis=1)

    def ground_action(self, bits, a_bar):
        """Mode of psi: the decoded ground action, clipped to the action range."""
        onehot = np.eye(self.n_bar)[np.atleast_1d(a_bar)]
        out = self.nets["psi"].np_forward(np.concatenate([np.atleast_2d(bits).astype(np.float64), onehot], axis=1))
        mean = out[:, : self.n_actions]
        return np.clip(mean, -1.0, 1.0) * self.action_scale

    def _norm_action(self, a):
        return np.asarray(a, dtype=np.float64).reshape(-1, self.n_actions) / self.action_scale


def _onehot(idx, n):
    return np.eye(n)[np.asarray(idx, dtype=np.int64)]


def _bernoulli_entropy(p):
    p = ad.clip(p, ad.PROB_CLAMP, 1.0 - ad.PROB_CLAMP)
    return ad.neg(ad.add(ad.mul(p, ad.log(p)), ad.mul(ad.sub(1.0, p), ad.log(ad.sub(1.0, p)))))


def _gauss(x, out, dim, lo):
    return ad.gaussian_log_prob(x, ad.columns(out, 0, dim), _squash_log_scale(ad.columns(out, dim, 2 * dim), lo))


@dataclass
class ElboTerms:
    D: float
    R: float
    H: float
    alpha_beta_elbo: float
    loss: object = None  # differentiable Tensor: -(alpha,beta)-ELBO
    per_transition: np.ndarray = None  # D_i + R_i (unweighted)


def encode_state(model, states, labels, temperature, noise_seed=None):
    """Relaxed latent sample; the label prefix is copied, free bits are sampled."""
    x = ad.Tensor(model.state_norm(np.atleast_2d(states)))
    logits = model.nets["enc"](x)
    smp = sample_relaxed_bernoulli(logits, temperature, noise_seed)
    labels = np.atleast_2d(labels).astype(np.float64)
    latent = ad.concat([ad.Tensor(labels), smp.soft], axis=1)
    if not np.array_equal(latent.data[:, : labels.shape[1]], labels):
        raise LabelMismatchError("latent prefix differs from the ground label")
    return latent, logits, smp


def elbo_terms(batch, model, sched, rng, weights=None):
    """Training objective on a replay batch (Monte-Carlo rate on relaxed samples).

    ``batch`` holds arrays ``s, a, r, s_next, l, l_next``.
    """
    s = np.asarray(batch["s"], dtype=np.float64)
    B = s.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    for k in ("a", "r", "s_next", "l", "l_next"):
        if len(batch[k]) != B:
            raise ValueError(f"batch field {k!r} has {len(batch[k])} rows, expected {B}")
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    nets, n_ap, nb = model.nets, model.n_ap, model.cfg.n_bits
    lam1, lam2 = sched.lam_enc, sched.lam_prior
    lo = model.cfg.log_scale_min
    z_bar, _, _ = encode_state(model, s, batch["l"], lam1, rng)
    z_next, q_logits, smp = encode_state(model, batch["s_next"], batch["l_next"], lam1, rng)
    s_next_n = ad.Tensor(model.state_norm(batch["s_next"]))
    r = ad.Tensor(np.asarray(batch["r"], dtype=np.float64).reshape(B, 1))
    log_q = ad.reduce_sum(relaxed_bernoulli_log_density(smp.logit_sample, q_logits, lam1), axis=1)
    sign = ad.Tensor(2.0 * np.asarray(batch["l_next"], dtype=np.float64) - 1.0)
    pol_logp = ad.log_softmax(nets["policy"](z_bar))
    log_g = _gauss(s_next_n, nets["dec"](z_next), model.state_dim, lo)

    def prior_logp(logits):
        lab = ad.reduce_sum(ad.log_sigmoid(ad.mul(ad.columns(logits, 0, n_ap), sign)), axis=1) if n_ap else 0.0
        free = ad.reduce_sum(relaxed_bernoulli_log_density(smp.logit_sample, ad.columns(logits, n_ap, nb), lam2), axis=1)
        return ad.add(free, lab)

    if model.shared_actions:
        a_oh = _onehot(batch["a"], model.n_bar)
        log_pi = ad.reduce_sum(ad.mul(pol_logp, a_oh), axis=1)
        log_gr = _gauss(r, nets["reward"](ad.concat([z_bar, ad.Tensor(a_oh)], axis=1)), 1, lo)
        D_i = ad.neg(ad.add(ad.add(log_g, log_pi), log_gr))
        # rate against the policy-averaged latent transition
        all_logits = nets["trans"](z_bar)
        per_action = [ad.reshape(prior_logp(ad.columns(all_logits, k * nb, (k + 1) * nb)), (B, 1)) for k in range(model.n_bar)]
        log_p = ad.logsumexp(ad.add(ad.concat(per_action, axis=1), pol_logp))
        R_i = ad.sub(log_q, log_p)
        H = ad.reduce_sum(_bernoulli_entropy(ad.reduce_mean(ad.sigmoid(q_logits), axis=0)))
    else:
        a_n = ad.Tensor(model._norm_action(batch["a"]))
        qa_logits = nets["act_enc"](ad.concat([z_bar, a_n], axis=1))
        gs = sample_gumbel_softmax(qa_logits, sched.lam_act_enc, rng)
        a_bar = gs.soft
        log_psi = _gauss(a_n, nets["psi"](ad.concat([z_bar, a_bar], axis=1)), model.n_actions, lo)
        log_gr = _gauss(r, nets["reward"](ad.concat([z_bar, a_bar], axis=1)), 1, lo)
        D_i = ad.neg(ad.add(ad.add(log_g, log_psi), log_gr))
        log_p = prior_logp(nets["trans"](ad.concat([z_bar, a_bar], axis=1)))
        kl_a = ad.sub(
            exp_concrete_log_density(gs.log_soft, qa_logits, sched.lam_act_enc),
            exp_concrete_log_density(gs.log_soft, pol_logp, sched.lam_act_prior),
        )
        R_i = ad.add(ad.sub(log_q, log_p), kl_a)
        h_s = ad.reduce_sum(_bernoulli_entropy(ad.reduce_mean(ad.sigmoid(q_logits), axis=0)))
        pa = ad.clip(ad.reduce_mean(ad.softmax(qa_logits), axis=0), ad.PROB_CLAMP, 1.0)
        h_a = ad.neg(ad.reduce_sum(ad.mul(pa, ad.log(pa))))
        H = ad.add(h_s, ad.mul(h_a, model.cfg.alpha_A))
    wn = w / B
    D = ad.reduce_sum(ad.mul(D_i, wn))
    R = ad.reduce_sum(ad.mul(R_i, wn))
    loss = ad.sub(ad.add(D, ad.mul(R, sched.beta)), ad.mul(H, sched.alpha))
    per = D_i.data + R_i.data
    return ElboTerms(float(D.data), float(R.data), float(H.data), -float(loss.data), loss, per)


# ---------------------------------------------------------------------------
# analytic (evaluation-mode) terms
# ---------------------------------------------------------------------------


def _log_sig(x):
    return -np.logaddexp(0.0, -x)


def _bernoulli_log_pmf(bits, logits):
    return np.where(bits > 0, _log_sig(logits), _log_sig(-logits))


def _patterns(n):
    return ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(np.float64)


def _log_softmax_np(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def evaluate_terms(model, batch, chunk=512):
    """Mode-based distortion and exact rate (enumerating the free bits).

    Returns per-transition arrays ``D`` and ``R``; ``R >= 0`` holds exactly.
    """
    nb, n_ap, nf = model.cfg.n_bits, model.n_ap, model.n_free
    pat = _patterns(nf)  # (2^nf, nf)
    lo = model.cfg.log_scale_min
    D_all, R_all = [], []
    B = len(batch["r"])
    for start in range(0, B, chunk):
        sl = slice(start, min(start + chunk, B))
        s, s2 = batch["s"][sl], batch["s_next"][sl]
        l, l2 = np.asarray(batch["l"][sl]), np.asarray(batch["l_next"][sl])
        a, r = batch["a"][sl], np.asarray(batch["r"][sl], dtype=np.float64).reshape(-1, 1)
        zb = model.encode_bits(s, l).astype(np.float64)
        zb2 = model.encode_bits(s2, l2).astype(np.float64)
        qlog = model.free_logits(s2)
        # log q over all free patterns: (b, 2^nf)
        lq = (_bernoulli_log_pmf(pat[None], qlog[:, None, :])).sum(axis=2)
        q = np.exp(lq)
        pol = _log_softmax_np(model.nets["policy"].np_forward(zb))
        dec = model.nets["dec"].np_forward(zb2)
        d = model.state_dim
        log_g = _np_gauss(model.state_norm(s2), dec[:, :d], dec[:, d:], lo)
        if model.shared_actions:
            a_oh = _onehot(a, model.n_bar)
            rew = model.nets["reward"].np_forward(np.concatenate([zb, a_oh], axis=1))
            Di = -(log_g + (pol * a_oh).sum(axis=1) + _np_gauss(r, rew[:, :1], rew[:, 1:], lo))
            allp = model.nets["trans"].np_forward(zb)
            comps = []
            for k in range(model.n_bar):
                lg = allp[:, k * nb : (k + 1) * nb]
                lab = _bernoulli_log_pmf(l2, lg[:, :n_ap]).sum(axis=1)
                free = _bernoulli_log_pmf(pat[None], lg[:, None, n_ap:]).sum(axis=2)
                comps.append(pol[:, k : k + 1] + lab[:, None] + free)
            lp = np.logaddexp.reduce(np.stack(comps, axis=0), axis=0)
            Ri = (q * (lq - lp)).sum(axis=1)
        else:
            an = model._norm_action(a)
            qa = _log_softmax_np(model.nets["act_enc"].np_forward(np.concatenate([zb, an], axis=1)))
            pa = np.exp(qa)
            Di = -log_g
            Ri = (pa * (qa - pol)).sum(axis=1)
            for k in range(model.n_bar):
                oh = np.tile(np.eye(model.n_bar)[k], (len(zb), 1))
                x = np.concatenate([zb, oh], axis=1)
                psi = model.nets["psi"].np_forward(x)
                rew = model.nets["reward"].np_forward(x)
                m = model.n_actions
                Di = Di - pa[:, k] * (_np_gauss(an, psi[:, :m], psi[:, m:], lo) + _np_gauss(r, rew[:, :1], rew[:, 1:], lo))
                lg = model.nets["trans"].np_forward(x)
                lab = _bernoulli_log_pmf(l2, lg[:, :n_ap]).sum(axis=1)
                free = _bernoulli_log_pmf(pat[None], lg[:, None, n_ap:]).sum(axis=2)
                Ri = Ri + pa[:, k] * (q * (lq - free - lab[:, None])).sum(axis=1)
        D_all.append(Di)
        R_all.append(np.maximum(Ri, 0.0))
    return np.concatenate(D_all), np.concatenate(R_all)


def _np_gauss(x, mean, raw_scale, lo):
    ls = _np_log_scale(raw_scale, lo)
    z = (x - mean) * np.exp(-ls)
    return (-0.5 * z * z - ls - 0.5 * math.log(2 * math.pi)).sum(axis=-1)


def code_entropy(counts):
    """Entropy (nats) of a histogram given as an array of counts."""
    counts = np.asarray(counts, dtype=np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def usage_entropy(model, states, labels):
    """Entropy (nats) of the empirical distribution of mode latent states."""
    codes = bits_to_int(model.encode_bits(states, labels))
    return code_entropy(np.unique(codes, return_counts=True)[1])


# ---------------------------------------------------------------------------
# latent policy and embeddings
# ---------------------------------------------------------------------------


def embedding(model, env):
    """Deterministic (mode) embeddings derived from the trained encoders."""

    def phi_batch(states):
        states = np.atleast_2d(states)
        labels = np.array([env.label(x) for x in states], dtype=np.uint8)
        return bits_to_int(model.encode_bits(states, labels))

    def phi(s):
        return int(phi_batch(np.asarray(s)[None])[0])

    psi = None
    if not model.shared_actions:
        from .latent import int_to_bits

        def psi(s, a_bar):
            bits = int_to_bits(phi(s), model.cfg.n_bits)[None]
            return model.ground_action(bits, a_bar)[0]

    return EmbeddingPair(phi, model.cfg.n_bits, model.n_ap, psi=psi, phi_batch=phi_batch)


def latent_policy_probs(model, bits, greedy=True):
    logits = model.policy_logits(np.atleast_2d(bits))
    if greedy:
        return np.eye(model.n_bar)[np.argmax(logits, axis=1)]
    return np.exp(_log_softmax_np(logits))


def distilled_policy(model, env, greedy=True, record=None):
    """Ground policy running the latent policy through phi (and psi).

    If ``record`` is a list, the chosen latent actions are appended to it.
    """

    def act(s, rng):
        bits = model.encode_bits(np.asarray(s)[None], env.label(s)[None])
        p = latent_policy_probs(model, bits, greedy)[0]
        a_bar = int(np.argmax(p)) if greedy else min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), len(p) - 1)
        if record is not None:
            record.append(a_bar)
        if model.shared_actions:
            return a_bar
        return model.ground_action(bits, a_bar)[0]

    return PolicyHandle("latent", act, {"greedy": greedy})


def distill_eval(env, model, episodes=30, seed=0, greedy=True):
    """Mean and per-episode raw returns of the distilled policy."""
    return evaluate_episodes(env, distilled_policy(model, env, greedy), episodes, seed)


def extract_latent_model(model, env, steps, seed, greedy=True):
    """Frequency-estimated latent MDP and tabular latent policy from a run of
    the distilled policy."""
    chosen = []
    trace = rollout(env, distilled_policy(model, env, greedy, record=chosen), steps, seed)
    emb = embedding(model, env)
    if model.shared_actions:
        lt = embed_trace(trace, emb)
    else:
        it = iter(chosen)
        lt = embed_trace(trace, emb, action_encoder=lambda s, a: next(it))
    m = estimate_latent_mdp(lt, model.cfg.n_bits, model.n_ap, model.n_bar)
    m.metadata.update({"source": "frequency", "steps": steps, "seed": seed})
    probs = {}
    states = m.states()
    if len(states):
        from .latent import int_to_bits

        P = latent_policy_probs(model, int_to_bits(states, model.cfg.n_bits), greedy)
        probs = {int(z): P[k] for k, z in enumerate(states)}
    return m, LatentPolicyTable(probs, model.n_bar), trace


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def model_for_env(cfg, env, seed=None):
    scale = 1.0 if env.discrete_actions else float(env.constants.get("max_torque", 1.0))
    return VaeMdp(cfg, env.dim, env.n_ap, env.n_actions, env.discrete_actions, scale, cfg.seed if seed is None else seed)


def save_model(model, path, env_id, extra=None, optimizer=None):
    arrays = {name: p.data for name, p in model.named_params().items()}
    arrays["norm.mean"] = model.state_norm.mean
    arrays["norm.std"] = model.state_norm.std
    if optimizer is not None and optimizer.state:
        for k, name in enumerate(p.name for p in optimizer.params):
            arrays[f"adam.m.{name}"] = optimizer.state["m"][k]
            arrays[f"adam.v.{name}"] = optimizer.state["v"][k]
    meta = {"env_id": env_id, "config": model.cfg.to_json(), "adam_t": optimizer.state.get("t", 0) if optimizer else 0}
    meta.update(extra or {})
    ad.save_arrays(path, arrays, meta)


def load_model(path, env=None, optimizer=False):
    arrays, meta = ad.load_arrays(path)
    cfg = VaeConfig.from_json(meta["config"])
    if env is None:
        from .envs import make_env

        env = make_env(meta["env_id"])
    model = model_for_env(cfg, env)
    for name, p in model.named_params().items():
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"checkpoint array {name} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].copy()
    model.state_norm = Normalizer(arrays["norm.mean"], arrays["norm.std"])
    if not optimizer:
        return model, meta
    opt = ad.Adam(model.params, lr=cfg.lr)
    if meta.get("adam_t", 0):
        opt.state = {
            "t": meta["adam_t"],
            "m": [arrays[f"adam.m.{p.name}"].copy() for p in opt.params],
            "v": [arrays[f"adam.v.{p.name}"].copy() for p in opt.params],
        }
    return model, meta, opt


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.ravel()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _philox_state(st):
    # Philox keeps its counter, key and output buffer as uint64 arrays
    st = dict(st)
    st["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in st["state"].items()}
    st["buffer"] = np.asarray(st["buffer"], dtype=np.uint64)
    return st


@dataclass
class TrainResult:
    model: VaeMdp
    metrics: list
    steps: int
    updates: int
    latent_mdp: object = None
    latent_policy: object = None
    diverged: bool = False
    info: dict = field(default_factory=dict)


class Trainer:
    """Serial collect/optimize loop with exact checkpoint/resume."""

    def __init__(self, env, base_policy, cfg, out_dir=None):
        self.env, self.base, self.cfg = env, base_policy, cfg
        self.out = Path(out_dir) if out_dir is not None else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        self.model = model_for_env(cfg, env)
        self.opt = ad.Adam(self.model.params, lr=cfg.lr)
        self.dyn_rng, self.pol_rng = make_streams(cfg.seed)
        self.train_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))
        self.buffer = PrioritizedReplay(cfg.buffer_config())
        self.t = 0
        self.updates = 0
        self.episode_t = 0
        self.s = env.reset(self.dyn_rng)
        self.pending = []
        self.metrics = []
        # mode codes of the training batches since the last metrics row
        self.batch_codes = Counter()
        # best evaluation return so far and a snapshot of the model that got it
        self.best_return = -math.inf
        self.best = None

    # ----- data collection -----

    def _act(self, s, eps):
        if eps > 0.0 and self.t >= self.cfg.warmup and self.pol_rng.random() < eps:
            return distilled_policy(self.model, self.env, greedy=False).act(s, self.pol_rng)
        return self.base.act(s, self.pol_rng)

    def _collect_one(self, eps):
        env, s = self.env, self.s
        a = self._act(s, eps)
        s2, r, term = env.step(s, a, self.dyn_rng)
        self.episode_t += 1
        if term or (env.max_episode_steps is not None and self.episode_t >= env.max_episode_steps):
            s2 = env.reset(self.dyn_rng)
            self.episode_t = 0
        self.pending.append({"s": s, "a": a, "r": r, "s_next": s2, "l": env.label(s), "l_next": env.label(s2)})
        self.s = s2
        self.t += 1

    def _flush(self):
        if not self.pending:
            return
        hints = [None] * len(self.pending)
        if self.cfg.buffer_mode == "bucket":
            S = np.array([p["s"] for p in self.pending])
            L = np.array([p["l"] for p in self.pending])
            hints = bits_to_int(self.model.encode_bits(S, L)).tolist()
        for item, h in zip(self.pending, hints):
            self.buffer.insert(item, h)
        self.pending = []

    # ----- optimisation -----

    def _update(self):
        cfg = self.cfg
        self.buffer.step = self.t
        idx, batch, w = self.buffer.sample(cfg.batch, self.train_rng)
        sched = schedule_at(cfg, self.t)
        terms = elbo_terms(batch, self.model, sched, self.train_rng, w)
        if not np.isfinite(terms.loss.data):
            raise FloatingPointError("non-finite loss")
        self.opt.zero_grad()
        ad.backward(terms.loss)
        grads = [p.grad for p in self.opt.params]
        if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
            raise FloatingPointError("non-finite gradient")
        self.opt.step()
        if cfg.buffer_mode == "loss":
            self.buffer.update_priority_loss(idx, terms.per_transition)
        self.batch_codes.update(bits_to_int(self.model.encode_bits(batch["s"], batch["l"])).tolist())
        self.updates += 1
        return terms

    def _fit_normalizer(self):
        S = self.buffer.columns["s"][: len(self.buffer)]
        self.model.state_norm = Normalizer.fit(S)

    def evaluate(self):
        cfg, buf = self.cfg, self.buffer
        n = min(cfg.eval_batch, len(buf))
        rng = np.random.default_rng([cfg.seed, self.t])
        idx = rng.choice(len(buf), size=n, replace=False)
        batch = {k: v[idx] for k, v in buf.columns.items()}
        D, R = evaluate_terms(self.model, batch)
        sched = schedule_at(cfg, self.t)
        ret = ""
        if cfg.eval_episodes > 0:
            ret = distill_eval(self.env, self.model, cfg.eval_episodes, seed=cfg.seed + 3)[0]
            if ret > self.best_return:
                self.best_return = ret
                self.best = self._snapshot()
        usage = code_entropy([self.batch_codes[k] for k in sorted(self.batch_codes)]) if self.batch_codes else ""
        self.batch_codes = Counter()
        row = {
            "step": self.t, "D": float(D.mean()), "R": float(R.mean()), "elbo": float(-(D.mean() + R.mean())),
            "alpha": sched.alpha, "beta": sched.beta, "lam_enc": sched.lam_enc, "lam_prior": sched.lam_prior,
            "eps_mimic": sched.eps_mimic, "usage_entropy": usage,
            "return_eval": ret,
        }
        self.metrics.append(row)
        if self.out is not None:
            path = self.out / "metrics.csv"
            new = not path.exists()
            with path.open("a", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
                if new:
                    wr.writeheader()
                wr.writerow(row)
        return row

    def _snapshot(self):
        arrays = {name: p.data.copy() for name, p in self.model.named_params().items()}
        arrays["norm.mean"] = self.model.state_norm.mean.copy()
        arrays["norm.std"] = self.model.state_norm.std.copy()
        return {"step": self.t, "return": self.best_return, "arrays": arrays}

    def best_model(self):
        """Copy of the model with the highest evaluation return (None before any)."""
        if self.best is None:
            return None
        model = model_for_env(self.cfg, self.env)
        for name, p in model.named_params().items():
            p.data = self.best["arrays"][name].copy()
        model.state_norm = Normalizer(self.best["arrays"]["norm.mean"], self.best["arrays"]["norm.std"])
        return model

    def run(self, until=None):
        cfg = self.cfg
        until = cfg.steps if until is None else min(until, cfg.steps)
        while self.t < until:
            eps = schedule_at(cfg, self.t).eps_mimic
            self._collect_one(eps)
            if self.t % cfg.steps_per_update == 0 or self.t == cfg.warmup:
                self._flush()
            if self.t == cfg.warmup:
                self._fit_normalizer()
            if self.t >= cfg.warmup and self.t % cfg.steps_per_update == 0:
                try:
                    self._update()
                except FloatingPointError:
                    ck = self.checkpoint(tag="diverged") if self.out is not None else None
                    raise TrainingDivergedError(self.t, ck) from None
            if self.t >= cfg.warmup and cfg.eval_interval and self.t % cfg.eval_interval == 0:
                self.evaluate()
            if self.out is not None and cfg.checkpoint_interval and self.t % cfg.checkpoint_interval == 0:
                self.checkpoint()
        self._flush()
        return self

    # ----- checkpoints -----

    def _rng_state(self):
        return {k: _jsonable(getattr(self, k).bit_generator.state) for k in ("dyn_rng", "pol_rng", "train_rng")}

    def checkpoint(self, tag=None):
        """Write parameters, optimizer moments, RNG streams and the replay buffer."""
        self._flush()
        ck = self.out / "checkpoints" / (tag or f"step_{self.t:09d}")
        ck.mkdir(parents=True, exist_ok=True)
        buf = self.buffer
        state = {
            "t": self.t, "updates": self.updates, "episode_t": self.episode_t, "s": np.asarray(self.s).tolist(),
            "rng": self._rng_state(),
            "buffer": {
                "size": buf.size, "cursor": buf.cursor, "n_inserted": buf.n_inserted, "max_priority": buf.max_priority,
                "loss_max": buf.loss_max if math.isfinite(buf.loss_max) else None,
                "loss_min": buf.loss_min if math.isfinite(buf.loss_min) else None,
                "buckets": [[int(k), int(v)] for k, v in sorted(buf.bucket_counts.items())],
            },
            "batch_codes": [[int(k), int(v)] for k, v in sorted(self.batch_codes.items())],
        }
        save_model(self.model, ck / "params.json", self.env.env_id, {"trainer": state}, self.opt)
        if self.best is not None:
            ad.save_arrays(ck / "best.json", self.best["arrays"], {"step": self.best["step"], "return": self.best["return"]})
        if buf.columns is not None:
            n = buf.size
            cols = {f"col_{k}": v[:n] for k, v in buf.columns.items()}
            np.savez(ck / "buffer.npz", priorities=buf.priorities[:n], insert_index=buf.insert_index[:n], **cols)
        (self.out / "checkpoints" / "latest").write_text(ck.name + "\n")
        return ck

    @classmethod
    def resume(cls, env, base_policy, ck_dir, out_dir=None, cfg=None):
        ck_dir = Path(ck_dir)
        model, meta, opt = load_model(ck_dir / "params.json", env, optimizer=True)
        cfg = cfg or model.cfg
        tr = cls(env, base_policy, cfg, out_dir)
        tr.model = model
        tr.opt = opt
        st = meta["trainer"]
        tr.t, tr.updates, tr.episode_t = st["t"], st["updates"], st["episode_t"]
        tr.s = np.asarray(st["s"], dtype=np.float64)
        for k, v in st["rng"].items():
            getattr(tr, k).bit_generator.state = _philox_state(v)
        b, bs = tr.buffer, st["buffer"]
        if (ck_dir / "buffer.npz").exists():
            data = np.load(ck_dir / "buffer.npz")
            n = bs["size"]
            first = {k[4:]: data[k][0] for k in data.files if k.startswith("col_")}
            b._alloc(first)
            for k in b.columns:
                b.columns[k][:n] = data[f"col_{k}"]
            b.priorities[:n] = data["priorities"]
            b.insert_index[:n] = data["insert_index"]
            b.tree.set(np.arange(n), data["priorities"] ** cfg.varsigma)
        b.size, b.cursor, b.n_inserted, b.max_priority = bs["size"], bs["cursor"], bs["n_inserted"], bs["max_priority"]
        b.loss_max = -math.inf if bs["loss_max"] is None else bs["loss_max"]
        b.loss_min = math.inf if bs["loss_min"] is None else bs["loss_min"]
        for k, v in bs["buckets"]:
            b.bucket_counts[k] = v
        tr.batch_codes = Counter({k: v for k, v in st.get("batch_codes", [])})
        if (ck_dir / "best.json").exists():
            arrays, bm = ad.load_arrays(ck_dir / "best.json")
            tr.best_return = bm["return"]
            tr.best = {"step": bm["step"], "return": bm["return"], "arrays": arrays}
        return tr


def train(env, base_policy, cfg, out_dir=None, extract=True):
    """Train from scratch; optionally extract the latent MDP afterwards."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tr = Trainer(env, base_policy, cfg, out_dir)
    diverged = False
    try:
        tr.run()
    except TrainingDivergedError:
        diverged = True
        if out_dir is None:
            raise
    return finish(tr, extract, diverged)


def finish(tr, extract=True, diverged=False):
    res = TrainResult(tr.model, tr.metrics, tr.t, tr.updates, diverged=diverged)
    if diverged:
        return res
    out = tr.out
    best = tr.best_model()
    res.info["best_model"] = best
    if best is not None:
        res.info["best_step"], res.info["best_return"] = tr.best["step"], tr.best_return
    if out is not None:
        save_model(tr.model, out / "model.json", tr.env.env_id, {"steps": tr.t, "updates": tr.updates})
        if best is not None:
            save_model(best, out / "best_model.json", tr.env.env_id, {"step": tr.best["step"], "eval_return": tr.best_return})
    if extract:
        m, pol, _ = extract_latent_model(tr.model, tr.env, tr.cfg.mdp_steps, tr.cfg.seed + 2)
        res.latent_mdp, res.latent_policy = m, pol
        if out is not None:
            m.save(out / "latent_mdp.json")
            (out / "latent_policy.json").write_text(json.dumps(pol.to_json(), sort_keys=True))
    return res
