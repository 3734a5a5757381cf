"""Central finite-difference gradient checks for the autodiff ops."""
import numpy as np

from latentcert import autodiff as ad


def _away(x, pts=(0.0,), gap=0.05):
    # move samples away from kinks so central differences are meaningful
    for p in pts:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.where(x >= p, gap, -gap), x)
    return x


def _case(rng, name):
    r, c = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    g = lambda *shape: rng.normal(size=shape)
    pos = lambda *shape: rng.uniform(0.3, 2.0, size=shape)
    table = {
        "add": (ad.add, [g(r, c), g(r, c)]),
        "add_scalar": (lambda a, b: ad.add(a, b), [g(r, c), g(1)]),
        "sub": (ad.sub, [g(r, c), g(r, c)]),
        "mul": (ad.mul, [g(r, c), g(r, c)]),
        "div": (ad.div, [g(r, c), pos(r, c)]),
        "neg": (ad.neg, [g(r, c)]),
        "bias_add": (ad.bias_add, [g(r, c), g(c)]),
        "matmul": (ad.matmul, [g(r, c), g(c, int(rng.integers(1, 4)))]),
        "exp": (ad.exp, [g(r, c)]),
        "log": (ad.log, [pos(r, c)]),
        "sigmoid": (ad.sigmoid, [g(r, c)]),
        "softplus": (ad.softplus, [g(r, c)]),
        "log_sigmoid": (ad.log_sigmoid, [g(r, c)]),
        "tanh": (ad.tanh, [g(r, c)]),
        "relu": (ad.relu, [_away(g(r, c))]),
        "leaky_relu": (ad.leaky_relu, [_away(g(r, c))]),
        "square": (ad.square, [g(r, c)]),
        "abs": (ad.abs_, [_away(g(r, c))]),
        "clip": (lambda a: ad.clip(a, -0.5, 0.5), [_away(g(r, c), (-0.5, 0.5))]),
        "logsumexp": (ad.logsumexp, [g(r, c)]),
        "log_softmax": (ad.log_softmax, [g(r, c)]),
        "softmax": (ad.softmax, [g(r, c)]),
        "reduce_sum": (ad.reduce_sum, [g(r, c)]),
        "reduce_sum_axis0": (lambda a: ad.reduce_sum(a, axis=0), [g(r, c)]),
        "reduce_sum_axis1": (lambda a: ad.reduce_sum(a, axis=1), [g(r, c)]),
        "reduce_mean": (ad.reduce_mean, [g(r, c)]),
        "reduce_mean_axis0": (lambda a: ad.reduce_mean(a, axis=0), [g(r, c)]),
        "reshape": (lambda a: ad.reshape(a, (c, r)), [g(r, c)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=-1), [g(r, c), g(r, 2)]),
        "columns": (lambda a: ad.columns(a, 0, max(1, c // 2)), [g(r, c)]),
        "gaussian_log_prob": (ad.gaussian_log_prob, [g(r, c), g(r, c), 0.5 * g(r, c)]),
        "bernoulli_kl": (ad.bernoulli_kl, [2 * g(r, c), 2 * g(r, c)]),
    }
    return table[name]


OPS = (
    "add add_scalar sub mul div neg bias_add matmul exp log sigmoid softplus log_sigmoid tanh relu leaky_relu "
    "square abs clip logsumexp log_softmax softmax reduce_sum reduce_sum_axis0 reduce_sum_axis1 reduce_mean "
    "reduce_mean_axis0 reshape concat columns gaussian_log_prob bernoulli_kl"
).split()


def _scalar(fn, arrays, weight):
    out = fn(*[ad.Tensor(a) for a in arrays]).data
    return float(np.sum(out * weight))


def check(name, seed, h=1e-5):
    """Relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    fn, arrays = _case(rng, name)
    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    weight = rng.normal(size=out.shape)
    ad.backward(ad.reduce_sum(ad.mul(out, ad.Tensor(weight))))
    analytic = np.concatenate([np.ravel(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in ts])
    numeric = []
    for k, a in enumerate(arrays):
        for i in np.ndindex(a.shape):
            up = [x.copy() for x in arrays]
            dn = [x.copy() for x in arrays]
            up[k][i] += h
            dn[k][i] -= h
            numeric.append((_scalar(fn, up, weight) - _scalar(fn, dn, weight)) / (2 * h))
    numeric = np.array(numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(analytic - numeric) / scale)
