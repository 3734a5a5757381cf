"""A small reverse-mode automatic differentiation engine over float64 arrays.

Only two broadcasting forms are supported: a scalar operand, and a 1-D bias
whose length matches the last axis of the other operand.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

PROB_CLAMP = 1e-7
CHECKPOINT_FORMAT = "latentcert-params"
CHECKPOINT_VERSION = 1


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    for p in parents:
        if p._consumed:
            raise GraphError("input belongs to a graph already consumed by backward()")
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.sum(grad).reshape(shape)
    if len(shape) == 1 and grad.ndim >= 1 and grad.shape[-1] == shape[0]:
        return grad.reshape(-1, shape[0]).sum(axis=0)
    raise ValueError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _check_broadcast(a, b, op):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def bias_add(x, b):
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"bias_add: bias {b.shape} does not match {x.shape}")
    return add(x, b)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    return _node(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def log_sigmoid(a):
    a = as_tensor(a)
    return _node(-_softplus(-a.data), (a,), lambda g: (g * _sigmoid(-a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def stop_gradient(a):
    return Tensor(as_tensor(a).data.copy())


# ---------------------------------------------------------------------------
# row-wise and reduction ops
# ---------------------------------------------------------------------------


def logsumexp(a):
    """Log-sum-exp over the last axis (the axis is dropped)."""
    a = as_tensor(a)
    mx = a.data.max(axis=-1, keepdims=True)
    sh = np.exp(a.data - mx)
    tot = sh.sum(axis=-1, keepdims=True)
    out = (np.log(tot) + mx)[..., 0]

    def backward(g):
        return (g[..., None] * sh / tot,)

    return _node(out, (a,), backward)


def log_softmax(a):
    a = as_tensor(a)
    mx = a.data.max(axis=-1, keepdims=True)
    z = a.data - mx
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), backward)


def softmax(a):
    a = as_tensor(a)
    z = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward)


def reduce_sum(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), backward)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), backward)


def columns(a, start, stop):
    """Slice ``a[:, start:stop]`` of a 2-D tensor."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), backward)


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def gaussian_log_prob(x, mean, log_scale):
    """Diagonal normal log density, summed over the last axis."""
    x, mean, log_scale = as_tensor(x), as_tensor(mean), as_tensor(log_scale)
    z = (x.data - mean.data) * np.exp(-log_scale.data)
    out = (-0.5 * z * z - log_scale.data - _HALF_LOG_2PI).sum(axis=-1)
    inv = np.exp(-log_scale.data)

    def backward(g):
        g = g[..., None]
        gx = -g * z * inv
        return gx, -gx, g * (z * z - 1.0)

    return _node(out, (x, mean, log_scale), backward)


def bernoulli_kl(p_logits, q_logits):
    """Elementwise KL(Bernoulli(sigmoid(p)) || Bernoulli(sigmoid(q)))."""
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    p_raw = _sigmoid(p_logits.data)
    q_raw = _sigmoid(q_logits.data)
    p = np.clip(p_raw, lo, hi)
    q = np.clip(q_raw, lo, hi)
    lp, l1p = np.log(p), np.log1p(-p)
    lq, l1q = np.log(q), np.log1p(-q)
    out = p * (lp - lq) + (1.0 - p) * (l1p - l1q)
    p_in = (p_raw >= lo) & (p_raw <= hi)
    q_in = (q_raw >= lo) & (q_raw <= hi)

    def backward(g):
        dp = (lp - lq) - (l1p - l1q)
        dq = -p / q + (1.0 - p) / (1.0 - q)
        gp = g * dp * p_raw * (1.0 - p_raw) * p_in
        gq = g * dq * q_raw * (1.0 - q_raw) * q_in
        return gp, gq

    return _node(out, (p_logits, q_logits), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a dict mapping each leaf tensor to its gradient. The graph is
    released afterwards; a second call on the same loss raises GraphError.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; run the forward pass again")
    order = _topological(loss)
    if any(node._consumed for node in order):
        raise GraphError("graph already consumed by backward()")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True
    return leaves


# ---------------------------------------------------------------------------
# optimizer and checkpoints
# ---------------------------------------------------------------------------


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction.

    ``state`` is a dict holding ``t`` and per-parameter first/second moments;
    it is created on first use.
    """
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


def save_arrays(path, arrays, meta=None):
    """Write named arrays as versioned JSON (floats round-trip exactly)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in sorted(arrays.items())
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_arrays(path):
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["arrays"].items()
    }
    return arrays, payload.get("meta", {})
