"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh node holding its numpy result and a closure that
pushes the output gradient back to its inputs.  Graphs are rebuilt on each
forward pass, which keeps recurrent unrolling trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_check_finite = True


class NumericError(ArithmeticError):
    """A forward result or loss contained NaN or Inf."""


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype.kind == "f" else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap two operands; a bare Python scalar takes the dtype of its tensor partner."""
    if isinstance(a, Tensor) and not isinstance(b, (Tensor, np.ndarray)):
        return a, as_tensor(b, a.data.dtype)
    if isinstance(b, Tensor) and not isinstance(a, (Tensor, np.ndarray)):
        return as_tensor(a, b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _check_finite and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    if any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _tracks(t):
        return
    if g.shape != t.data.shape:
        g = unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * out / b.data)

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accum(a, g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: _accum(a, g / a.data), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) even where it saturates."""
    a = as_tensor(a)
    x = a.data
    fi = np.finfo(x.dtype) if np.issubdtype(x.dtype, np.floating) else np.finfo(np.float64)
    out = np.clip(_sigmoid_np(x), fi.tiny, 1.0 - fi.epsneg)

    def bw(g):
        e = np.exp(-np.abs(x))
        _accum(a, g * e / (1.0 + e) ** 2)

    return _node(out, (a,), bw, "sigmoid")


def logsigmoid(a) -> Tensor:
    """log(sigmoid(x)) without cancellation for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: _accum(a, g * _sigmoid_np(-x)), "logsigmoid")


_INV_SQRT2 = 1.0 / sqrt(2.0)
_INV_SQRT2PI = 1.0 / sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), using erf (no tanh approximation)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (cdf + x * pdf))

    return _node(x * cdf, (a,), bw, "gelu")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        _accum(a, np.where(pick_a, g, 0.0))
        _accum(b, np.where(pick_a, 0.0, g))

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo) for a constant floor."""
    a = as_tensor(a)
    keep = a.data >= lo
    return _node(np.where(keep, a.data, lo), (a,), lambda g: _accum(a, np.where(keep, g, 0.0)), "clamp_min")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        if _tracks(a):
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if _tracks(b):
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _node(out, (a, b), bw, "matmul")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    basic = all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _node(a.data[idx], (a,), bw, "getitem")


def take(a, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    a = as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), index, np.moveaxis(g, axis, 0))
        _accum(a, full)

    return _node(np.take(a.data, index, axis=axis), (a,), bw, "take")


def unstack(a, axis: int = 0) -> list[Tensor]:
    """Split ``a`` into views along ``axis``.

    The pieces share one gradient buffer, so slicing a T-step sequence costs
    O(T) in the backward pass instead of O(T^2).
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    hub = _node(a.data, (a,), lambda g: _accum(a, g), "unstack")
    if hub._backward is None:
        return [Tensor(np.take(a.data, i, axis=axis)) for i in range(a.shape[axis])]

    def piece(i):
        idx = (slice(None),) * axis + (i,)

        def bw(g):
            if hub.grad is None:
                hub.grad = np.zeros_like(hub.data)
            hub.grad[idx] += g

        out = _node(a.data[idx], (hub,), bw, "unstack")
        return out

    return [piece(i) for i in range(a.shape[axis])]


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, cuts, axis=axis)):
            _accum(t, piece)

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]

    def bw(g):
        for i, t in enumerate(ts):
            _accum(t, np.take(g, i, axis=axis))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


# ---------------------------------------------------------------------------
# fused layers


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        _accum(gain, g * xhat)
        _accum(bias, g)
        if _tracks(x):
            gx = g * gain.data
            n = x.shape[-1]
            _accum(x, inv * (gx - gx.mean(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True) / n))

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


def causal_depthwise_conv(x, kernel, bias) -> Tensor:
    """Per-channel causal convolution along the time axis.

    x: (..., T, d); kernel: (..., K, d) broadcastable against x's leading
    axes; bias: (..., d).  Output step t sees inputs t-K+1 .. t only.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    K = kernel.shape[-2]
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(K - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.expand_dims(bias.data, -2) + sum(
        xp[..., k : k + T, :] * kernel.data[..., k : k + 1, :] for k in range(K)
    )

    def bw(g):
        _accum(bias, g.sum(axis=-2))
        if _tracks(kernel):
            gk = np.concatenate(
                [(g * xp[..., k : k + T, :]).sum(axis=-2, keepdims=True) for k in range(K)], axis=-2
            )
            _accum(kernel, gk)
        if _tracks(x):
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k : k + T, :] += g * kernel.data[..., k : k + 1, :]
            _accum(x, gxp[..., K - 1 :, :])

    return _node(out, (x, kernel, bias), bw, "causal_depthwise_conv")


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = softmax_np(a.data, axis)

    def bw(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), bw, "softmax")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of the gold class, max-shifted for stability."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in 0..{c - 1}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        _accum(logits, g * d / n)

    return _node(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# graph traversal


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every tensor that feeds ``loss``.

    Parameters listed in ``params`` start from zero, so ones the loss does
    not reach end up with an all-zero gradient rather than ``None``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if _check_finite and not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    for p in params:
        p.grad = np.zeros_like(p.data)
    order = topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are no longer needed
            node.grad = None if node is not loss else node.grad


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor)."""
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    tolerance: float
    per_param: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"grad-check {verdict}: max relative error {self.max_rel_error:.3e} "
            f"over {self.n_coords} coordinates (tolerance {self.tolerance:g})"
        )


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    each call.  Tensors with more than ``max_coords`` entries are checked on
    a seeded random subset of coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = loss_fn()
    backward(loss, params.values())
    analytic = {k: p.grad.copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    per_param, worst, total = {}, 0.0, 0
    for name, p in params.items():
        n = p.data.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        errs = []
        for i in coords:
            idx = np.unravel_index(i, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = float(loss_fn().data)
            p.data[idx] = orig - eps
            down = float(loss_fn().data)
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            errs.append(relative_error(float(analytic[name][idx]), numeric, floor))
        per_param[name] = max(errs) if errs else 0.0
        worst = max(worst, per_param[name])
        total += len(coords)
    return GradCheckReport(worst, total, tolerance, per_param)
