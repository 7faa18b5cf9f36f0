"""Dense tensors with reverse-mode automatic differentiation.

Minimal tape-based engine: every op records its parents and a backward rule on
the produced tensor; `backward` replays the rules in reverse topological
order.  Data lives in contiguous numpy arrays (float32 for training, float64
for correctness tests) and all reductions use numpy's fixed evaluation order,
so results are deterministic for identical inputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "gelu",
    "abs_",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "take_rows",
    "slice_cols",
    "reshape",
    "transpose",
    "sum_",
    "mean_",
    "dropout",
    "backward",
    "grad_check",
    "neg_inf",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data, dtype=float)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data))


def neg_inf(dtype) -> float:
    """Additive-mask fill: true -inf in double, a large negative in single."""
    return -np.inf if np.dtype(dtype) == np.float64 else -1e30


def _track(*xs: Tensor) -> bool:
    return any(x.requires_grad for x in xs)


def _accum(x: Tensor, g: np.ndarray) -> None:
    if not x.requires_grad:
        return
    if x.grad is None:
        x.grad = np.zeros_like(x.data)
    x.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _track(a, b), (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, _track(a, b), (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _track(a, b), (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, -g)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, g * c)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked 3-d operands with matching batch dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"shape mismatch in matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, _track(a, b), (a, b))

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, g * y)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, g / a.data)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, g * np.sign(a.data))
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU: exact erf form in double, tanh approximation in single."""
    x = a.data
    if x.dtype == np.float64:
        phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
        out = Tensor(x * phi, a.requires_grad, (a,))

        def bw(g):
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            _accum(a, g * (phi + x * pdf))

    else:
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = Tensor(0.5 * x * (1.0 + t), a.requires_grad, (a,))

        def bw(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    out._backward = bw
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.requires_grad, (a,))

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    out._backward = bw
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse, a.requires_grad, (a,))

    def bw(g):
        p = np.exp(out.data)
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    out._backward = bw
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, _track(a, gain, bias), (a, gain, bias))

    def bw(g):
        n = x.shape[-1]
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accum(a, dx)

    out._backward = bw
    return out


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding index out of range: [{ids.min()}, {ids.max()}] vs table {table.data.shape[0]}"
        )
    out = Tensor(table.data[ids], table.requires_grad, (table,))

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    out._backward = bw
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], a.requires_grad, (a,))

    def bw(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    out._backward = bw
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[..., start:stop], a.requires_grad, (a,))

    def bw(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accum(a, full)

    out._backward = bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes), a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, np.transpose(g, inv))
    return out


def sum_(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), a.requires_grad, (a,))

    def bw(g):
        if axis is None:
            _accum(a, np.full_like(a.data, 1.0) * g)
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    out._backward = bw
    return out


def mean_(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return a
    mask = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    out = Tensor(a.data * mask, a.requires_grad, (a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out


def _topo(root: Tensor) -> list[Tensor]:
    """Reverse-topological tape: every reachable node exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5, max_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    Samples up to `max_coords` coordinates across all parameters; params must
    be float64 for the differences to resolve.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise ValueError("non-finite loss in grad_check")
    backward(loss)

    coords = []
    for name, p in params.items():
        if not p.requires_grad:
            continue
        for flat in range(p.data.size):
            coords.append((name, flat))
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, flat in coords:
        p = params[name]
        analytic = 0.0 if p.grad is None else float(p.grad.flat[flat])
        orig = float(p.data.flat[flat])
        p.data.flat[flat] = orig + eps
        hi = float(f().data)
        p.data.flat[flat] = orig - eps
        lo = float(f().data)
        p.data.flat[flat] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst
