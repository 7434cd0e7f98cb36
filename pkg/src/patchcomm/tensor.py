"""Reverse-mode automatic differentiation on numpy arrays.

Tensors wrap an ndarray and record the operations that produced them. Calling
``backward()`` on a scalar result accumulates gradients into every reachable
tensor that has ``requires_grad`` set. float64 is the default dtype (all
verification runs in 64-bit); float32 is accepted for training speed.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

# When True, every op rejects non-finite inputs. Slow; meant for debugging.
DEBUG_CHECKS = False

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


def _check_finite(*arrays):
    if DEBUG_CHECKS:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("non-finite input to op")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._backward: Callable | None = None

    # -- graph plumbing -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor.

        self must be a scalar (size-1) tensor. Repeated calls accumulate.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.data.shape}")
        # Post-order topological sort, iterative to survive deep graphs.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        # Adjoints are kept per-call so repeated backward() calls do not
        # double-count through intermediate nodes.
        adj: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.reshape(node.data.shape)
            if node._backward is None:
                continue
            for p, pg in zip(node._prev, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other, self.dtype))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other, self.dtype), power(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _lift(x, dtype=np.float64) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, prev: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = tuple(prev)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g (shape of broadcast result) back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a.dtype)
    _check_finite(a.data, b.data)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    _check_finite(a.data, b.data)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = _lift(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _node(out, (a,), bw)


def exp(a) -> Tensor:
    a = _lift(a)
    _check_finite(a.data)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw)


def log(a) -> Tensor:
    a = _lift(a)
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _node(out, (a,), bw)


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0)
    mask = a.data > 0  # subgradient at 0 is 0

    def bw(g):
        return (g * mask,)

    return _node(out, (a,), bw)


def gelu(a) -> Tensor:
    a = _lift(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed only where the clamp is inactive."""
    a = _lift(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def bw(g):
        return (g * mask,)

    return _node(out, (a,), bw)


# -- reductions / shape -----------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(out, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return _node(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bw)


def take(a, idx) -> Tensor:
    """Indexing/gather; supports basic slices and integer index arrays."""
    a = _lift(a)
    out = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(np.ascontiguousarray(out), (a,), bw)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _check_finite(a.data, b.data)
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    _check_finite(a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    _check_finite(a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw)


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine."""
    a = _lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = gain.data * xhat + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        return dx, dgain, dbias

    return _node(out, (a, gain, bias), bw)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = _lift(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / denom,)

    return _node(out, (a,), bw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input, OIkk weights, zero padding."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, CI, kh, kw = w.shape
    if CI != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    s, p = stride, padding
    OH = (H + 2 * p - kh) // s + 1
    OW = (W + 2 * p - kw) // s + 1
    if OH <= 0 or OW <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}, stride {s}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # im2col so the contraction runs through BLAS
    cols = np.empty((B, C, kh, kw, OH, OW), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + s * OH:s, kj:kj + s * OW:s]
    col_mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * OH * OW, C * kh * kw)
    w_mat = w.data.reshape(O, C * kh * kw)
    out = (col_mat @ w_mat.T).reshape(B, OH, OW, O).transpose(0, 3, 1, 2)
    prev = [x, w]
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)
        prev.append(b)
    out = np.ascontiguousarray(out)

    def bw(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * OH * OW, O)
        gw = (g_mat.T @ col_mat).reshape(w.data.shape)
        gcols = (g_mat @ w_mat).reshape(B, OH, OW, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki:ki + s * OH:s, kj:kj + s * OW:s] += gcols[:, :, ki, kj]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, tuple(prev), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward emits `hard`; backward is the gradient of `soft`."""
    soft = _lift(soft)
    out = np.asarray(hard, dtype=soft.dtype)
    if out.shape != soft.data.shape:
        raise ShapeError(f"straight_through shapes differ: {out.shape} vs {soft.data.shape}")

    def bw(g):
        return (g,)

    return _node(out, (soft,), bw)


# -- verification -----------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error metric per coordinate: |a - n| / max(1, |a|, |n|). f must be
    deterministic (freeze any noise before calling).
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - step
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- optimizer and schedules -------------------------------------------------

class SGDMomentum:
    """SGD with momentum: v <- mu*v + g + wd*p;  p <- p - lr*v."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.buffers[k]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= (lr * v).astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(epoch: int, total_epochs: int, base_lr: float, warmup_epochs: int) -> float:
    """Linear warmup to base_lr, then half-cosine decay to 0 at total_epochs."""
    if warmup_epochs >= total_epochs:
        raise ValueError(f"warmup_epochs ({warmup_epochs}) must be < total_epochs ({total_epochs})")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    t = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * (1.0 + math.cos(math.pi * t)) / 2.0
