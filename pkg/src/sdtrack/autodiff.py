"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the operations the tracker needs are provided: elementwise arithmetic
with the broadcasting patterns used by the layers, batched matmul, grouped
2-D convolution, batch norm, reductions, indexing/concatenation and a
custom-gradient hook for spiking nonlinearities.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None and isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
        return np.asarray(data)  # 0-d results arrive as numpy scalars
    return np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Dense array with an optional gradient and a link to the op that made it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers
    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], grad_fn) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf
        that requires grad. ``self`` must be a scalar unless ``grad`` is given."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_lift(other, self))

    def __rsub__(self, other):
        return add(_lift(other, self), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    # -- shape / reductions as methods
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return abs_(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


class Parameter(Tensor):
    """Trainable (or frozen) named tensor owned by a module."""

    def __init__(self, data, name: str | None = None, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, name=name, dtype=dtype)
        self.trainable = trainable


def _lift(x, like: Tensor | None = None) -> Tensor:
    """Constants join the graph without gradient. Float arrays keep their
    dtype; scalars take the dtype of ``like`` (else the default dtype)."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.ndim and x.dtype.kind == "f":
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else _DEFAULT_DTYPE))


def _lift_pair(a, b) -> tuple[Tensor, Tensor]:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    return a, _lift(b, a)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    out = a.data + b.data
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _lift_pair(a, b)
    out = a.data * b.data
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                                _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    return Tensor._make(out, (a,), lambda g: (g * g.dtype.type(c),))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return Tensor._make(out, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    return Tensor._make(out, (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return Tensor._make(out, (a,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g * take_a, a.shape),
                                                _unbroadcast(g * ~take_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g * take_a, a.shape),
                                                _unbroadcast(g * ~take_a, b.shape)))


def custom_unary(a: Tensor, value: np.ndarray, local_grad: np.ndarray) -> Tensor:
    """Output ``value`` with backward ``g * local_grad`` (surrogate gradients)."""
    return Tensor._make(value, (a,), lambda g: (g * local_grad,))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return Tensor._make(out, (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._make(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad(a: Tensor, pad_width) -> Tensor:
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return Tensor._make(out, (a,), lambda g: (g[sl],))


# -- reductions ------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.max(axis=axis, keepdims=True)
    mask = a.data == out
    count = mask.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None:
            g = np.reshape(g, (1,) * a.ndim)
        return (mask * (g / count),)

    res = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis=axis))
    return Tensor._make(res, (a,), grad_fn)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight`` over the last axis with weight of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data).reshape(lead + (weight.shape[1],))
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, grad_fn)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation on NCHW input with OIHW weights (I = C / groups)."""
    N, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups or Cg != C // groups:
        raise ValueError(f"conv2d: input channels {C}, weight {weight.shape}, groups {groups} incompatible")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data

    def tap(i, j):
        return (slice(None), slice(None), slice(i, i + s * (Ho - 1) + 1, s), slice(j, j + s * (Wo - 1) + 1, s))

    depthwise = groups == C and O == C and Cg == 1
    if depthwise:
        out = np.zeros((N, O, Ho, Wo), dtype=np.result_type(xp, wd))
        for i in range(kh):
            for j in range(kw):
                out += xp[tap(i, j)] * wd[None, :, 0, i, j, None, None]
    elif groups == 1:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        Og = O // groups
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        win = win.reshape(N, groups, Cg, Ho, Wo, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", win, wd.reshape(groups, Og, Cg, kh, kw),
                        optimize=True).reshape(N, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    sl = tap(i, j)
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                    gxp[sl] += g * wd[None, :, 0, i, j, None, None]
        elif groups == 1:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gcol = np.tensordot(g, wd, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += gcol[..., i, j].transpose(0, 3, 1, 2)
        else:
            Og = O // groups
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
            win = win.reshape(N, groups, Cg, Ho, Wo, kh, kw)
            gg = g.reshape(N, groups, Og, Ho, Wo)
            wg = wd.reshape(groups, Og, Cg, kh, kw)
            gw = np.einsum("ngohw,ngchwij->gocij", gg, win, optimize=True).reshape(wd.shape)
            gcol = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(N, C, Ho, Wo, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += gcol[..., i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, grad_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Per-channel normalization along ``axis``; train mode uses batch
    statistics and updates the running buffers in place."""
    axis = axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        m = x.data.size // x.shape[axis]
        mu = x.data.mean(axis=red, keepdims=True)
        var = x.data.var(axis=red, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (m / max(m - 1, 1))
    else:
        mu = running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.reshape(bshape).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = g_ * xhat + b_

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * g_
        if training:
            m = x.data.size // x.shape[axis]
            dx = inv / m * (m * dxhat - dxhat.sum(axis=red, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=red, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn)


# -- finite differences ------------------------------------------------------

def numerical_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``t.data`` (perturbed in place)."""
    if not t.data.flags.c_contiguous or not t.data.flags.writeable:
        t.data = np.ascontiguousarray(t.data).copy()
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_error(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max |analytic - numeric| relative to the largest numeric magnitude,
    over all inputs."""
    for t in inputs:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        with no_grad():
            numeric = numerical_grad(f, t, eps)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / denom))
    return worst
