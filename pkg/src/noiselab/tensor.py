"""Dense float64 tensors with reverse-mode automatic differentiation.

Each operation links its output to its inputs through a backward closure, so
the "tape" is the graph hanging off the loss value rather than any global
state. ``backward(loss)`` walks that graph once, accumulates gradients into
``requires_grad`` leaves, and then severs the links so buffers can be freed.

Shapes follow the conventions the networks need: dense inputs are
``(batch, features)``, convolutional inputs are ``(batch, channels, length)``
or ``(batch, channels, height, width)``. Broadcasting beyond those cases is
intentionally not supported.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = (
            np.zeros_like(self.data) if requires_grad else None
        )
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (scalar-friendly) -------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use scale()")
        return scale(self, 1.0 / float(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = False  # grads only live on leaves
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be scalar. Gradients accumulate (+=) into existing leaf
    buffers; the graph is cleared afterwards, so each forward pass supports
    exactly one backward pass.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    # Topological order via iterative DFS.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # Sever the graph: one backward per forward.
    for node in order:
        node._parents = ()
        node._backward = None


# =============================================================================
# Elementwise and scalar ops
# =============================================================================


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    data = a.data + b.data

    def bwd(g):
        ga = g if a.shape == data.shape else np.array(g.sum())
        gb = g if b.shape == data.shape else np.array(g.sum())
        return ((a, ga), (b, gb))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    data = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != data.shape:
            ga = np.array(ga.sum())
        if b.shape != data.shape:
            gb = np.array(gb.sum())
        return ((a, ga), (b, gb))

    return _make(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: ((a, g * s),))


def silu(a: Tensor) -> Tensor:
    # clip keeps exp finite for very negative inputs (sigmoid underflows to 0)
    sig = 1.0 / (1.0 + np.exp(np.clip(-a.data, None, 700.0)))
    data = a.data * sig

    def bwd(g):
        return ((a, g * (sig * (1.0 + a.data * (1.0 - sig)))),)

    return _make(data, (a,), bwd)


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: ((a, g * np.cos(a.data)),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: ((a, -g * np.sin(a.data)),))


def sum_all(a: Tensor) -> Tensor:
    data = np.array(a.data.sum())
    return _make(data, (a,), lambda g: ((a, np.broadcast_to(g, a.shape).copy()),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    data = np.array(a.data.mean())
    return _make(data, (a,), lambda g: ((a, np.broadcast_to(g / n, a.shape).copy()),))


# =============================================================================
# Shape ops
# =============================================================================


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return _make(data, (a,), lambda g: ((a, g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return tuple(pieces)

    return _make(data, tuple(tensors), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _make(data, (a,), bwd)


def take_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add gradient (embeddings)."""
    indices = np.asarray(indices, dtype=np.int64)
    data = table.data[indices]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return ((table, gt),)

    return _make(data, (table,), bwd)


# =============================================================================
# Linear algebra
# =============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} are incompatible")
    data = a.data @ b.data

    def bwd(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(data, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (N, i, k) @ (N, k, j) -> (N, i, j)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: shapes {a.shape} @ {b.shape} are incompatible")
    data = a.data @ b.data

    def bwd(g):
        return ((a, g @ b.data.transpose(0, 2, 1)), (b, a.data.transpose(0, 2, 1) @ g))

    return _make(data, (a, b), bwd)


# =============================================================================
# Convolutions (im2col + BLAS)
# =============================================================================


def _conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out <= 0:
        raise ShapeError(f"conv: kernel {k} with pad {pad} exceeds input extent {n}")
    return out


# Backward recomputes im2col unless the cached patch matrix is small.
_IM2COL_CACHE_BYTES = 64 * 2**20


def _im2col2d(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Channels-last patch matrix (N*Ho*Wo, kh*kw*C).

    The input is repacked to channels-last once (sequential copy), so the
    patch gather moves contiguous C-sized chunks instead of single elements.
    """
    n, c, h, w = x.shape
    ho = _conv_out_len(h, kh, stride, pad)
    wo = _conv_out_len(w, kw, stride, pad)
    if pad:
        xl = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        xl[:, pad : pad + h, pad : pad + w, :] = x.transpose(0, 2, 3, 1)
    else:
        xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    sn, sh, sw, sc = xl.strides
    view = np.lib.stride_tricks.as_strided(
        xl,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    mat = view.reshape(n * ho * wo, kh * kw * c)
    return mat, ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation: x (N,C,H,W) with kernels w (O,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D inputs, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but kernel expects {w.shape[1]}"
        )
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    w_l = w.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)  # match mat layout
    mat, ho, wo = _im2col2d(x.data, kh, kw, stride, padding)
    data = np.ascontiguousarray(
        (mat @ w_l.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    )
    saved_mat = mat if mat.nbytes <= _IM2COL_CACHE_BYTES else None

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = None
        if w.requires_grad or w._backward is not None:
            mat2 = saved_mat
            if mat2 is None:
                mat2, _, _ = _im2col2d(x.data, kh, kw, stride, padding)
            gw = (gmat.T @ mat2).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad or x._backward is not None:
            gcols = (gmat @ w_l).reshape(n, ho, wo, kh, kw, c)
            hp, wp = h + 2 * padding, wd + 2 * padding
            gxl = np.zeros((n, hp, wp, c))
            for i in range(kh):
                for j in range(kw):
                    gxl[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                        gcols[:, :, :, i, j, :]
                    )
            if padding:
                gxl = gxl[:, padding : hp - padding, padding : wp - padding, :]
            gx = np.ascontiguousarray(gxl.transpose(0, 3, 1, 2))
        return ((x, gx), (w, gw))

    return _make(data, (x, w), bwd)


def _im2col1d(x: np.ndarray, k: int, stride: int, pad: int):
    """Channels-last patch matrix (N*Lo, k*C)."""
    n, c, l = x.shape
    lo = _conv_out_len(l, k, stride, pad)
    if pad:
        xl = np.zeros((n, l + 2 * pad, c))
        xl[:, pad : pad + l, :] = x.transpose(0, 2, 1)
    else:
        xl = np.ascontiguousarray(x.transpose(0, 2, 1))
    sn, sl, sc = xl.strides
    view = np.lib.stride_tricks.as_strided(
        xl,
        shape=(n, lo, k, c),
        strides=(sn, sl * stride, sl, sc),
        writeable=False,
    )
    return view.reshape(n * lo, k * c), lo


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation: x (N,C,L) with kernels w (O,C,k)."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected 3D inputs, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv1d: input has {x.shape[1]} channels but kernel expects {w.shape[1]}"
        )
    n, c, l = x.shape
    o, _, k = w.shape
    w_l = w.data.transpose(0, 2, 1).reshape(o, k * c)
    mat, lo = _im2col1d(x.data, k, stride, padding)
    data = np.ascontiguousarray(
        (mat @ w_l.T).reshape(n, lo, o).transpose(0, 2, 1)
    )
    saved_mat = mat if mat.nbytes <= _IM2COL_CACHE_BYTES else None

    def bwd(g):
        gmat = g.transpose(0, 2, 1).reshape(n * lo, o)
        gw = None
        if w.requires_grad or w._backward is not None:
            mat2 = saved_mat
            if mat2 is None:
                mat2, _ = _im2col1d(x.data, k, stride, padding)
            gw = (gmat.T @ mat2).reshape(o, k, c).transpose(0, 2, 1)
        gx = None
        if x.requires_grad or x._backward is not None:
            gcols = (gmat @ w_l).reshape(n, lo, k, c)
            lp = l + 2 * padding
            gxl = np.zeros((n, lp, c))
            for i in range(k):
                gxl[:, i : i + stride * lo : stride, :] += gcols[:, :, i, :]
            if padding:
                gxl = gxl[:, padding : lp - padding, :]
            gx = np.ascontiguousarray(gxl.transpose(0, 2, 1))
        return ((x, gx), (w, gw))

    return _make(data, (x, w), bwd)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    data = np.pad(a.data, widths)

    def bwd(g):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(before, before + a.shape[axis])
        return ((a, g[tuple(idx)]),)

    return _make(data, (a,), bwd)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to (N,C,...) or (N,F) activations."""
    if b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias: channel dim {x.shape} vs bias {b.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    data = x.data + b.data.reshape(bshape)

    def bwd(g):
        axes = (0,) + tuple(range(2, x.ndim))
        return ((x, g), (b, g.sum(axis=axes)))

    return _make(data, (x, b), bwd)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the spatial axes of (N,C,...) input."""
    if x.ndim == 4:
        data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

        def bwd(g):
            n, c, h2, w2 = g.shape
            gr = g.reshape(n, c, h2 // factor, factor, w2 // factor, factor)
            return ((x, gr.sum(axis=(3, 5))),)

    elif x.ndim == 3:
        data = x.data.repeat(factor, axis=2)

        def bwd(g):
            n, c, l2 = g.shape
            return ((x, g.reshape(n, c, l2 // factor, factor).sum(axis=3)),)

    else:
        raise ShapeError(f"upsample: expected 3D or 4D input, got {x.shape}")
    return _make(data, (x,), bwd)


# =============================================================================
# Normalization, attention, conditioning
# =============================================================================


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis (axis 1) at every location.

    Batch-free: statistics are per sample and per spatial position.
    """
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: params {gamma.shape}/{beta.shape} vs {x.shape[1]} channels"
        )
    c = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gshape = (1, c) + (1,) * (x.ndim - 2)
    data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def bwd(g):
        sum_axes = (0,) + tuple(range(2, x.ndim))
        dgamma = (g * xhat).sum(axis=sum_axes)
        dbeta = g.sum(axis=sum_axes)
        dxhat = g * gamma.data.reshape(gshape)
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return ((x, dx), (gamma, dgamma), (beta, dbeta))

    return _make(data, (x, gamma, beta), bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over its spatial axes (batch-free).

    Unlike ``layer_norm`` this keeps per-position structure and, paired with
    timestep FiLM, lets a network reconstruct absolute input scale from the
    conditioning.
    """
    if x.ndim < 3:
        raise ShapeError(f"instance_norm: need (N, C, spatial...), got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"instance_norm: params {gamma.shape}/{beta.shape} vs {x.shape[1]} channels"
        )
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0,) + axes)
        dbeta = g.sum(axis=(0,) + axes)
        dxhat = g * gamma.data.reshape(gshape)
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return ((x, dx), (gamma, dgamma), (beta, dbeta))

    return _make(data, (x, gamma, beta), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((x, y * (g - dot)),)

    return _make(y, (x,), bwd)


def channel_scale(x: Tensor, scl: Tensor) -> Tensor:
    """Per-channel multiplicative gate: ``x * scl`` with scl (N, C)."""
    n, c = x.shape[0], x.shape[1]
    if scl.shape != (n, c):
        raise ShapeError(f"channel_scale: gate {scl.shape} vs input {x.shape}")
    cshape = (n, c) + (1,) * (x.ndim - 2)
    s = scl.data.reshape(cshape)
    data = x.data * s

    def bwd(g):
        axes = tuple(range(2, x.ndim))
        ds = (g * x.data).sum(axis=axes) if axes else g * x.data
        return ((x, g * s), (scl, ds))

    return _make(data, (x, scl), bwd)


def channel_affine(x: Tensor, scl: Tensor, shift: Tensor) -> Tensor:
    """FiLM-style modulation: ``x * (1 + scl) + shift`` per channel.

    ``scl`` and ``shift`` are (N, C), broadcast over the spatial axes of
    x (N, C, ...).
    """
    n, c = x.shape[0], x.shape[1]
    if scl.shape != (n, c) or shift.shape != (n, c):
        raise ShapeError(
            f"channel_affine: conditioning {scl.shape}/{shift.shape} vs input {x.shape}"
        )
    cshape = (n, c) + (1,) * (x.ndim - 2)
    s = scl.data.reshape(cshape)
    data = x.data * (1.0 + s) + shift.data.reshape(cshape)

    def bwd(g):
        axes = tuple(range(2, x.ndim))
        ds = (g * x.data).sum(axis=axes) if axes else g * x.data
        dr = g.sum(axis=axes) if axes else g
        return ((x, g * (1.0 + s)), (scl, ds), (shift, dr))

    return _make(data, (x, scl, shift), bwd)


# =============================================================================
# Losses
# =============================================================================


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.array((diff * diff).mean())
    n = diff.size

    def bwd(g):
        gd = (2.0 / n) * diff * g
        return ((pred, gd), (target, -gd))

    return _make(data, (pred, target), bwd)


def l1_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.array(np.abs(diff).mean())
    n = diff.size

    def bwd(g):
        gd = np.sign(diff) / n * g
        return ((pred, gd), (target, -gd))

    return _make(data, (pred, target), bwd)


# =============================================================================
# Op-kind dispatch (the registered-op surface, mostly for tests/tools)
# =============================================================================

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "conv1d": conv1d,
    "conv2d": conv2d,
    "transpose_conv2d_or_upsample": upsample_nearest,
    "add": add,
    "mul": mul,
    "concat_channels": lambda *ts, axis=1: concat(ts, axis=axis),
    "silu": silu,
    "layer_norm": layer_norm,
    "mse_loss": mse_loss,
    "l1_loss": l1_loss,
}


def tensor_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the registered differentiable ops by name."""
    if kind not in OPS:
        raise KeyError(f"unknown tensor op {kind!r}; known: {sorted(OPS)}")
    return OPS[kind](*inputs, **kwargs)
