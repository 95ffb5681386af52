"""Reverse-mode automatic differentiation over float64 numpy arrays.

The graph is recorded eagerly: every operation on a :class:`Tensor` that
requires gradients returns a new tensor holding its parents and a closure
mapping the output gradient to parent gradients.  :func:`backward` walks the
graph in reverse topological order and accumulates into the ``grad`` field of
every leaf tensor (normally a :class:`Param`).

Convolutions use cross-correlation semantics (no kernel flip) with zero
padding.  Image-like operators accept ``[N, C, H, W]`` batches; a
``[C, H, W]`` input is treated as a batch of one and returned without the
batch axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with an optional place in the autodiff graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class Param(Tensor):
    """Named trainable leaf.  ``grad`` always has the value's shape."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Raises:
        ValueError: if ``loss`` is not a recorded scalar tensor.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise ValueError("backward() needs a tensor produced by recorded operations")
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def log2(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log2(a.data), (a,), lambda g: (g / (a.data * np.log(2.0)),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * special.expit(a.data),))


def activation(x, kind: str) -> Tensor:
    """Elementwise ``relu`` or ``sigmoid``."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient flows only where the input is inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,))


def lower_bound(a, bound: float) -> Tensor:
    """``max(a, bound)`` whose gradient still pushes values up from the floor."""
    a = as_tensor(a)
    out = np.maximum(a.data, bound)
    return _make(out, (a,), lambda g: (g * ((a.data >= bound) | (g < 0)),))


def ndtr(a) -> Tensor:
    """Standard normal CDF."""
    a = as_tensor(a)
    return _make(
        special.ndtr(a.data),
        (a,),
        lambda g: (g * np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi),),
    )


def round_ste(a) -> Tensor:
    """Round half away from zero; identity gradient (straight-through)."""
    a = as_tensor(a)
    out = np.sign(a.data) * np.floor(np.abs(a.data) + 0.5)
    return _make(out, (a,), lambda g: (g,))


# ---------------------------------------------------------------- structural


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- spatial


def _batched(fn):
    """Let a 4-d image operator accept a single ``[C, H, W]`` input."""

    def wrapper(x, *args, **kwargs):
        x = as_tensor(x)
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ValueError(f"{fn.__name__} expects [C,H,W] or [N,C,H,W], got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter_windows(cols: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: cols ``[C, kh, kw, N, Ho, Wo]`` summed into place."""
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros((c, n) + tuple(padded_shape[2:]), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_kernel(w: Tensor, cin: int, x_shape, what: str) -> None:
    if w.ndim != 4:
        raise ValueError(f"{what}: kernel must be 4-d, got {w.shape}")
    if w.shape[1 if what == "conv2d" else 0] != cin:
        raise ValueError(f"{what}: input shape {tuple(x_shape)} does not match kernel shape {w.shape}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ValueError(f"{what}: kernel spatial dims must be odd, got {w.shape}")


@_batched
def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation.  ``w`` is ``[Cout, Cin, kh, kw]``.

    Output spatial size is ``floor((H + 2*pad - kh) / stride) + 1``.
    """
    w = as_tensor(w)
    _check_kernel(w, x.shape[1], x.shape, "conv2d")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            cols = np.tensordot(w.data, g, axes=([0], [1]))
            gxp = _scatter_windows(cols, xp.shape, stride)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd]
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, bw)


@_batched
def conv2d_transpose(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    ``w`` is ``[Cin, Cout, kh, kw]`` (the kernel of the forward convolution
    mapping ``Cout -> Cin``).  The output is ``stride`` times the input size;
    the implicit output padding is whatever makes ``conv2d`` with the same
    kernel, stride and pad map that size back to the input size.
    """
    w = as_tensor(w)
    _check_kernel(w, x.shape[1], x.shape, "conv2d_transpose")
    if stride not in (1, 2):
        raise ValueError(f"conv2d_transpose: stride must be 1 or 2, got {stride}")
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    oh, ow = stride * h, stride * wd
    if _conv_out(oh, kh, stride, pad) != h or _conv_out(ow, kw, stride, pad) != wd:
        raise ValueError(f"conv2d_transpose: pad={pad} cannot map {h}x{wd} to {oh}x{ow} with kernel {kh}x{kw}")
    padded = (n, cout, oh + 2 * pad, ow + 2 * pad)
    cols = np.tensordot(w.data, x.data, axes=([0], [1]))
    out = _scatter_windows(cols, padded, stride)[:, :, pad : pad + oh, pad : pad + ow]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = _windows(gp, kh, kw, stride, h, wd)
        gx = gw = None
        if x.requires_grad:
            gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, bw)


MASK_VARIANTS = ("full_causal", "no_left", "channel_only")


def causal_taps(shape: Sequence[int], variant: str) -> list[tuple[int, int, int, int]]:
    """Active taps of a masked 3-d kernel in raster order.

    Returns ``(flat_index, dc, di, dj)`` tuples where the offsets are relative
    to the kernel centre and raster order is channel, then row, then column.
    """
    if variant not in MASK_VARIANTS:
        raise ValueError(f"unknown mask variant {variant!r}")
    kc, kh, kw = shape
    if kc % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"masked kernel dims must be odd, got {tuple(shape)}")
    rc, rh, rw = kc // 2, kh // 2, kw // 2
    taps = []
    for flat, (dc, di, dj) in enumerate(np.ndindex(kc, kh, kw)):
        dc, di, dj = dc - rc, di - rh, dj - rw
        if variant == "channel_only":
            keep = dc < 0
        else:
            keep = (dc, di, dj) < (0, 0, 0)
            if variant == "no_left" and dc == 0 and di == 0:
                keep = False
        if keep:
            taps.append((flat, dc, di, dj))
    return taps


def causal_mask(shape: Sequence[int], variant: str) -> np.ndarray:
    mask = np.zeros(int(np.prod(shape)), dtype=bool)
    for flat, *_ in causal_taps(shape, variant):
        mask[flat] = True
    return mask.reshape(tuple(shape))


@_batched
def masked_conv3d(x, k, bias, variant: str) -> Tensor:
    """Causal 3-d convolution treating ``[C, H, W]`` as one volume.

    A single ``[kc, kh, kw]`` kernel and scalar bias are shared by every
    channel; masked taps are ignored (and receive zero gradient).  The volume
    is zero padded in all three dimensions.
    """
    k, bias = as_tensor(k), as_tensor(bias)
    taps = causal_taps(k.shape, variant)
    n, c, h, w = x.shape
    kc, kh, kw = k.shape
    rc, rh, rw = kc // 2, kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (rc, rc), (rh, rh), (rw, rw)))
    kflat = k.data.reshape(-1)

    def view(arr, dc, di, dj):
        return arr[:, rc + dc : rc + dc + c, rh + di : rh + di + h, rw + dj : rw + dj + w]

    out = np.zeros((n, c, h, w), dtype=DTYPE)
    for flat, dc, di, dj in taps:
        out += kflat[flat] * view(xp, dc, di, dj)
    out += bias.data.reshape(())

    def bw(g):
        gk = np.zeros(kc * kh * kw, dtype=DTYPE)
        gxp = np.zeros_like(xp)
        for flat, dc, di, dj in taps:
            gk[flat] = np.sum(g * view(xp, dc, di, dj))
            view(gxp, dc, di, dj)[...] += kflat[flat] * g
        gx = gxp[:, rc : rc + c, rh : rh + h, rw : rw + w]
        return gx, gk.reshape(k.shape), np.asarray(g.sum()).reshape(bias.shape)

    return _make(out, (x, k, bias), bw)


@_batched
def maxpool2d(x, s: int) -> Tensor:
    """Max over ``s x s`` windows; edge windows are truncated (ceil mode)."""
    if s < 1:
        raise ValueError(f"maxpool2d: factor must be >= 1, got {s}")
    if s == 1:
        return x * 1.0
    n, c, h, w = x.shape
    ho, wo = -(-h // s), -(-w // s)
    xp = np.full((n, c, ho * s, wo * s), -np.inf)
    xp[:, :, :h, :w] = x.data
    blocks = xp.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gp = gb.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        return (gp[:, :, :h, :w],)

    return _make(out, (x,), bw)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()
