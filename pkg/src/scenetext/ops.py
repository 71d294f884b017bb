"""Differentiable operations over :class:`~scenetext.tensor.Tensor`.

Image tensors use the row-major ``H x W x C`` layout, optionally with a
leading batch axis (``N x H x W x C``).  Every function here accepts plain
arrays or scalars in place of tensors; those are treated as constants.
"""
from __future__ import annotations

import builtins
import numbers
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DimensionError, Tensor, as_tensor, record


class ConfigurationError(ValueError):
    """Layer hyper-parameters produce an invalid result."""


def _t(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and isinstance(x, numbers.Number):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return as_tensor(x)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (unbroadcast(g / b.data, a.shape),
                             unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _t(a)
    return record(-a.data, (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = _sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _t(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def cast(a, dtype) -> Tensor:
    a = _t(a)
    src = a.dtype
    return record(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "add": add,
    "mul": mul,
    "sub": sub,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record(out, (a,), back)


def max(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    if keepdims:
        out = out.reshape(kept_shape)

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(keep + list(axes))
        return (np.transpose(gmoved, inv),)

    return record(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = _t(a)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return record(np.array(out, copy=True) if _is_fancy(index) else out, (a,), back)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"cannot concatenate shapes {[t.shape for t in tensors]} along axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return record(out, tuple(tensors), back)


def pad(a, widths) -> Tensor:
    a = _t(a)
    out = np.pad(a.data, widths)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return record(out, (a,), lambda g: (g[slices],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` batching rules."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record(out, (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# softmax family and index selection
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    out = _log_softmax(a.data, axis)

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), back)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    # all -inf rows stay -inf rather than producing nan
    m = np.where(np.isfinite(m), m, 0.0)
    z = x - m
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def pick(a, index) -> Tensor:
    """Select ``a[..., index[...]]`` along the last axis."""
    a = _t(a)
    idx = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return record(out, (a,), back)


def take(table, index) -> Tensor:
    """Row lookup ``table[index]`` (embedding); repeated rows accumulate."""
    table = _t(table)
    idx = np.asarray(index, dtype=np.int64)
    out = table.data[idx]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(out, (table,), back)


# ---------------------------------------------------------------------------
# convolution and pooling (NHWC)
# ---------------------------------------------------------------------------

def _pair(v) -> tuple:
    if isinstance(v, numbers.Integral):
        return (int(v), int(v))
    return (int(v[0]), int(v[1]))


def _same_pads(size: int, k: int, s: int) -> tuple:
    out = -(-size // s)
    total = builtins.max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (n, ho, wo, kh, kw, c), (s0, s1 * sh, s2 * sw, s1, s2, s3),
                      writeable=False)


def conv2d(x, kernel, stride=1, padding: str = "same", bias=None) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``H x W x Cin`` or ``N x H x W x Cin``; ``kernel`` is
    ``kh x kw x Cin x Cout``.  ``padding`` is ``"same"`` or ``"valid"``.
    """
    x, kernel = _t(x), _t(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and 4-D kernel, got {x.shape}, {kernel.shape}")
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, input has {cin}")
    sh, sw = _pair(stride)
    if padding == "same":
        ph, pw = _same_pads(h, kh, sh), _same_pads(w, kw, sw)
    elif padding == "valid":
        ph, pw = (0, 0), (0, 0)
    else:
        raise ConfigurationError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + ph[0] + ph[1], w + pw[0] + pw[1]
    if kh > hp or kw > wp:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ConfigurationError("conv2d output has zero extent")
    xp = np.pad(xd, ((0, 0), ph, pw, (0, 0))) if (any(ph) or any(pw)) else xd
    cols = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(n, ho, wo, cout)
    if bias is not None:
        bias = _t(bias)
        out = out + bias.data
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gx = None
        if not x.requires_grad:
            pass
        elif sh == 1 and sw == 1:
            # full correlation of the output gradient with the flipped kernel
            gpad = np.pad(g4, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gcols = _windows(gpad, kh, kw, 1, 1, hp, wp).reshape(n * hp * wp, kh * kw * cout)
            gxp = (gcols @ flipped).reshape(n, hp, wp, cin)
        else:
            dcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += dcols[:, :, :, i, j, :]
        if x.requires_grad:
            gx = gxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
            if squeeze:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0).reshape(bias.shape))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, parents, back)


def _pool_setup(x: Tensor, kernel, stride):
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if x.ndim == 2:
        squeeze = "2d"
        xd = x.data[None, :, :, None]
    n, h, w, c = xd.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    if kh > h or kw > w:
        raise DimensionError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    return squeeze, xd, (n, h, w, c), (kh, kw, sh, sw, ho, wo)


def _unsqueeze_out(out: np.ndarray, squeeze):
    if squeeze == "2d":
        return out[0, :, :, 0]
    return out[0] if squeeze else out


def _squeeze_grad(g: np.ndarray, squeeze):
    if squeeze == "2d":
        return g[None, :, :, None]
    return g[None] if squeeze else g


def maxpool2d(x, kernel=2, stride=None) -> Tensor:
    """Max pooling (valid).  Ties route the gradient to the first index in scan order."""
    x = _t(x)
    stride = kernel if stride is None else stride
    squeeze, xd, (n, h, w, c), (kh, kw, sh, sw, ho, wo) = _pool_setup(x, kernel, stride)
    win = _windows(xd, kh, kw, sh, sw, ho, wo).reshape(n, ho, wo, kh * kw, c)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def back(g):
        g4 = _squeeze_grad(g, squeeze)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += g4 * (arg == i * kw + j)
        return (_unsqueeze_out(gx, squeeze),)

    return record(_unsqueeze_out(out, squeeze), (x,), back)


def avgpool2d(x, kernel=2, stride=None) -> Tensor:
    x = _t(x)
    stride = kernel if stride is None else stride
    squeeze, xd, (n, h, w, c), (kh, kw, sh, sw, ho, wo) = _pool_setup(x, kernel, stride)
    win = _windows(xd, kh, kw, sh, sw, ho, wo)
    out = win.mean(axis=(3, 4))

    def back(g):
        g4 = _squeeze_grad(g, squeeze) / (kh * kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += g4
        return (_unsqueeze_out(gx, squeeze),)

    return record(_unsqueeze_out(out, squeeze), (x,), back)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, eps: float = 1e-5):
    """Per-channel normalization over every axis but the last.

    Returns ``(y, mean, var)``; the statistics are plain arrays so the
    caller can maintain running estimates.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    axes = tuple(range(x.ndim - 1))
    mu = x.data.mean(axis=axes)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    count = x.size // x.shape[-1]

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = (gamma.data * inv / count) * (count * g - gb - xhat * gg)
        return gx, gg.reshape(gamma.shape), gb.reshape(beta.shape)

    return record(out, (x, gamma, beta), back), mu, var


def affine_norm(x, mean, var, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalization with fixed statistics (inference mode)."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data
    axes = tuple(range(x.ndim - 1))

    def back(g):
        return (g * gamma.data * inv, (g * xhat).sum(axis=axes).reshape(gamma.shape),
                g.sum(axis=axes).reshape(beta.shape))

    return record(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

def lstm_cell(x_proj, h, c, w_hh) -> Tensor:
    """One LSTM step.

    ``x_proj`` holds the input contribution to the gate pre-activations
    (``x @ W_ih + b``, shape ``N x 4H``, gate order input/forget/cell/output).
    Returns ``N x 2H``: the new hidden state followed by the new cell state.
    """
    x_proj, h, c, w_hh = _t(x_proj), _t(h), _t(c), _t(w_hh)
    hd = h.shape[-1]
    if x_proj.shape[-1] != 4 * hd or w_hh.shape != (hd, 4 * hd) or c.shape != h.shape:
        raise DimensionError(
            f"lstm_cell shapes inconsistent: x_proj {x_proj.shape}, h {h.shape}, "
            f"c {c.shape}, w_hh {w_hh.shape}")
    z = x_proj.data + h.data @ w_hh.data
    i = _sigmoid(z[..., :hd])
    f = _sigmoid(z[..., hd:2 * hd])
    u = np.tanh(z[..., 2 * hd:3 * hd])
    o = _sigmoid(z[..., 3 * hd:])
    c_new = f * c.data + i * u
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=-1)

    def back(g):
        gh, gc = g[..., :hd], g[..., hd:]
        gc_total = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc_total * u * i * (1.0 - i),
            gc_total * c.data * f * (1.0 - f),
            gc_total * i * (1.0 - u * u),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        return dz, dz @ w_hh.data.T, gc_total * f, h.data.T @ dz

    return record(out, (x_proj, h, c, w_hh), back)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(image, grid) -> Tensor:
    """Sample ``image`` at normalized coordinates ``grid``.

    ``image`` is ``(N) x H x W x C``; ``grid`` is ``(N) x Ho x Wo x 2`` with
    ``(x, y)`` in ``[0, 1]`` and pixel centers at ``(i + 0.5) / n``.
    Coordinates outside the image are clamped to the border.
    """
    image, grid = _t(image), _t(grid)
    squeeze = image.ndim == 3
    img = image.data[None] if squeeze else image.data
    gd = grid.data[None] if squeeze else grid.data
    if gd.shape[-1] != 2 or gd.shape[0] != img.shape[0]:
        raise DimensionError(f"grid {grid.shape} does not match image {image.shape}")
    if not np.all(np.isfinite(gd)):
        raise ValueError("sampling grid contains non-finite coordinates")
    n, h, w, c = img.shape
    px = gd[..., 0] * w - 0.5
    py = gd[..., 1] * h - 0.5
    # snap round-off so that exact pixel centers interpolate exactly
    rx, ry = np.rint(px), np.rint(py)
    px = np.where(np.abs(px - rx) < 1e-9, rx, px)
    py = np.where(np.abs(py - ry) < 1e-9, ry, py)
    inside_x = (px > 0) & (px < w - 1)
    inside_y = (py > 0) & (py < h - 1)
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (px - x0)[..., None]
    ay = (py - y0)[..., None]
    b = np.arange(n)[:, None, None]
    v00 = img[b, y0, x0]
    v01 = img[b, y0, x1]
    v10 = img[b, y1, x0]
    v11 = img[b, y1, x1]
    top = v00 * (1 - ax) + v01 * ax
    bot = v10 * (1 - ax) + v11 * ax
    out = top * (1 - ay) + bot * ay

    def back(g):
        g4 = g[None] if squeeze else g
        gimg = None
        if image.requires_grad:
            flat = np.zeros((n * h * w, c), dtype=img.dtype)
            base = (b * h)
            for yy, xx, wt in ((y0, x0, (1 - ay) * (1 - ax)), (y0, x1, (1 - ay) * ax),
                               (y1, x0, ay * (1 - ax)), (y1, x1, ay * ax)):
                pos = ((base + yy) * w + xx).reshape(-1)
                contrib = (g4 * wt).reshape(-1, c)
                for ch in range(c):
                    flat[:, ch] += np.bincount(pos, contrib[:, ch], minlength=n * h * w)
            gimg = flat.reshape(img.shape)
        dax = ((v01 - v00) * (1 - ay) + (v11 - v10) * ay) * g4
        day = (bot - top) * g4
        ggrid = np.stack([dax.sum(-1) * w * inside_x, day.sum(-1) * h * inside_y], axis=-1)
        if squeeze:
            return (None if gimg is None else gimg[0]), ggrid[0]
        return gimg, ggrid

    return record(out[0] if squeeze else out, (image, grid), back)
