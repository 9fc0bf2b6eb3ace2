"""Differentiable operators.

Every op takes and returns :class:`Tensor` objects and records a
vector-Jacobian product for the backward pass. Elementwise arithmetic accepts
operands of identical shape or python scalars; there is no general
broadcasting.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, branch, get_dtype, make_result

LOG_CLAMP = 1e-12


def _operand(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        if value.shape != like.shape:
            raise ShapeError(f"operand shapes differ: {like.shape} vs {value.shape}")
        return value
    arr = np.asarray(value, dtype=get_dtype())
    if arr.ndim == 0:
        return Tensor(np.full(like.shape, arr, dtype=get_dtype()))
    if arr.shape != like.shape:
        raise ShapeError(f"operand shapes differ: {like.shape} vs {arr.shape}")
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _operand(b, a)
    b = as_tensor(b)
    return _operand(a, b), b


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        gb = g / b.data
        return gb, -gb * out

    return make_result(out, (a, b), vjp, "div")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def log(x: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of ``max(x, clamp)``; gradient is zero where the clamp is active."""
    active = branch(lambda: x.data > clamp)
    safe = np.where(active, x.data, clamp)

    def vjp(g):
        return (np.where(active, g / safe, 0.0).astype(g.dtype),)

    return make_result(np.log(safe), (x,), vjp, "log")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return make_result(out, (x,), vjp, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axes), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = branch(lambda: x.data > 0)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _open_unit(s: np.ndarray) -> np.ndarray:
    # keeps saturated outputs strictly inside (0, 1) at the working precision
    info = np.finfo(s.dtype)
    return np.clip(s, info.tiny, 1.0 - info.epsneg)


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    s[~pos] = ex / (1.0 + ex)
    s = _open_unit(s)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), vjp, "softmax")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weights.shape[1]},)")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weights) if bias is None else (x, weights, bias)

    def vjp(g):
        grads = [g @ weights.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, inputs, vjp, "linear")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """Stride-1 2-D cross-correlation of NCHW input with an OIHW kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be N,C,H,W, got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be Cout,Cin,kH,kW, got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: channel axis (1) mismatch, input has {cin}, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias axis 0 has {bias.shape}, expected ({cout},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same padding needs odd kernel extents, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds input {h}x{w}")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    kmat = kernel.data.reshape(cout, cin * kh * kw)

    if kh == 1 and kw == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n,cin,ho,wo,kh,kw
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dcols = g2 @ kmat
        if kh == 1 and kw == 1:
            dx = np.ascontiguousarray(dcols.reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        else:
            dcols = dcols.reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph:ph + h, pw:pw + w]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, inputs, vjp, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first row-major argmax."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial extents must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = branch(lambda: win.argmax(axis=-1))
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return make_result(np.ascontiguousarray(out), (x,), vjp, "max_pool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of NCHW input."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), vjp, "upsample2x")


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat needs at least one input")
    ref = inputs[0].shape
    axis = axis % len(ref)
    for t in inputs[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: extents off axis {axis} differ: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in inputs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in inputs])[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return make_result(out, inputs, vjp, "concat")


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each (n, c) feature map of ``x`` by ``scale[n, c]``."""
    if x.ndim < 3 or scale.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: scale {scale.shape} must equal the N,C axes of {x.shape}")
    expand = (slice(None), slice(None)) + (None,) * (x.ndim - 2)
    spatial = tuple(range(2, x.ndim))
    out = x.data * scale.data[expand]

    def vjp(g):
        return g * scale.data[expand], (g * x.data).sum(axis=spatial)

    return make_result(out, (x, scale), vjp, "channel_scale")


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over every axis except 1.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift must be ({c},), got {scale.shape}, {shift.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean.data[...] = momentum * running_mean.data + (1 - momentum) * mu
        running_var.data[...] = momentum * running_var.data + (1 - momentum) * unbiased
    else:
        mu, var = running_mean.data, running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def vjp(g):
        dscale = (g * xhat).sum(axis=axes)
        dshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        if training:
            dx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dscale, dshift

    return make_result(out, (x, scale, shift), vjp, "batch_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def encoding_aggregate(x: Tensor, codewords: Tensor, smoothing: Tensor) -> Tensor:
    """Soft-assignment residual aggregation over M descriptors.

    ``x`` is N,M,F; ``codewords`` K,F; ``smoothing`` K. Returns N,K,F with
    ``out[n,k] = mean_i a[n,i,k] * (x[n,i] - c[k])`` and
    ``a[n,i,:] = softmax_k(-s_k * |x[n,i] - c[k]|^2)``.
    """
    if x.ndim != 3:
        raise ShapeError(f"encoding_aggregate: descriptors must be N,M,F, got {x.shape}")
    k = codewords.shape[0]
    if k == 0:
        raise ShapeError("encoding_aggregate: needs at least one codeword")
    if codewords.ndim != 2 or codewords.shape[1] != x.shape[2]:
        raise ShapeError(f"encoding_aggregate: codewords {codewords.shape} do not match feature axis of {x.shape}")
    if smoothing.shape != (k,):
        raise ShapeError(f"encoding_aggregate: smoothing {smoothing.shape} != ({k},)")
    m = x.shape[1]
    r = x.data[:, :, None, :] - codewords.data[None, None, :, :]  # n,m,k,f
    dist = (r * r).sum(axis=-1)  # n,m,k
    logits = -smoothing.data * dist
    logits = logits - logits.max(axis=-1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=-1, keepdims=True)
    out = np.einsum("nik,nikf->nkf", a, r) / m

    def vjp(g):
        g = g / m
        dr = a[..., None] * g[:, None, :, :]
        da = np.einsum("nkf,nikf->nik", g, r)
        dz = a * (da - (a * da).sum(axis=-1, keepdims=True))
        ds = -(dz * dist).sum(axis=(0, 1))
        dr += 2.0 * r * (-smoothing.data * dz)[..., None]
        dx = dr.sum(axis=2)
        dc = -dr.sum(axis=(0, 1))
        return dx, dc, ds

    return make_result(out, (x, codewords, smoothing), vjp, "encoding_aggregate")
