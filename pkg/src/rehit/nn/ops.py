"""Differentiable operators over NCHW arrays.

Each public function computes its forward result with NumPy and, when a tape
is active, records the context its gradient rule needs.  Gradient rules are
registered by operator name in :mod:`rehit.nn.tensor`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from .tensor import Tensor, active_tape, branch_decision, count_flops, get_dtype, register_rule


class ShapeError(ValueError):
    """Raised when operand dimensions are inconsistent."""


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, ctx=None) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        tape.record(op, inputs, out, ctx)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", (a, b), a.data + b.data, (a.shape, b.shape))


@register_rule("add")
def _add_grad(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", (a, b), a.data - b.data, (a.shape, b.shape))


@register_rule("sub")
def _sub_grad(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", (a, b), a.data * b.data, (a, b))


@register_rule("mul")
def _mul_grad(ctx, g):
    a, b = ctx
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("div", (a, b), a.data / b.data, (a, b))


@register_rule("div")
def _div_grad(ctx, g):
    a, b = ctx
    ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
    return ga, gb


def scale(x: Tensor, s: float) -> Tensor:
    return _emit("scale", (x,), x.data * s, s)


@register_rule("scale")
def _scale_grad(s, g):
    return (g * s,)


def add_scalar(x: Tensor, s: float) -> Tensor:
    return _emit("add_scalar", (x,), x.data + s)


@register_rule("add_scalar")
def _add_scalar_grad(ctx, g):
    return (g,)


def pow_scalar(x: Tensor, p: float) -> Tensor:
    return _emit("pow_scalar", (x,), np.power(x.data, p), (x.data, p))


@register_rule("pow_scalar")
def _pow_grad(ctx, g):
    x, p = ctx
    return (g * p * np.power(x, p - 1),)


def abs_(x: Tensor) -> Tensor:
    sign = branch_decision(lambda: np.sign(x.data))
    return _emit("abs", (x,), sign * x.data, sign)


@register_rule("abs")
def _abs_grad(sign, g):
    return (g * sign,)


def relu(x: Tensor) -> Tensor:
    mask = branch_decision(lambda: x.data > 0)
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), mask)


@register_rule("relu")
def _relu_grad(mask, g):
    return (g * mask,)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = branch_decision(lambda: x.data > lo)
    return _emit("clamp_min", (x,), np.where(mask, x.data, lo).astype(x.data.dtype, copy=False), mask)


@register_rule("clamp_min")
def _clamp_min_grad(mask, g):
    return (g * mask,)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    return _emit("gelu", (x,), x.data * cdf, (x.data, cdf))


@register_rule("gelu")
def _gelu_grad(ctx, g):
    x, cdf = ctx
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data)
    return _emit("sigmoid", (x,), y, y)


@register_rule("sigmoid")
def _sigmoid_grad(y, g):
    return (g * y * (1.0 - y),)


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data).astype(x.data.dtype, copy=False)
    return _emit("softplus", (x,), y, x.data)


@register_rule("softplus")
def _softplus_grad(x, g):
    return (g * special.expit(x),)


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor) -> Tensor:
    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), x.shape)


@register_rule("sum")
def _sum_grad(shape, g):
    return (np.broadcast_to(g, shape).copy(),)


def mean(x: Tensor) -> Tensor:
    return _emit("mean", (x,), np.asarray(x.data.mean(), dtype=x.data.dtype), x.shape)


@register_rule("mean")
def _mean_grad(shape, g):
    n = int(np.prod(shape))
    return (np.broadcast_to(g / n, shape).copy(),)


def mean_axes(x: Tensor, axes: tuple[int, ...], keepdims: bool = True) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    y = x.data.mean(axis=axes, keepdims=keepdims)
    return _emit("mean_axes", (x,), y, (x.shape, axes, keepdims))


@register_rule("mean_axes")
def _mean_axes_grad(ctx, g):
    shape, axes, keepdims = ctx
    n = int(np.prod([shape[a] for a in axes]))
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / n, shape).copy(),)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", (x,), x.data.reshape(shape), x.shape)


@register_rule("reshape")
def _reshape_grad(shape, g):
    return (g.reshape(shape),)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    return _emit("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), axes)


@register_rule("transpose")
def _transpose_grad(axes, g):
    return (g.transpose(np.argsort(axes)),)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    return _emit("concat", xs, np.concatenate([x.data for x in xs], axis=axis), (axis, sizes))


@register_rule("concat")
def _concat_grad(ctx, g):
    axis, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return _emit("slice_channels", (x,), x.data[:, start:stop], (x.shape, start, stop))


@register_rule("slice_channels")
def _slice_grad(ctx, g):
    shape, start, stop = ctx
    out = np.zeros(shape, dtype=g.dtype)
    out[:, start:stop] = g
    return (out,)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    c = x.shape[1]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
    step = c // parts
    return [slice_channels(x, i * step, (i + 1) * step) for i in range(parts)]


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., j] = x[..., index[..., j]]``; index broadcasts over leading dims."""
    idx = np.broadcast_to(index, x.shape[:-1] + (index.shape[-1],))
    out = np.take_along_axis(x.data, idx, axis=-1)
    return _emit("gather_last", (x,), out, (x.shape, idx))


@register_rule("gather_last")
def _gather_grad(ctx, g):
    shape, idx = ctx
    length = shape[-1]
    rows = int(np.prod(shape[:-1]))
    offsets = (np.arange(rows) * length).reshape(shape[:-1] + (1,))
    flat = (idx + offsets).ravel()
    acc = np.bincount(flat, weights=g.ravel(), minlength=rows * length)
    return (acc.reshape(shape).astype(g.dtype, copy=False),)


# ---------------------------------------------------------------- convolution

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _taps(xp, kh, kw, ho, wo, stride, dil):
    for ky in range(kh):
        for kx in range(kw):
            y0, x0 = ky * dil, kx * dil
            yield ky, kx, (slice(None), slice(None),
                           slice(y0, y0 + stride * (ho - 1) + 1, stride),
                           slice(x0, x0 + stride * (wo - 1) + 1, stride))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is ``(c_out, c_in // groups, kh, kw)``.  Only ``groups == 1``
    and depthwise (``groups == c_in == c_out``) are supported.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    co, cig, kh, kw = weight.shape
    if dilation < 1 or stride < 1:
        raise ShapeError(f"stride ({stride}) and dilation ({dilation}) must be >= 1")
    if c % groups or co % groups:
        raise ShapeError(f"channels in={c}/out={co} not divisible by groups={groups}")
    if cig != c // groups:
        raise ShapeError(f"weight in-channel dim is {cig}, input provides {c // groups} per group "
                         f"(c_in={c}, groups={groups})")
    if groups != 1 and (groups != c or co != c):
        raise ShapeError(f"unsupported grouping groups={groups} for c_in={c}, c_out={co}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} does not match c_out={co}")
    ph, pw = _pair(padding)
    ho = conv_output_size(h, kh, stride, ph, dilation)
    wo = conv_output_size(w, kw, stride, pw, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {dilation}) larger than padded input {h}x{w}")
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    depthwise = groups > 1
    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for ky, kx, sl in _taps(xp, kh, kw, ho, wo, stride, dilation):
            out += xp[sl] * wd[:, 0, ky, kx][None, :, None, None]
        cols = None
        count_flops("conv2d", 2 * kh * kw * c * ho * wo * n)
    elif kh == kw == 1 and stride == 1 and not (ph or pw):
        cols = xd.reshape(n, c, h * w)
        out = np.matmul(wd.reshape(co, c), cols).reshape(n, co, ho, wo)
        count_flops("conv2d", 2 * c * co * ho * wo * n)
    else:
        cols = np.empty((n, c, kh * kw, ho, wo), dtype=xd.dtype)
        for ky, kx, sl in _taps(xp, kh, kw, ho, wo, stride, dilation):
            cols[:, :, ky * kw + kx] = xp[sl]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
        out = np.matmul(wd.reshape(co, c * kh * kw), cols).reshape(n, co, ho, wo)
        count_flops("conv2d", 2 * kh * kw * c * co * ho * wo * n)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)
    ctx = (xp if depthwise else None, cols, wd, x.shape, (ph, pw), stride, dilation, depthwise,
           bias is not None)
    return _emit("conv2d", inputs, out, ctx)


@register_rule("conv2d")
def _conv2d_grad(ctx, g):
    xp, cols, wd, xshape, (ph, pw), stride, dil, depthwise, has_bias = ctx
    n, c, h, w = xshape
    co, cig, kh, kw = wd.shape
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
    if depthwise:
        dw = np.empty_like(wd)
        for ky, kx, sl in _taps(dxp, kh, kw, ho, wo, stride, dil):
            dw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", g, xp[sl])
            dxp[sl] += g * wd[:, 0, ky, kx][None, :, None, None]
    else:
        g2 = g.reshape(n, co, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        dcols = np.matmul(wd.reshape(co, -1).T, g2)
        if kh == kw == 1 and stride == 1 and not (ph or pw):
            dxp = dcols.reshape(n, c, h, w)
        else:
            dcols = dcols.reshape(n, c, kh * kw, ho, wo)
            for ky, kx, sl in _taps(dxp, kh, kw, ho, wo, stride, dil):
                dxp[sl] += dcols[:, :, ky * kw + kx]
    dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
    grads = [np.ascontiguousarray(dx), dw.astype(g.dtype, copy=False)]
    if has_bias:
        grads.append(g.sum(axis=(0, 2, 3)))
    return tuple(grads)


# ---------------------------------------------------------------- normalization

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis independently at every spatial location."""
    c = x.shape[1]
    var = x.data.var(axis=1, keepdims=True)
    if eps <= 0 and (c == 1 or np.any(var == 0)):
        raise ZeroDivisionError("layer_norm: zero variance with eps <= 0 (division guard)")
    mu = x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    return _emit("layer_norm", (x, gamma, beta), out, (xhat, inv, gamma.data))


@register_rule("layer_norm")
def _layer_norm_grad(ctx, g):
    xhat, inv, gamma = ctx
    c = xhat.shape[1]
    dxhat = g * gamma[None, :, None, None]
    dx = inv / c * (c * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------- resampling

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    if r == 1:
        return x
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
    return _emit("pixel_shuffle", (x,), out, (x.shape, r))


@register_rule("pixel_shuffle")
def _pixel_shuffle_grad(ctx, g):
    (n, c, h, w), r = ctx
    co = c // (r * r)
    return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)


def interp_matrix(n_in: int, n_out: int, align_corners: bool = False) -> np.ndarray:
    """Row-stochastic linear interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    dst = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = dst * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(n_out)
    else:
        src = np.maximum((dst + 0.5) * (n_in / n_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output dims must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = interp_matrix(h, out_h, align_corners).astype(x.data.dtype)
    rx = interp_matrix(w, out_w, align_corners).astype(x.data.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _emit("bilinear_resize", (x,), out, (ry, rx))


@register_rule("bilinear_resize")
def _bilinear_grad(ctx, g):
    ry, rx = ctx
    return (np.matmul(np.matmul(ry.T, g), rx),)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; a trailing odd row/column is dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))
    return _emit("avg_pool2", (x,), out, x.shape)


@register_rule("avg_pool2")
def _avg_pool2_grad(shape, g):
    n, c, h, w = shape
    out = np.zeros(shape, dtype=g.dtype)
    h2, w2 = g.shape[2], g.shape[3]
    out[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
    return (out,)


# ---------------------------------------------------------------- softmax / attention

def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_np(x.data, axis)
    return _emit("softmax", (x,), y, (y, axis))


@register_rule("softmax")
def _softmax_grad(ctx, g):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    ``q``, ``k``, ``v`` are ``(..., S, d)``.  ``key_mask`` (broadcastable to
    ``(..., S)``) marks valid keys; masked keys get zero weight.  A query row
    whose keys are all masked produces a zero output.
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"attention operands differ: q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[-1]
    s = q.shape[-2]
    scale_ = 1.0 / math.sqrt(d)
    logits = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale_
    if key_mask is not None:
        valid = np.broadcast_to(np.asarray(key_mask, dtype=bool)[..., None, :], logits.shape)
        logits = np.where(valid, logits, -np.inf)
        row_max = logits.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.exp(logits - row_max)
        denom = e.sum(axis=-1, keepdims=True)
        p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    else:
        p = softmax_np(logits, -1)
    out = np.matmul(p, v.data)
    batch = int(np.prod(q.shape[:-2]))
    count_flops("attention", 2 * s * s * d * batch)
    return _emit("attention", (q, k, v), out, (q.data, k.data, v.data, p, scale_))


@register_rule("attention")
def _attention_grad(ctx, g):
    q, k, v, p, scale_ = ctx
    dv = np.matmul(np.swapaxes(p, -1, -2), g)
    dp = np.matmul(g, np.swapaxes(v, -1, -2))
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale_
    dq = np.matmul(ds, k)
    dk = np.matmul(np.swapaxes(ds, -1, -2), q)
    return dq, dk, dv
