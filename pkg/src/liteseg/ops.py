"""Reference forward/backward operators on NCHW numpy tensors.

Every forward op is a pure function.  Ops that have a backward accept an
optional ``ctx`` dict; when given, the forward records what the matching
``*_backward`` needs.  Backward functions return gradients with the same
shapes as the forward inputs.

Convolution is cross-correlation (no kernel flip).  Arithmetic stays in the
dtype of the inputs, so the same code serves float32 inference and float64
gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError, check_tensor


class UsageError(RuntimeError):
    """A backward op was called without the context its forward records."""


class UnsupportedOperationError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _need(ctx, op):
    if not ctx:
        raise UsageError(f"{op}: forward context missing (run the forward with ctx={{}} first)")
    return ctx


@dataclass(frozen=True)
class ConvParams:
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if min(self.stride) < 1 or min(self.dilation) < 1 or self.groups < 1:
            raise ValueError(f"invalid conv params {self}")
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")


@dataclass
class ConvWeights:
    kernel: np.ndarray  # (out_c, in_c // groups, kh, kw)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kernel.ndim != 4 or min(self.kernel.shape) < 1:
            raise ShapeError(f"kernel must be 4-D with positive extents, got {self.kernel.shape}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias length {self.bias.shape} != out channels {self.kernel.shape[0]}")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ShapeError("batchnorm vectors must share one length")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")


def conv_output_extent(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    k_eff = (k - 1) * dilation + 1
    if k_eff > size + 2 * pad:
        raise ShapeError(f"effective kernel {k_eff} exceeds padded extent {size + 2 * pad}")
    return (size + 2 * pad - k_eff) // stride + 1


def _taps(xp, kh, kw, p: ConvParams, oh, ow):
    sh, sw = p.stride
    dh, dw = p.dilation
    for i in range(kh):
        for j in range(kw):
            r, c = i * dh, j * dw
            yield i, j, (slice(r, r + sh * (oh - 1) + 1, sh), slice(c, c + sw * (ow - 1) + 1, sw))


def _conv_geometry(x, kernel, p):
    n, c, h, w = x.shape
    out_c, cg, kh, kw = kernel.shape
    g = p.groups
    if c != cg * g:
        raise ShapeError(f"input has {c} channels but kernel expects {cg} x {g} groups = {cg * g}")
    if out_c % g:
        raise ShapeError(f"out channels {out_c} not divisible by groups {g}")
    oh = conv_output_extent(h, kh, p.stride[0], p.padding[0], p.dilation[0])
    ow = conv_output_extent(w, kw, p.stride[1], p.padding[1], p.dilation[1])
    return n, c, out_c, cg, kh, kw, g, oh, ow


def _pad(x, p):
    ph, pw = p.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _is_depthwise(c, cg, g):
    return g == c and cg == 1


def _im2col(xp, kh, kw, p, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, oh, ow), dtype=xp.dtype)
    for i, j, (rs, cs) in _taps(xp, kh, kw, p, oh, ow):
        cols[:, :, i * kw + j] = xp[:, :, rs, cs]
    return cols


def conv2d(x: np.ndarray, w: ConvWeights, p: ConvParams = ConvParams(), ctx: Optional[dict] = None):
    check_tensor(x)
    kernel = w.kernel
    n, c, out_c, cg, kh, kw, g, oh, ow = _conv_geometry(x, kernel, p)
    dtype = np.result_type(x.dtype, kernel.dtype)
    if _is_depthwise(c, cg, g):
        m = out_c // c
        xp = _pad(x, p)
        if m > 1:
            xp = np.repeat(xp, m, axis=1)
        out = np.zeros((n, out_c, oh, ow), dtype=dtype)
        for i, j, (rs, cs) in _taps(xp, kh, kw, p, oh, ow):
            out += kernel[:, 0, i, j][None, :, None, None] * xp[:, :, rs, cs]
    elif kh == kw == 1 and p.stride == (1, 1) and p.padding == (0, 0):
        cols = x.reshape(n, g, cg, oh * ow)
        wg = kernel.reshape(g, out_c // g, cg)
        out = np.matmul(wg[None], cols).reshape(n, out_c, oh, ow)
    else:
        cols = _im2col(_pad(x, p), kh, kw, p, oh, ow).reshape(n, g, cg * kh * kw, oh * ow)
        wg = kernel.reshape(g, out_c // g, cg * kh * kw)
        out = np.matmul(wg[None], cols).reshape(n, out_c, oh, ow)
    if w.bias is not None:
        out = out + w.bias[None, :, None, None]
    if ctx is not None:
        ctx.update(op="conv2d", x=x, w=w, p=p)
    return out.astype(dtype, copy=False)


def conv2d_backward(grad: np.ndarray, ctx: dict):
    """Returns (dx, dkernel, dbias); dbias is None for bias-free convs."""
    _need(ctx, "conv2d_backward")
    x, w, p = ctx["x"], ctx["w"], ctx["p"]
    kernel = w.kernel
    n, c, out_c, cg, kh, kw, g, oh, ow = _conv_geometry(x, kernel, p)
    if grad.shape != (n, out_c, oh, ow):
        raise ShapeError(f"gradient shape {grad.shape} != output shape {(n, out_c, oh, ow)}")
    ph, pw = p.padding
    xp = _pad(x, p)
    dkernel = np.zeros_like(kernel, dtype=grad.dtype)
    if _is_depthwise(c, cg, g):
        m = out_c // c
        xe = np.repeat(xp, m, axis=1) if m > 1 else xp
        dxe = np.zeros(xe.shape, dtype=grad.dtype)
        for i, j, (rs, cs) in _taps(xe, kh, kw, p, oh, ow):
            dkernel[:, 0, i, j] = (grad * xe[:, :, rs, cs]).sum(axis=(0, 2, 3))
            dxe[:, :, rs, cs] += kernel[:, 0, i, j][None, :, None, None] * grad
        dxp = dxe.reshape(n, c, m, *dxe.shape[2:]).sum(axis=2) if m > 1 else dxe
    else:
        cols = _im2col(xp, kh, kw, p, oh, ow).reshape(n, g, cg * kh * kw, oh * ow)
        gg = grad.reshape(n, g, out_c // g, oh * ow)
        wg = kernel.reshape(g, out_c // g, cg * kh * kw)
        dkernel = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(kernel.shape)
        dcols = np.matmul(wg.transpose(0, 2, 1)[None], gg).reshape(n, c, kh * kw, oh, ow)
        dxp = np.zeros(xp.shape, dtype=grad.dtype)
        for i, j, (rs, cs) in _taps(xp, kh, kw, p, oh, ow):
            dxp[:, :, rs, cs] += dcols[:, :, i * kw + j]
    dx = dxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    dbias = grad.sum(axis=(0, 2, 3)) if w.bias is not None else None
    return dx, dkernel, dbias


def depthwise_separable_conv(
    x: np.ndarray, dw: ConvWeights, pw: ConvWeights, p: ConvParams = ConvParams(), ctx: Optional[dict] = None
):
    c = x.shape[1]
    if dw.kernel.shape[1] != 1 or dw.kernel.shape[0] != c:
        raise ShapeError(f"depthwise kernel {dw.kernel.shape} incompatible with {c} input channels")
    if pw.kernel.shape[1:] != (c, 1, 1):
        raise ShapeError(f"pointwise kernel {pw.kernel.shape} must be (out, {c}, 1, 1)")
    dctx = {} if ctx is not None else None
    pctx = {} if ctx is not None else None
    mid = conv2d(x, dw, ConvParams(p.stride, p.padding, p.dilation, groups=c), dctx)
    out = conv2d(mid, pw, ConvParams(), pctx)
    if ctx is not None:
        ctx.update(op="dwsep", dw=dctx, pw=pctx)
    return out


def depthwise_separable_conv_backward(grad, ctx):
    """Returns (dx, d_dw_kernel, d_pw_kernel, d_dw_bias, d_pw_bias)."""
    _need(ctx, "depthwise_separable_conv_backward")
    dmid, dpw, dpwb = conv2d_backward(grad, ctx["pw"])
    dx, ddw, ddwb = conv2d_backward(dmid, ctx["dw"])
    return dx, ddw, dpw, ddwb, dpwb


def _bn_vec(v, x):
    return v.astype(x.dtype, copy=False)[None, :, None, None]


def batchnorm_infer(x: np.ndarray, bn: BatchNormParams, ctx: Optional[dict] = None):
    check_tensor(x)
    if bn.gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm has {bn.gamma.shape[0]} channels, input has {x.shape[1]}")
    inv = 1.0 / np.sqrt(_bn_vec(bn.running_var, x) + x.dtype.type(bn.eps))
    if ctx is not None:
        xhat = (x - _bn_vec(bn.running_mean, x)) * inv
        ctx.update(op="bn", mode="eval", xhat=xhat, inv=inv, gamma=bn.gamma)
        return _bn_vec(bn.gamma, x) * xhat + _bn_vec(bn.beta, x)
    scale = _bn_vec(bn.gamma, x) * inv
    y = x * scale
    y += _bn_vec(bn.beta, x) - _bn_vec(bn.running_mean, x) * scale
    return y


def batchnorm_train(x: np.ndarray, bn: BatchNormParams, momentum: float = 0.1, ctx: Optional[dict] = None):
    """Normalizes with batch statistics; returns (y, updated_running_mean, updated_running_var)."""
    check_tensor(x)
    if bn.gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm has {bn.gamma.shape[0]} channels, input has {x.shape[1]}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(bn.eps))
    xhat = (x - mean) * inv
    y = _bn_vec(bn.gamma, x) * xhat + _bn_vec(bn.beta, x)
    unbiased = var.ravel() * (count / max(count - 1, 1))
    rm = (1 - momentum) * bn.running_mean + momentum * mean.ravel().astype(bn.running_mean.dtype)
    rv = (1 - momentum) * bn.running_var + momentum * unbiased.astype(bn.running_var.dtype)
    if ctx is not None:
        ctx.update(op="bn", mode="train", xhat=xhat, inv=inv, gamma=bn.gamma)
    return y, rm, rv


def bn_backward(grad, ctx):
    """Returns (dx, dgamma, dbeta) for either batchnorm mode."""
    _need(ctx, "bn_backward")
    xhat, inv = ctx["xhat"], ctx["inv"]
    gamma = _bn_vec(ctx["gamma"], grad)
    dgamma = (grad * xhat).sum(axis=(0, 2, 3))
    dbeta = grad.sum(axis=(0, 2, 3))
    if ctx["mode"] == "eval":
        return grad * gamma * inv, dgamma, dbeta
    count = grad.shape[0] * grad.shape[2] * grad.shape[3]
    dx = (gamma * inv / count) * (
        count * grad - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None]
    )
    return dx, dgamma, dbeta


def relu(x, ctx=None):
    if ctx is not None:
        ctx.update(op="relu", mask=x > 0)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def leaky_relu(x, slope: float = 0.1, ctx=None):
    if ctx is not None:
        ctx.update(op="leaky", pos=x > 0, slope=slope)
    return np.where(x > 0, x, x * x.dtype.type(slope))


def relu6(x, ctx=None):
    if ctx is not None:
        ctx.update(op="relu6", mask=(x > 0) & (x < 6))
    return np.clip(x, 0, 6).astype(x.dtype, copy=False)


def relu_backward(grad, ctx):
    _need(ctx, "relu_backward")
    if ctx["op"] == "leaky":
        return np.where(ctx["pos"], grad, grad * grad.dtype.type(ctx["slope"]))
    return np.where(ctx["mask"], grad, 0).astype(grad.dtype, copy=False)


def activation(x, kind: str, slope: float = 0.1, ctx=None):
    if kind == "relu":
        return relu(x, ctx)
    if kind == "relu6":
        return relu6(x, ctx)
    if kind == "leaky":
        return leaky_relu(x, slope, ctx)
    raise ValueError(f"unknown activation {kind!r}")


def _pool_geometry(x, kernel, stride, padding):
    k = _pair(kernel)
    s = _pair(stride)
    pd = _pair(padding)
    oh = conv_output_extent(x.shape[2], k[0], s[0], pd[0], 1)
    ow = conv_output_extent(x.shape[3], k[1], s[1], pd[1], 1)
    return k, ConvParams(s, pd, 1), oh, ow


def maxpool2d(x, kernel=2, stride=2, padding=0, ctx=None):
    check_tensor(x)
    k, p, oh, ow = _pool_geometry(x, kernel, stride, padding)
    ph, pw = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if ph or pw else x
    windows = _im2col(xp, k[0], k[1], p, oh, ow)
    if ctx is not None:
        ctx.update(op="maxpool", arg=windows.argmax(axis=2), xshape=x.shape, k=k, p=p, oh=oh, ow=ow)
    return windows.max(axis=2)


def maxpool2d_backward(grad, ctx):
    _need(ctx, "maxpool2d_backward")
    n, c, h, w = ctx["xshape"]
    k, p, arg = ctx["k"], ctx["p"], ctx["arg"]
    ph, pw = p.padding
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
    for i, j, (rs, cs) in _taps(dxp, k[0], k[1], p, ctx["oh"], ctx["ow"]):
        dxp[:, :, rs, cs] += np.where(arg == i * k[1] + j, grad, 0)
    return dxp[:, :, ph : ph + h, pw : pw + w]


def avgpool2d(x, kernel=3, stride=2, padding=1, ctx=None):
    """Average pool; zero padding counts toward the divisor."""
    check_tensor(x)
    k, p, oh, ow = _pool_geometry(x, kernel, stride, padding)
    out = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    xp = _pad(x, p)
    for _, _, (rs, cs) in _taps(xp, k[0], k[1], p, oh, ow):
        out += xp[:, :, rs, cs]
    if ctx is not None:
        ctx.update(op="avgpool", xshape=x.shape, k=k, p=p, oh=oh, ow=ow)
    return out / x.dtype.type(k[0] * k[1])


def avgpool2d_backward(grad, ctx):
    _need(ctx, "avgpool2d_backward")
    n, c, h, w = ctx["xshape"]
    k, p = ctx["k"], ctx["p"]
    ph, pw = p.padding
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
    g = grad / grad.dtype.type(k[0] * k[1])
    for _, _, (rs, cs) in _taps(dxp, k[0], k[1], p, ctx["oh"], ctx["ow"]):
        dxp[:, :, rs, cs] += g
    return dxp[:, :, ph : ph + h, pw : pw + w]


def global_avgpool(x, ctx=None):
    check_tensor(x)
    if ctx is not None:
        ctx.update(op="gap", xshape=x.shape)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avgpool_backward(grad, ctx):
    _need(ctx, "global_avgpool_backward")
    n, c, h, w = ctx["xshape"]
    return np.broadcast_to(grad / grad.dtype.type(h * w), (n, c, h, w)).copy()


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row d holds the half-pixel bilinear weights of output index d."""
    if out_size < in_size:
        raise UnsupportedOperationError(f"bilinear downscaling {in_size} -> {out_size} is not supported")
    a = np.zeros((out_size, in_size))
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    rows = np.arange(out_size)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def bilinear_upsample(x, out_h: int, out_w: int, ctx=None):
    check_tensor(x)
    ah = interp_matrix(x.shape[2], out_h).astype(x.dtype)
    aw = interp_matrix(x.shape[3], out_w).astype(x.dtype)
    if ctx is not None:
        ctx.update(op="upsample", ah=ah, aw=aw)
    if (out_h, out_w) == x.shape[2:]:
        return x.copy()
    return np.matmul(np.matmul(ah, x), aw.T)


def upsample_backward(grad, ctx):
    _need(ctx, "upsample_backward")
    ah, aw = ctx["ah"].astype(grad.dtype), ctx["aw"].astype(grad.dtype)
    return np.matmul(np.matmul(ah.T, grad), aw)


def concat_backward(grad, split: int):
    """Splits an upstream channel gradient at channel index ``split``."""
    return grad[:, :split].copy(), grad[:, split:].copy()


def channel_shuffle(x, groups: int):
    n, c, h, w = check_tensor(x).shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} shuffle groups")
    return x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)


def channel_unshuffle(x, groups: int):
    n, c, h, w = check_tensor(x).shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} shuffle groups")
    return x.reshape(n, c // groups, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)


def softmax_channel(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, logits, ignore_index):
    n, c, h, w = logits.shape
    if labels.shape != (n, 1, h, w):
        raise ShapeError(f"labels shape {labels.shape} must be {(n, 1, h, w)}")
    lab = labels[:, 0].astype(np.int64)
    valid = lab != ignore_index
    bad = valid & ((lab < 0) | (lab >= c))
    if bad.any():
        raise InvalidLabelError(f"label {int(lab[bad][0])} outside [0, {c}) and not ignore_index={ignore_index}")
    return lab, valid


def cross_entropy_loss(logits, labels, ignore_index: int = 255, ctx=None) -> tuple[float, int]:
    """Mean per-pixel negative log-likelihood over non-ignored pixels.

    Returns ``(loss, count)``; an image whose pixels are all ignored gives
    ``(0.0, 0)``.
    """
    check_tensor(logits, "logits")
    lab, valid = _check_labels(labels, logits, ignore_index)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    count = int(valid.sum())
    if ctx is not None:
        ctx.update(op="ce", logp=logp, lab=lab, valid=valid, count=count)
    if count == 0:
        return 0.0, 0
    picked = np.take_along_axis(logp, np.where(valid, lab, 0)[:, None], axis=1)[:, 0]
    return float(-picked[valid].sum() / count), count


def loss_backward(ctx):
    _need(ctx, "loss_backward")
    logp, lab, valid, count = ctx["logp"], ctx["lab"], ctx["valid"], ctx["count"]
    grad = np.exp(logp)
    if count == 0:
        return np.zeros_like(grad)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, np.where(valid, lab, 0)[:, None], 1.0, axis=1)
    grad = (grad - onehot) * valid[:, None]
    return grad / grad.dtype.type(count)
