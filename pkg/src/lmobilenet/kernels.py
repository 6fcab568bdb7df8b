"""Numeric primitives on dense N,C,H,W arrays.

Every layer kind has a forward function and an analytic backward.  Two
convolution paths exist:

* ``conv2d_forward`` -- the reference path.  It walks input channels and
  kernel taps in a fixed order and accumulates with elementwise numpy
  operations only, so results are bitwise reproducible.
* ``conv2d_gemm`` -- lowers the convolution to im2col + batched matmul.  BLAS
  may reorder the accumulation, so it agrees with the reference path only up
  to rounding.

Depthwise convolution is a grouped convolution with
``groups == in_channels == out_channels``; there is no separate op.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, StateError

Tensor = np.ndarray

BN_EPSILON = 1e-5
BN_STAT_MOMENTUM = 0.9


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigurationError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def check_tensor(x: Tensor, name: str = "input") -> Tensor:
    if not isinstance(x, np.ndarray):
        raise DimensionError(f"{name}: expected an ndarray, got {type(x).__name__}")
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected rank 4 (n, c, h, w), got shape {x.shape}")
    for axis, size in zip("nchw", x.shape):
        if size < 1:
            raise DimensionError(f"{name}: axis {axis} has size {size}")
    return x


def pooled_size(size: int, kernel: int, stride: int, pad: int, axis: str = "h") -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if size + 2 * pad < kernel or out < 1:
        raise DimensionError(
            f"axis {axis}: window {kernel} (stride {stride}, pad {pad}) does not fit size {size}"
        )
    return out


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigurationError(
                f"bad geometry kernel={self.kernel} stride={self.stride} padding={self.padding}"
            )
        g = self.groups
        if g < 1 or self.in_channels % g or self.out_channels % g:
            raise ConfigurationError(
                f"groups={g} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    @property
    def is_grouped(self) -> bool:
        """True for generic group convolution (1 < groups < channels)."""
        return self.groups > 1 and self.groups != self.in_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return pooled_size(h, kh, sh, ph, "h"), pooled_size(w, kw, sw, pw, "w")


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    stat_momentum: float = BN_STAT_MOMENTUM
    mode: str = "training"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("batch-norm epsilon must be positive")
        if not 0.0 < self.stat_momentum < 1.0:
            raise ConfigurationError("stat_momentum must lie in (0, 1)")
        if self.mode not in ("training", "inference"):
            raise ConfigurationError(f"unknown batch-norm mode {self.mode!r}")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running_var must be nonnegative")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw) -> "BnParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )


def _check_conv(x: Tensor, weights: Tensor, bias, p: ConvParams) -> tuple[int, int]:
    check_tensor(x)
    if x.shape[1] != p.in_channels:
        raise DimensionError(
            f"axis c: input has {x.shape[1]} channels, conv expects {p.in_channels}"
        )
    if tuple(weights.shape) != p.weight_shape:
        raise DimensionError(f"weights: shape {tuple(weights.shape)} != expected {p.weight_shape}")
    if bias is not None and tuple(np.shape(bias)) != (p.out_channels,):
        raise DimensionError(f"bias: shape {np.shape(bias)} != ({p.out_channels},)")
    return p.output_hw(x.shape[2], x.shape[3])


def _pad(x: Tensor, ph: int, pw: int, value=0.0) -> Tensor:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv2d_forward(x: Tensor, weights: Tensor, bias, p: ConvParams) -> Tensor:
    """Reference convolution (cross-correlation) with zero padding."""
    ho, wo = _check_conv(x, weights, bias, p)
    (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
    n = x.shape[0]
    xp = _pad(x, ph, pw)
    dtype = np.result_type(x, weights)
    out = np.zeros((n, p.out_channels, ho, wo), dtype)
    cin_g = p.in_channels // p.groups
    cout_g = p.out_channels // p.groups
    for g in range(p.groups):
        co = slice(g * cout_g, (g + 1) * cout_g)
        acc = out[:, co]
        for ci in range(cin_g):
            plane = xp[:, g * cin_g + ci]
            for i in range(kh):
                for j in range(kw):
                    patch = plane[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
                    acc += weights[co, ci, i, j][None, :, None, None] * patch[:, None]
    if bias is not None:
        out += np.asarray(bias, dtype)[None, :, None, None]
    return out


def _windows(xp: Tensor, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    # (n, c, ho, wo, kh, kw) view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]


def im2col(x: Tensor, p: ConvParams) -> np.ndarray:
    """Unfold receptive fields into a ``(c*kh*kw, n*h_out*w_out)`` matrix.

    Rows run over (channel, kernel row, kernel col); columns over
    (sample, output row, output col).  Padding shows up as explicit zeros.
    """
    check_tensor(x)
    if x.shape[1] != p.in_channels:
        raise DimensionError(
            f"axis c: input has {x.shape[1]} channels, conv expects {p.in_channels}"
        )
    ho, wo = p.output_hw(x.shape[2], x.shape[3])
    (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
    win = _windows(_pad(x, ph, pw), kh, kw, sh, sw, ho, wo)
    n, c = x.shape[:2]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def conv2d_gemm(x: Tensor, weights: Tensor, bias, p: ConvParams) -> Tensor:
    """im2col + (batched) matmul convolution; same contract as the reference."""
    ho, wo = _check_conv(x, weights, bias, p)
    n = x.shape[0]
    g = p.groups
    cols = im2col(x, p).reshape(g, -1, n * ho * wo)
    wmat = weights.reshape(g, p.out_channels // g, -1)
    out = np.matmul(wmat, cols).reshape(p.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += np.asarray(bias, out.dtype)[None, :, None, None]
    return out


def conv2d_backward(grad_out: Tensor, x: Tensor, weights: Tensor, p: ConvParams):
    """Gradients of a convolution: ``(grad_input, grad_weights, grad_bias)``.

    ``grad_bias`` is None when the layer has no bias.
    """
    (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
    n, _, ho, wo = grad_out.shape
    g = p.groups
    cols = im2col(x, p).reshape(g, -1, n * ho * wo)
    gmat = grad_out.transpose(1, 0, 2, 3).reshape(g, p.out_channels // g, n * ho * wo)
    wmat = weights.reshape(g, p.out_channels // g, -1)
    grad_w = np.matmul(gmat, cols.transpose(0, 2, 1)).reshape(weights.shape)
    dcols = np.matmul(wmat.transpose(0, 2, 1), gmat)
    dcols = dcols.reshape(p.in_channels, kh, kw, n, ho, wo)
    h, w = x.shape[2:]
    dxp = np.zeros((n, p.in_channels, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    grad_x = dxp[:, :, ph : ph + h, pw : pw + w]
    grad_b = grad_out.sum(axis=(0, 2, 3)) if p.has_bias else None
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def maxpool2d(x: Tensor, kernel=(3, 3), stride=(2, 2), pad=(1, 1)):
    """Max pooling; padded cells act as -inf.

    Returns ``(output, argmax)`` where ``argmax`` holds, per output element,
    the flat ``row * w + col`` index of the winning input cell.
    """
    check_tensor(x)
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(pad)
    if ph >= kh or pw >= kw:
        raise DimensionError(f"pad {(ph, pw)} >= kernel {(kh, kw)}: some windows lie entirely in padding")
    n, c, h, w = x.shape
    ho, wo = pooled_size(h, kh, sh, ph, "h"), pooled_size(w, kw, sw, pw, "w")
    win = _windows(_pad(x, ph, pw, -np.inf), kh, kw, sh, sw, ho, wo).reshape(n, c, ho, wo, kh * kw)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0].astype(x.dtype, copy=False)
    rows = np.arange(ho)[:, None] * sh - ph + idx // kw
    cols = np.arange(wo)[None, :] * sw - pw + idx % kw
    return np.ascontiguousarray(out), rows * w + cols


def maxpool2d_backward(grad_out: Tensor, argmax: np.ndarray, input_shape) -> Tensor:
    n, c, h, w = input_shape
    base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    flat = np.bincount((argmax + base).ravel(), weights=grad_out.ravel(), minlength=n * c * h * w)
    return flat.reshape(n, c, h, w).astype(grad_out.dtype, copy=False)


def _avg_counts(h, w, kh, kw, sh, sw, ph, pw, ho, wo, dtype):
    ones = _pad(np.ones((1, 1, h, w), dtype), ph, pw)
    return _windows(ones, kh, kw, sh, sw, ho, wo).sum(axis=(-1, -2))[0, 0]


def avgpool2d(x: Tensor, kernel=(3, 3), stride=(2, 2), pad=(1, 1)) -> Tensor:
    """Average pooling that divides by the number of non-padding cells."""
    check_tensor(x)
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(pad)
    if ph >= kh or pw >= kw:
        raise DimensionError(f"pad {(ph, pw)} >= kernel {(kh, kw)}: some windows lie entirely in padding")
    h, w = x.shape[2:]
    ho, wo = pooled_size(h, kh, sh, ph, "h"), pooled_size(w, kw, sw, pw, "w")
    sums = _windows(_pad(x, ph, pw), kh, kw, sh, sw, ho, wo).sum(axis=(-1, -2))
    return sums / _avg_counts(h, w, kh, kw, sh, sw, ph, pw, ho, wo, x.dtype)


def avgpool2d_backward(grad_out: Tensor, input_shape, kernel=(3, 3), stride=(2, 2), pad=(1, 1)) -> Tensor:
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(pad)
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2:]
    scaled = grad_out / _avg_counts(h, w, kh, kw, sh, sw, ph, pw, ho, wo, grad_out.dtype)
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += scaled
    return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + w])


def global_avg_pool(x: Tensor) -> Tensor:
    check_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: Tensor, input_shape) -> Tensor:
    n, c, h, w = input_shape
    return np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy()


def _check_bn(x: Tensor, bn: BnParams):
    check_tensor(x)
    c = x.shape[1]
    for name in ("gamma", "beta", "running_mean", "running_var"):
        if getattr(bn, name).shape != (c,):
            raise DimensionError(f"axis c: {name} has shape {getattr(bn, name).shape}, input has {c} channels")


def batch_norm(x: Tensor, bn: BnParams, update_running: bool = True) -> Tensor:
    """Per-channel normalization followed by the learnable affine map.

    In training mode the batch statistics over (n, h, w) are used and, unless
    ``update_running`` is False, folded into the running estimates in place.
    """
    _check_bn(x, bn)
    if bn.mode == "training":
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise DimensionError("training-mode batch norm needs n*h*w >= 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            m = bn.stat_momentum
            bn.running_mean[...] = m * bn.running_mean + (1 - m) * mean
            bn.running_var[...] = m * bn.running_var + (1 - m) * var
    else:
        mean, var = bn.running_mean, bn.running_var
    inv = 1.0 / np.sqrt(var + bn.epsilon)
    scale = (bn.gamma * inv).astype(x.dtype, copy=False)
    shift = (bn.beta - mean * bn.gamma * inv).astype(x.dtype, copy=False)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batch_norm_backward(grad_out: Tensor, x: Tensor, bn: BnParams):
    """Returns ``(grad_input, grad_gamma, grad_beta)`` for the mode in ``bn``."""
    axes = (0, 2, 3)
    if bn.mode == "training":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv = (1.0 / np.sqrt(var + bn.epsilon))[None, :, None, None]
    xhat = (x - mean[None, :, None, None]) * inv
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * bn.gamma[None, :, None, None]
    if bn.mode == "inference":
        return dxhat * inv, grad_gamma, grad_beta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    grad_x = inv / m * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return grad_x.astype(x.dtype, copy=False), grad_gamma, grad_beta


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return grad_out * (x > 0)


def eltwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"eltwise operands differ: {a.shape} vs {b.shape}")
    return a + b


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) < 2:
        raise DimensionError("concat needs at least two parts")
    ref = parts[0].shape
    for k, t in enumerate(parts[1:], 1):
        check_tensor(t, f"part {k}")
        for axis in (0, 2, 3):
            if t.shape[axis] != ref[axis]:
                raise DimensionError(
                    f"concat part {k}: axis {'nchw'[axis]} is {t.shape[axis]}, part 0 has {ref[axis]}"
                )
    return np.concatenate(parts, axis=1)


def concat_backward(grad_out: Tensor, channels: Sequence[int]) -> list[Tensor]:
    bounds = np.cumsum(channels)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, bounds, axis=1)]


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave ``groups`` channel groups (reshape, transpose, flatten)."""
    check_tensor(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{c} channels are not divisible into {groups} groups")
    return np.ascontiguousarray(
        x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4)
    ).reshape(n, c, h, w)


def channel_shuffle_backward(grad_out: Tensor, groups: int) -> Tensor:
    return channel_shuffle(grad_out, grad_out.shape[1] // groups)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    check_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"channel slice [{start}:{stop}] outside 0..{x.shape[1]}")
    return np.ascontiguousarray(x[:, start:stop])


def slice_channels_backward(grad_out: Tensor, input_shape, start: int) -> Tensor:
    grad = np.zeros(input_shape, grad_out.dtype)
    grad[:, start : start + grad_out.shape[1]] = grad_out
    return grad


def fully_connected(x: Tensor, weights: np.ndarray, bias=None) -> Tensor:
    """Affine classifier: ``(n, c, 1, 1) @ (c, classes) -> (n, classes, 1, 1)``."""
    check_tensor(x)
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise DimensionError(f"fully_connected expects 1x1 spatial input, got {h}x{w}")
    if weights.ndim != 2 or weights.shape[0] != c:
        raise DimensionError(f"weights shape {weights.shape} incompatible with {c} input features")
    out = x.reshape(n, c) @ weights
    if bias is not None:
        if np.shape(bias) != (weights.shape[1],):
            raise DimensionError(f"bias shape {np.shape(bias)} != ({weights.shape[1]},)")
        out = out + bias
    return out.reshape(n, -1, 1, 1)


def fully_connected_backward(grad_out: Tensor, x: Tensor, weights: np.ndarray):
    n = x.shape[0]
    g = grad_out.reshape(n, -1)
    x2 = x.reshape(n, -1)
    return (g @ weights.T).reshape(x.shape), x2.T @ g, g.sum(axis=0)


@dataclass
class OpContext:
    """What a backward pass needs from the matching forward call."""

    inputs: list[Tensor]
    attrs: Mapping[str, Any] = field(default_factory=dict)
    params: Mapping[str, Any] = field(default_factory=dict)
    saved: Mapping[str, Any] = field(default_factory=dict)


def op_backward(kind: str, grad_out: Tensor, ctx: OpContext | None):
    """Dispatch to the analytic backward of ``kind``.

    Returns ``(grad_inputs, grad_params)``: a list aligned with
    ``ctx.inputs`` and a dict keyed like ``ctx.params``.
    """
    if ctx is None:
        raise StateError(f"{kind}: backward called without a cached forward context")
    a, prm = ctx.attrs, ctx.params
    x = ctx.inputs[0]
    if kind in ("conv", "dwconv"):
        p = a["conv"]
        gx, gw, gb = conv2d_backward(grad_out, x, prm["weight"], p)
        grads = {"weight": gw}
        if gb is not None:
            grads["bias"] = gb
        return [gx], grads
    if kind == "maxpool":
        if "argmax" not in ctx.saved:
            raise StateError("maxpool: argmax map missing from context")
        return [maxpool2d_backward(grad_out, ctx.saved["argmax"], x.shape)], {}
    if kind == "avgpool":
        return [avgpool2d_backward(grad_out, x.shape, a["kernel"], a["stride"], a["pad"])], {}
    if kind == "gap":
        return [global_avg_pool_backward(grad_out, x.shape)], {}
    if kind == "bn":
        gx, gg, gb = batch_norm_backward(grad_out, x, prm["bn"])
        return [gx], {"gamma": gg, "beta": gb}
    if kind == "relu":
        return [relu_backward(grad_out, x)], {}
    if kind == "eltwise":
        return [grad_out, grad_out], {}
    if kind == "concat":
        return concat_backward(grad_out, [t.shape[1] for t in ctx.inputs]), {}
    if kind == "shuffle":
        return [channel_shuffle_backward(grad_out, a["groups"])], {}
    if kind == "slice":
        return [slice_channels_backward(grad_out, x.shape, a["start"])], {}
    if kind == "fc":
        gx, gw, gb = fully_connected_backward(grad_out, x, prm["weight"])
        return [gx], {"weight": gw, "bias": gb}
    raise ConfigurationError(f"no backward for layer kind {kind!r}")
