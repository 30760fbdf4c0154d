"""Dense NCHW tensor kernels used by the network: convolution, inference-mode
batch norm, activations, upsampling and channel concatenation.

Tensors are plain 4-D numpy arrays laid out as (batch, channels, height,
width). Kernels compute in the result dtype of their operands, so float32
inputs stay float32 and float64 inputs can be used to tighten equivalence
checks. Nothing is broadcast implicitly; shape mismatches raise.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError, ValidationError

DEFAULT_DTYPE = np.float32


def check_tensor(x, name="input"):
    """Validate a 4-D finite tensor and return it as an ndarray."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channels, height, width), got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        raise ValidationError(f"{name} must be a floating point tensor, got {x.dtype}")
    if not np.isfinite(x).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return x


def _frozen(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ConvParams:
    """Weights and geometry of a 2-D convolution.

    ``weight`` has shape (out_channels, in_channels // groups, kh, kw).
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4:
            raise ConfigError(f"conv weight must be 4-D, got shape {w.shape}")
        object.__setattr__(self, "weight", _frozen(w))
        if self.bias is not None:
            b = np.asarray(self.bias)
            if b.shape != (w.shape[0],):
                raise ConfigError(f"conv bias shape {b.shape} does not match out_channels {w.shape[0]}")
            object.__setattr__(self, "bias", _frozen(b))
        if self.stride < 1 or self.dilation < 1:
            raise ConfigError(f"stride and dilation must be >= 1, got {self.stride}, {self.dilation}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1 or w.shape[0] % self.groups:
            raise ConfigError(f"out_channels {w.shape[0]} not divisible by groups {self.groups}")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self):
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, height, width):
        kh, kw = self.kernel_size
        d, p, s = self.dilation, self.padding, self.stride
        return ((height + 2 * p - d * (kh - 1) - 1) // s + 1,
                (width + 2 * p - d * (kw - 1) - 1) // s + 1)

    def replace(self, **changes):
        kw = dict(weight=self.weight, bias=self.bias, stride=self.stride, padding=self.padding,
                  dilation=self.dilation, groups=self.groups)
        kw.update(changes)
        return ConvParams(**kw)


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.gamma, self.beta, self.running_mean, self.running_var)]
        n = arrays[0].shape
        if len(n) != 1 or any(a.shape != n for a in arrays):
            raise ConfigError(f"batch norm arrays must be 1-D of equal length, got {[a.shape for a in arrays]}")
        if (arrays[3] < 0).any():
            raise ConfigError("running_var must be non-negative")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        for name, a in zip(("gamma", "beta", "running_mean", "running_var"), arrays):
            object.__setattr__(self, name, _frozen(a))

    @property
    def channels(self):
        return self.gamma.shape[0]

    def scale_shift(self):
        """Per-channel (scale, shift) such that bn(x) = scale * x + shift."""
        scale = self.gamma / np.sqrt(self.running_var + self.epsilon)
        return scale, self.beta - self.running_mean * scale


def conv2d(x, params: ConvParams):
    """Grouped, strided, dilated cross-correlation with zero padding."""
    x = check_tensor(x)
    batch, channels, height, width = x.shape
    if channels != params.in_channels:
        raise ShapeError(
            f"input shape {x.shape} does not match conv weight shape {params.weight.shape} "
            f"(groups={params.groups}, expects {params.in_channels} input channels)")
    h_out, w_out = params.output_hw(height, width)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv with weight {params.weight.shape} produces empty output on input {x.shape}")

    w = params.weight
    dtype = np.result_type(x.dtype, w.dtype)
    p, s, d, g = params.padding, params.stride, params.dilation, params.groups
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cin_g = channels // g
    cout_g = params.out_channels // g
    kh, kw = params.kernel_size
    xg = x.reshape(batch, g, cin_g, x.shape[2], x.shape[3])
    wg = w.reshape(g, cout_g, cin_g, kh, kw).astype(dtype, copy=False)
    out = np.zeros((batch, g, cout_g, h_out, w_out), dtype=dtype)
    row_span = s * (h_out - 1) + 1
    col_span = s * (w_out - 1) + 1
    # fixed tap order keeps accumulation deterministic
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * d, j * d
            patch = xg[:, :, :, r0:r0 + row_span:s, c0:c0 + col_span:s]
            if cin_g == 1 and cout_g == 1:
                out += wg[None, :, :, 0, i, j, None, None] * patch
            else:
                flat = patch.reshape(batch, g, cin_g, h_out * w_out)
                out += np.matmul(wg[None, :, :, :, i, j], flat).reshape(out.shape)
    out = out.reshape(batch, params.out_channels, h_out, w_out)
    if params.bias is not None:
        out += params.bias.astype(dtype)[None, :, None, None]
    return out


def depthwise_conv2d(x, params: ConvParams):
    """Per-channel convolution; channel c of the output only sees channel c."""
    if not params.is_depthwise:
        raise ConfigError(
            f"depthwise conv needs groups == in_channels == out_channels, got groups={params.groups}, "
            f"in={params.in_channels}, out={params.out_channels}")
    return conv2d(x, params)


def batchnorm_inference(x, bn: BatchNormParams):
    x = check_tensor(x)
    if bn.channels != x.shape[1]:
        raise ConfigError(f"batch norm has {bn.channels} channels, input has {x.shape[1]}")
    dtype = np.result_type(x.dtype, bn.gamma.dtype)
    scale, shift = bn.scale_shift()
    return x * scale.astype(dtype)[None, :, None, None] + shift.astype(dtype)[None, :, None, None]


def fold_bn_into_conv(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Absorb an inference-mode batch norm that follows ``conv`` into its weights."""
    if bn.channels != conv.out_channels:
        raise ConfigError(f"batch norm has {bn.channels} channels, conv has {conv.out_channels} outputs")
    dtype = np.result_type(conv.weight.dtype, bn.gamma.dtype)
    scale = bn.gamma.astype(dtype) / np.sqrt(bn.running_var.astype(dtype) + dtype.type(bn.epsilon))
    bias = np.zeros(conv.out_channels, dtype) if conv.bias is None else conv.bias.astype(dtype)
    weight = conv.weight.astype(dtype) * scale[:, None, None, None]
    return conv.replace(weight=weight, bias=bn.beta.astype(dtype) + (bias - bn.running_mean) * scale)


def relu(x):
    x = check_tensor(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    x = check_tensor(x)
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype, copy=False)


def tanh(x):
    x = check_tensor(x)
    return np.tanh(x)


def softmax_channels(x):
    x = check_tensor(x)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _bilinear_axis(n_in, factor):
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = np.maximum((dst + 0.5) / factor - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample_bilinear(x, factor=2, mode="bilinear"):
    """Integer-factor upsampling; bilinear uses align_corners=False geometry."""
    x = check_tensor(x)
    if int(factor) != factor or factor < 2:
        raise ConfigError(f"upsampling factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    if mode == "nearest":
        return x.repeat(factor, axis=2).repeat(factor, axis=3)
    if mode != "bilinear":
        raise ConfigError(f"unknown upsampling mode {mode!r}")
    dtype = x.dtype
    r0, r1, fr = _bilinear_axis(x.shape[2], factor)
    c0, c1, fc = _bilinear_axis(x.shape[3], factor)
    fr = fr.astype(dtype)[None, None, :, None]
    fc = fc.astype(dtype)[None, None, None, :]
    rows = x[:, :, r0, :] * (1 - fr) + x[:, :, r1, :] * fr
    return rows[:, :, :, c0] * (1 - fc) + rows[:, :, :, c1] * fc


def concat_channels(a, b):
    a = check_tensor(a, "a")
    b = check_tensor(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: batch/height/width differ")
    return np.concatenate([a, b], axis=1)
