"""Large-kernel block with parallel dilated branches and its fused form.

A block computes::

    y = pre_1x1(x)                                   (optional)
    y = BN(dw_KxK(y)) + sum_i BN_i(dw_{k_i, r_i}(y))  (linear, fusible core)
    y = GELU(y)
    y = post_1x1(y)                                  (optional)
    y = ReLU(y)

Every branch is padded to "same" output size, so the core can be collapsed
into a single K x K depthwise kernel with bias by :func:`reparameterize`.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DomainError, ShapeError
from .tensor_core import BatchNormParams, ConvParams

DEFAULT_BRANCHES = ((5, 1), (3, 2), (3, 3))


def dw_kernel_footprint(d):
    """Effective kernel size (2d - 1, 2d - 1) of a depthwise conv at dilation ``d``."""
    if int(d) != d or d < 1:
        raise DomainError(f"dilation rate must be an integer >= 1, got {d}")
    size = 2 * int(d) - 1
    return size, size


def reparam_footprint(d, m, k):
    """Size (2d - 1)^2 * m * k^2 of a depthwise conv merged with ``m`` parallel k x k kernels."""
    for name, v in (("d", d), ("m", m), ("k", k)):
        if int(v) != v or v < 1:
            raise DomainError(f"{name} must be an integer >= 1, got {v}")
    side = dw_kernel_footprint(d)[0]
    return side * side * int(m) * int(k) * int(k)


def dilated_extent(k, r):
    return (k - 1) * r + 1


def dilated_to_dense_kernel(kernel, dilation, target):
    """Embed a k x k kernel with dilation ``dilation`` into a dense ``target`` x ``target`` kernel.

    Works on the trailing two axes, so whole (C, 1, k, k) weight arrays can be
    passed. Taps land at stride ``dilation`` around the centre.
    """
    kernel = np.asarray(kernel)
    k = kernel.shape[-1]
    if kernel.ndim < 2 or kernel.shape[-2] != k:
        raise ConfigError(f"kernel must be square on its last two axes, got {kernel.shape}")
    if k % 2 == 0 or target % 2 == 0:
        raise ConfigError(f"kernel sizes must be odd, got k={k}, target={target}")
    extent = dilated_extent(k, dilation)
    if extent > target:
        raise ConfigError(f"dilated extent (k-1)*r+1 = {extent} exceeds target kernel size {target}")
    dense = np.zeros(kernel.shape[:-2] + (target, target), dtype=kernel.dtype)
    start = (target - extent) // 2
    stop = start + extent
    dense[..., start:stop:dilation, start:stop:dilation] = kernel
    return dense


def dense_to_dilated_kernel(dense, k, dilation):
    """Read back the strided taps written by :func:`dilated_to_dense_kernel`."""
    target = dense.shape[-1]
    extent = dilated_extent(k, dilation)
    start = (target - extent) // 2
    return dense[..., start:start + extent:dilation, start:start + extent:dilation]


@dataclass(frozen=True)
class LKBlockConfig:
    channels: int
    kernel_size: int = 13
    branches: Tuple[Tuple[int, int], ...] = DEFAULT_BRANCHES
    pre_pointwise: bool = True
    post_pointwise: bool = True
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple((int(k), int(r)) for k, r in self.branches))
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"large kernel size must be odd, got {self.kernel_size}")
        for k, r in self.branches:
            if k < 1 or k % 2 == 0 or r < 1:
                raise ConfigError(f"branch (k={k}, r={r}) needs odd k >= 1 and r >= 1")
            if dilated_extent(k, r) > self.kernel_size:
                raise ConfigError(
                    f"branch (k={k}, r={r}) has extent {dilated_extent(k, r)} > K={self.kernel_size}")
        if not self.pre_pointwise and self.in_channels not in (None, self.channels):
            raise ConfigError("in_channels differs from channels but pre_pointwise is disabled")
        if not self.post_pointwise and self.out_channels not in (None, self.channels):
            raise ConfigError("out_channels differs from channels but post_pointwise is disabled")

    @property
    def input_channels(self):
        return self.channels if self.in_channels is None else self.in_channels

    @property
    def output_channels(self):
        return self.channels if self.out_channels is None else self.out_channels


@dataclass(frozen=True, eq=False)
class DilatedBranch:
    kernel_size: int
    dilation: int
    conv: ConvParams
    bn: BatchNormParams


def _apply_pointwise(conv, x):
    return x if conv is None else tc.conv2d(x, conv)


def _check_input(x, expected):
    x = tc.check_tensor(x)
    if x.shape[1] != expected:
        raise ShapeError(f"block expects {expected} input channels, got input of shape {x.shape}")
    return x


def _activations(y, post, enabled):
    if enabled:
        y = tc.gelu(y)
    y = _apply_pointwise(post, y)
    if enabled:
        y = tc.relu(y)
    return y


@dataclass(frozen=True, eq=False)
class LKBlock:
    config: LKBlockConfig
    large_conv: ConvParams
    large_bn: BatchNormParams
    branches: Tuple[DilatedBranch, ...] = ()
    pre: Optional[ConvParams] = None
    post: Optional[ConvParams] = None

    def __post_init__(self):
        cfg = self.config
        object.__setattr__(self, "branches", tuple(self.branches))
        c, K = cfg.channels, cfg.kernel_size
        if not self.large_conv.is_depthwise or self.large_conv.in_channels != c:
            raise ConfigError(f"large kernel must be depthwise over {c} channels")
        if self.large_conv.kernel_size != (K, K) or self.large_conv.padding != K // 2:
            raise ConfigError(f"large kernel must be {K}x{K} with padding {K // 2}")
        if len(self.branches) != len(cfg.branches):
            raise ConfigError(f"config lists {len(cfg.branches)} branches, block has {len(self.branches)}")
        for (k, r), br in zip(cfg.branches, self.branches):
            conv = br.conv
            if (br.kernel_size, br.dilation) != (k, r) or conv.kernel_size != (k, k) or conv.dilation != r:
                raise ConfigError(f"branch geometry does not match config entry (k={k}, r={r})")
            if not conv.is_depthwise or conv.in_channels != c or conv.padding != r * (k - 1) // 2:
                raise ConfigError(f"branch (k={k}, r={r}) must be depthwise with padding {r * (k - 1) // 2}")
        if (self.pre is None) == cfg.pre_pointwise or (self.post is None) == cfg.post_pointwise:
            raise ConfigError("pointwise convs do not match the pre/post flags of the config")

    def core(self, y):
        """The linear multi-branch depthwise core."""
        out = tc.batchnorm_inference(tc.depthwise_conv2d(y, self.large_conv), self.large_bn)
        for br in self.branches:
            out = out + tc.batchnorm_inference(tc.depthwise_conv2d(y, br.conv), br.bn)
        return out

    def forward(self, x, activations=True):
        x = _check_input(x, self.config.input_channels)
        y = self.core(_apply_pointwise(self.pre, x))
        return _activations(y, self.post, activations)

    __call__ = forward

    def named_parameters(self, prefix=""):
        yield from _named_conv(prefix + "pre.", self.pre)
        yield from _named_conv(prefix + "large.conv.", self.large_conv)
        yield from _named_bn(prefix + "large.bn.", self.large_bn)
        for i, br in enumerate(self.branches):
            yield from _named_conv(f"{prefix}branches.{i}.conv.", br.conv)
            yield from _named_bn(f"{prefix}branches.{i}.bn.", br.bn)
        yield from _named_conv(prefix + "post.", self.post)


@dataclass(frozen=True, eq=False)
class FusedBlock:
    config: LKBlockConfig
    core_conv: ConvParams
    pre: Optional[ConvParams] = None
    post: Optional[ConvParams] = None

    def __post_init__(self):
        K, c = self.config.kernel_size, self.config.channels
        conv = self.core_conv
        if conv.kernel_size != (K, K) or not conv.is_depthwise or conv.in_channels != c or conv.bias is None:
            raise ConfigError(f"fused core must be a {K}x{K} depthwise conv with bias over {c} channels")

    def core(self, y):
        return tc.depthwise_conv2d(y, self.core_conv)

    def forward(self, x, activations=True):
        x = _check_input(x, self.config.input_channels)
        y = self.core(_apply_pointwise(self.pre, x))
        return _activations(y, self.post, activations)

    __call__ = forward

    def named_parameters(self, prefix=""):
        yield from _named_conv(prefix + "pre.", self.pre)
        yield from _named_conv(prefix + "core.", self.core_conv)
        yield from _named_conv(prefix + "post.", self.post)


def _named_conv(prefix, conv):
    if conv is None:
        return
    yield prefix + "weight", conv.weight
    if conv.bias is not None:
        yield prefix + "bias", conv.bias


def _named_bn(prefix, bn):
    yield prefix + "gamma", bn.gamma
    yield prefix + "beta", bn.beta
    yield prefix + "running_mean", bn.running_mean
    yield prefix + "running_var", bn.running_var


def forward_multibranch(block: LKBlock, x, activations=True):
    return block.forward(x, activations=activations)


def reparameterize(block: LKBlock) -> FusedBlock:
    """Collapse the BN-folded large kernel and all dilated branches into one K x K kernel."""
    K = block.config.kernel_size
    large = tc.fold_bn_into_conv(block.large_conv, block.large_bn)
    weight = large.weight.copy()
    bias = large.bias.copy()
    for br in block.branches:
        folded = tc.fold_bn_into_conv(br.conv, br.bn)
        weight += dilated_to_dense_kernel(folded.weight, br.dilation, K)
        bias += folded.bias
    core = ConvParams(weight, bias, padding=K // 2, groups=block.config.channels)
    return FusedBlock(block.config, core, block.pre, block.post)


def block_parameter_specs(config: LKBlockConfig, fused=False):
    """(name, shape, kind, fan_in) for every tensor of a block, in canonical order.

    ``kind`` is one of ``conv_weight``, ``conv_bias``, ``bn_gamma``,
    ``bn_beta``, ``bn_mean``, ``bn_var``.
    """
    c, K = config.channels, config.kernel_size
    specs = []

    def conv(prefix, out_c, in_c, k, bias):
        fan_in = in_c * k * k
        specs.append((prefix + "weight", (out_c, in_c, k, k), "conv_weight", fan_in))
        if bias:
            specs.append((prefix + "bias", (out_c,), "conv_bias", fan_in))

    def bn(prefix):
        for suffix, kind in (("gamma", "bn_gamma"), ("beta", "bn_beta"),
                             ("running_mean", "bn_mean"), ("running_var", "bn_var")):
            specs.append((prefix + suffix, (c,), kind, None))

    if config.pre_pointwise:
        conv("pre.", c, config.input_channels, 1, True)
    if fused:
        conv("core.", c, 1, K, True)
    else:
        conv("large.conv.", c, 1, K, False)
        bn("large.bn.")
        for i, (k, _) in enumerate(config.branches):
            conv(f"branches.{i}.conv.", c, 1, k, False)
            bn(f"branches.{i}.bn.")
    if config.post_pointwise:
        conv("post.", config.output_channels, c, 1, True)
    return specs


def assemble_block(config: LKBlockConfig, tensors, fused=False, epsilon=1e-5):
    """Build a block from a mapping of relative tensor name -> array."""
    c, K = config.channels, config.kernel_size
    pre = post = None
    if config.pre_pointwise:
        pre = ConvParams(tensors["pre.weight"], tensors["pre.bias"])
    if config.post_pointwise:
        post = ConvParams(tensors["post.weight"], tensors["post.bias"])
    if fused:
        core = ConvParams(tensors["core.weight"], tensors["core.bias"], padding=K // 2, groups=c)
        return FusedBlock(config, core, pre, post)

    def bn(prefix):
        return BatchNormParams(tensors[prefix + "gamma"], tensors[prefix + "beta"],
                               tensors[prefix + "running_mean"], tensors[prefix + "running_var"], epsilon)

    large = ConvParams(tensors["large.conv.weight"], padding=K // 2, groups=c)
    branches = []
    for i, (k, r) in enumerate(config.branches):
        conv = ConvParams(tensors[f"branches.{i}.conv.weight"], padding=r * (k - 1) // 2, dilation=r, groups=c)
        branches.append(DilatedBranch(k, r, conv, bn(f"branches.{i}.bn.")))
    return LKBlock(config, large, bn("large.bn."), tuple(branches), pre, post)


def block_param_count(config: LKBlockConfig, fused=False):
    """Learnable parameters (BN running statistics excluded)."""
    c, K = config.channels, config.kernel_size
    n = 0
    if config.pre_pointwise:
        n += c * config.input_channels + c
    if fused:
        n += c * K * K + c
    else:
        n += c * K * K + 2 * c
        n += sum(c * k * k + 2 * c for k, _ in config.branches)
    if config.post_pointwise:
        n += config.output_channels * c + config.output_channels
    return n
