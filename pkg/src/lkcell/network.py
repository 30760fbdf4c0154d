"""Encoder / single-decoder segmentation network built from large-kernel blocks.

Layout for an input of size H x W (C = stage widths, S = stem width = C1 / 2)::

    stem      conv3x3/2 + BN + GELU                    -> skip0  S  x H/2
    stage i   conv3x3/2 + BN, then N_i LK blocks       -> skip_i C_i x H/2^(i+1)
    decoder   F = skip4; for Z in (skip3, skip2, skip1, skip0):
                  F = proj1x1(cat(up2(LKBlock(F)), Z))
    fusion    up2(F) + conv3x3(ReLU(conv3x3(image)))   -> S x H
    heads     1x1 convs -> NP (softmax), HV (tanh), NT (softmax)
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import rng
from . import tensor_core as tc
from .errors import ConfigError, ShapeError
from .lk_block import (DEFAULT_BRANCHES, FusedBlock, LKBlock, LKBlockConfig, assemble_block,
                       block_parameter_specs, reparameterize)
from .tensor_core import BatchNormParams, ConvParams

BN_EPSILON = 1e-5
DOWNSAMPLE_FACTOR = 32


@dataclass(frozen=True)
class NetworkConfig:
    variant: str
    stage_depths: Tuple[int, int, int, int]
    stage_channels: Tuple[int, int, int, int] = (64, 128, 256, 512)
    num_classes: int = 6
    kernel_sizes: Tuple[int, int, int, int] = (13, 13, 13, 13)
    decoder_kernel_sizes: Tuple[int, int, int, int] = (13, 13, 13, 13)
    branches: Tuple[Tuple[int, int], ...] = DEFAULT_BRANCHES
    stem_channels: Optional[int] = None
    in_channels: int = 3

    def __post_init__(self):
        for name in ("stage_depths", "stage_channels", "kernel_sizes", "decoder_kernel_sizes"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"{name} must have 4 entries, got {value}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "branches", tuple((int(k), int(r)) for k, r in self.branches))
        if min(self.stage_depths) < 1:
            raise ConfigError(f"stage depths must be >= 1, got {self.stage_depths}")
        if min(self.stage_channels) < 1:
            raise ConfigError(f"stage channels must be >= 1, got {self.stage_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes counts background and must be >= 2, got {self.num_classes}")
        if self.stem_channels is None:
            object.__setattr__(self, "stem_channels", max(1, self.stage_channels[0] // 2))
        # validate every block geometry up front
        for K in self.kernel_sizes + self.decoder_kernel_sizes:
            LKBlockConfig(1, K, self.branches)

    def encoder_block_config(self, stage):
        return LKBlockConfig(self.stage_channels[stage], self.kernel_sizes[stage], self.branches)

    def decoder_widths(self):
        """(input channels, skip channels, output width) per decoder stage."""
        skips = (self.stem_channels,) + self.stage_channels
        out = []
        prev = skips[4]
        for j in range(4):
            z = skips[3 - j]
            out.append((prev, z, z))
            prev = z
        return out

    def decoder_block_config(self, stage):
        prev = self.decoder_widths()[stage][0]
        return LKBlockConfig(prev, self.decoder_kernel_sizes[stage], self.branches)

    def to_dict(self):
        return {
            "variant": self.variant,
            "stage_depths": list(self.stage_depths),
            "stage_channels": list(self.stage_channels),
            "num_classes": self.num_classes,
            "kernel_sizes": list(self.kernel_sizes),
            "decoder_kernel_sizes": list(self.decoder_kernel_sizes),
            "branches": [list(b) for b in self.branches],
            "stem_channels": self.stem_channels,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["branches"] = tuple(tuple(b) for b in d.get("branches", DEFAULT_BRANCHES))
        return cls(**d)


PRESETS = {
    "lkcell-b": NetworkConfig("lkcell-b", (2, 2, 8, 2)),
    "lkcell-l": NetworkConfig("lkcell-l", (3, 3, 27, 3)),
    "toy": NetworkConfig("toy", (1, 1, 1, 1), (8, 16, 32, 64)),
}

# Params (M) / FLOPs (G) published for the two variants, shown for reference only.
PUBLISHED_REFERENCE = {"lkcell-b": (122.53, 46.25), "lkcell-l": (163.84, 47.86)}


def get_config(name):
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown config {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True, eq=False)
class SegmentationOutput:
    """NP (B, 2, H, W), HV (B, 2, H, W) and NT (B, num_classes, H, W) maps.

    NP channel 1 is the nucleus probability; HV channel 0 is horizontal
    (along columns), channel 1 vertical; NT channel 0 is background.
    """

    np_map: np.ndarray
    hv_map: np.ndarray
    nt_map: np.ndarray

    def __post_init__(self):
        shapes = [np.shape(self.np_map), np.shape(self.hv_map), np.shape(self.nt_map)]
        if any(len(s) != 4 for s in shapes):
            raise ShapeError(f"segmentation maps must be 4-D, got {shapes}")
        if len({(s[0], s[2], s[3]) for s in shapes}) != 1:
            raise ShapeError(f"segmentation maps disagree on batch/height/width: {shapes}")
        if shapes[0][1] != 2 or shapes[1][1] != 2:
            raise ShapeError(f"NP and HV maps need 2 channels, got {shapes[0][1]} and {shapes[1][1]}")

    @property
    def num_classes(self):
        return self.nt_map.shape[1]

    def image(self, index):
        return SegmentationOutput(self.np_map[index:index + 1], self.hv_map[index:index + 1],
                                  self.nt_map[index:index + 1])


@dataclass(frozen=True, eq=False)
class ConvBN:
    conv: ConvParams
    bn: BatchNormParams

    def __call__(self, x):
        return tc.batchnorm_inference(tc.conv2d(x, self.conv), self.bn)


@dataclass(frozen=True, eq=False)
class EncoderStage:
    down: ConvBN
    blocks: tuple


@dataclass(frozen=True, eq=False)
class DecoderStage:
    block: object
    proj: ConvParams

    def __call__(self, f_prev, z):
        return decoder_stage(f_prev, z, self)


@dataclass(frozen=True, eq=False)
class Network:
    config: NetworkConfig
    stem: ConvBN
    stages: tuple
    decoder: tuple
    skip_conv1: ConvParams
    skip_conv2: ConvParams
    heads: Dict[str, ConvParams]
    fused: bool = False

    def __post_init__(self):
        if len(self.stages) != 4 or len(self.decoder) != len(self.stages):
            raise ConfigError(f"network needs 4 encoder and 4 decoder stages, got "
                              f"{len(self.stages)} and {len(self.decoder)}")

    def named_parameters(self):
        yield from _conv_bn_params("encoder.stem.", self.stem)
        for i, st in enumerate(self.stages):
            yield from _conv_bn_params(f"encoder.stages.{i}.down.", st.down)
            for j, blk in enumerate(st.blocks):
                yield from blk.named_parameters(f"encoder.stages.{i}.blocks.{j}.")
        for j, st in enumerate(self.decoder):
            yield from st.block.named_parameters(f"decoder.stages.{j}.block.")
            yield f"decoder.stages.{j}.proj.weight", st.proj.weight
            yield f"decoder.stages.{j}.proj.bias", st.proj.bias
        for name, conv in (("input_skip.conv1.", self.skip_conv1), ("input_skip.conv2.", self.skip_conv2)):
            yield name + "weight", conv.weight
            yield name + "bias", conv.bias
        for head in ("np", "hv", "nt"):
            yield f"heads.{head}.weight", self.heads[head].weight
            yield f"heads.{head}.bias", self.heads[head].bias

    def state_dict(self):
        return dict(self.named_parameters())

    def checksum(self):
        """Order-independent content hash of all weights (hex string)."""
        import hashlib
        h = hashlib.sha256()
        for name, arr in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def encoder_forward(self, image):
        return encoder_forward(self, image)

    def forward(self, image):
        return forward(self, image)

    __call__ = forward

    def reparameterize(self):
        """Copy of the network with every LK block collapsed to its fused kernel."""
        if self.fused:
            return self
        stages = tuple(EncoderStage(st.down, tuple(reparameterize(b) for b in st.blocks)) for st in self.stages)
        decoder = tuple(DecoderStage(reparameterize(st.block), st.proj) for st in self.decoder)
        return replace(self, stages=stages, decoder=decoder, fused=True)

    def blocks(self):
        for st in self.stages:
            yield from st.blocks
        for st in self.decoder:
            yield st.block


def _conv_bn_params(prefix, cb):
    yield prefix + "conv.weight", cb.conv.weight
    for s in ("gamma", "beta", "running_mean", "running_var"):
        yield prefix + "bn." + s, getattr(cb.bn, s)


def parameter_specs(config: NetworkConfig, fused=False):
    """(name, shape, kind, fan_in) for every stored tensor, in canonical order."""
    specs = []

    def conv(prefix, out_c, in_c, k, bias):
        specs.append((prefix + "weight", (out_c, in_c, k, k), "conv_weight", in_c * k * k))
        if bias:
            specs.append((prefix + "bias", (out_c,), "conv_bias", in_c * k * k))

    def conv_bn(prefix, out_c, in_c, k):
        conv(prefix + "conv.", out_c, in_c, k, False)
        for s, kind in (("gamma", "bn_gamma"), ("beta", "bn_beta"), ("running_mean", "bn_mean"),
                        ("running_var", "bn_var")):
            specs.append((prefix + "bn." + s, (out_c,), kind, None))

    conv_bn("encoder.stem.", config.stem_channels, config.in_channels, 3)
    prev = config.stem_channels
    for i in range(4):
        c = config.stage_channels[i]
        conv_bn(f"encoder.stages.{i}.down.", c, prev, 3)
        for j in range(config.stage_depths[i]):
            for name, shape, kind, fan in block_parameter_specs(config.encoder_block_config(i), fused):
                specs.append((f"encoder.stages.{i}.blocks.{j}.{name}", shape, kind, fan))
        prev = c
    for j, (f_c, z_c, width) in enumerate(config.decoder_widths()):
        for name, shape, kind, fan in block_parameter_specs(config.decoder_block_config(j), fused):
            specs.append((f"decoder.stages.{j}.block.{name}", shape, kind, fan))
        conv(f"decoder.stages.{j}.proj.", width, f_c + z_c, 1, True)
    s = config.stem_channels
    conv("input_skip.conv1.", s, config.in_channels, 3, True)
    conv("input_skip.conv2.", s, s, 3, True)
    conv("heads.np.", 2, s, 1, True)
    conv("heads.hv.", 2, s, 1, True)
    conv("heads.nt.", config.num_classes, s, 1, True)
    return specs


# (low, high) of the uniform draw per tensor kind; conv kinds use +-1/sqrt(fan_in)
BN_INIT_RANGES = {
    "bn_gamma": (0.8, 1.2),
    "bn_beta": (-0.1, 0.1),
    "bn_mean": (-0.1, 0.1),
    "bn_var": (0.5, 1.5),
}


def seeded_tensor(name, shape, kind, fan_in, seed, dtype=np.float32):
    """Fan-in scaled uniform value for one named tensor (see :mod:`lkcell.rng`)."""
    if kind in ("conv_weight", "conv_bias"):
        bound = 1.0 / np.sqrt(fan_in)
        low, high = -bound, bound
    else:
        low, high = BN_INIT_RANGES[kind]
    return rng.uniform(name, seed, shape, low, high, dtype)


def assemble_network(config: NetworkConfig, tensor_for, fused=False):
    """Build a network, fetching each tensor via ``tensor_for(name, shape, kind, fan_in)``.

    Tensors are requested in canonical order; a ``tensor_for`` that raises
    aborts the build, so no partial network is ever returned.
    """
    tensors = {}
    for name, shape, kind, fan in parameter_specs(config, fused):
        arr = np.asarray(tensor_for(name, shape, kind, fan))
        if arr.shape != tuple(shape):
            raise ConfigError(f"tensor {name} has shape {arr.shape}, layer expects {tuple(shape)}")
        tensors[name] = arr

    def sub(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}

    def conv_bn(prefix, stride):
        t = sub(prefix)
        conv = ConvParams(t["conv.weight"], stride=stride, padding=1)
        bn = BatchNormParams(t["bn.gamma"], t["bn.beta"], t["bn.running_mean"], t["bn.running_var"], BN_EPSILON)
        return ConvBN(conv, bn)

    stem = conv_bn("encoder.stem.", 2)
    stages = []
    for i in range(4):
        blocks = tuple(assemble_block(config.encoder_block_config(i), sub(f"encoder.stages.{i}.blocks.{j}."),
                                      fused, BN_EPSILON)
                       for j in range(config.stage_depths[i]))
        stages.append(EncoderStage(conv_bn(f"encoder.stages.{i}.down.", 2), blocks))
    decoder = []
    for j in range(4):
        block = assemble_block(config.decoder_block_config(j), sub(f"decoder.stages.{j}.block."), fused, BN_EPSILON)
        t = sub(f"decoder.stages.{j}.proj.")
        decoder.append(DecoderStage(block, ConvParams(t["weight"], t["bias"])))
    skip1 = ConvParams(tensors["input_skip.conv1.weight"], tensors["input_skip.conv1.bias"], padding=1)
    skip2 = ConvParams(tensors["input_skip.conv2.weight"], tensors["input_skip.conv2.bias"], padding=1)
    heads = {h: ConvParams(tensors[f"heads.{h}.weight"], tensors[f"heads.{h}.bias"]) for h in ("np", "hv", "nt")}
    return Network(config, stem, tuple(stages), tuple(decoder), skip1, skip2, heads, fused)


def build_network(config: NetworkConfig, seed=0, dtype=np.float32, fused=False) -> Network:
    """Deterministically initialised network; same (config, seed) gives identical weights."""
    if isinstance(config, str):
        config = get_config(config)
    return assemble_network(
        config, lambda name, shape, kind, fan: seeded_tensor(name, shape, kind, fan, seed, dtype), fused)


def _check_image(net, image):
    image = tc.check_tensor(image, "image")
    if image.shape[1] != net.config.in_channels:
        raise ShapeError(f"image must have {net.config.in_channels} channels, got shape {image.shape}")
    h, w = image.shape[2:]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ShapeError(f"image height and width must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}; "
                         f"pad the image (e.g. reflectively) before inference")
    return image


def encoder_forward(net: Network, image) -> List[np.ndarray]:
    """Five skip tensors: the stem output followed by the four stage outputs."""
    image = _check_image(net, image)
    x = tc.gelu(net.stem(image))
    skips = [x]
    for st in net.stages:
        x = st.down(x)
        for blk in st.blocks:
            x = blk(x)
        skips.append(x)
    return skips


def decoder_stage(f_prev, z, stage: DecoderStage):
    """Block on the previous decoder feature, upsample x2, concatenate the skip, project."""
    f_prev = tc.check_tensor(f_prev, "decoder feature")
    z = tc.check_tensor(z, "skip feature")
    if z.shape[0] != f_prev.shape[0] or z.shape[2:] != (2 * f_prev.shape[2], 2 * f_prev.shape[3]):
        raise ShapeError(f"skip feature {z.shape} must be twice the spatial size of decoder feature {f_prev.shape}")
    f = stage.block(f_prev)
    f = tc.upsample_bilinear(f, 2)
    return tc.conv2d(tc.concat_channels(f, z), stage.proj)


def forward(net: Network, image) -> SegmentationOutput:
    image = _check_image(net, image)
    skips = encoder_forward(net, image)
    f = skips[4]
    for j, st in enumerate(net.decoder):
        f = decoder_stage(f, skips[3 - j], st)
    f = tc.upsample_bilinear(f, 2)
    f = f + tc.conv2d(tc.relu(tc.conv2d(image, net.skip_conv1)), net.skip_conv2)
    np_map = tc.softmax_channels(tc.conv2d(f, net.heads["np"]))
    hv_map = tc.tanh(tc.conv2d(f, net.heads["hv"]))
    nt_map = tc.softmax_channels(tc.conv2d(f, net.heads["nt"]))
    return SegmentationOutput(np_map, hv_map, nt_map)
