"""Analytic parameter and FLOP accounting for :class:`NetworkConfig`.

Conventions:

* params are learnable values: conv weights and biases, BN gamma and beta
  (running statistics are buffers and not counted);
* a conv costs ``out_c * in_c / groups * kh * kw * H_out * W_out`` MACs and
  2 FLOPs per MAC;
* bias add, BN, activations, branch sums, upsampling, the fusion add,
  softmax and tanh each cost 1 FLOP per output element.
"""

from dataclasses import dataclass
from typing import List

from .lk_block import LKBlockConfig
from .network import Network, NetworkConfig, get_config


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    elementwise: int

    @property
    def flops(self):
        return 2 * self.macs + self.elementwise


def conv_macs(out_c, in_c, kh, kw, h_out, w_out, groups=1):
    return out_c * (in_c // groups) * kh * kw * h_out * w_out


def conv_cost(name, out_c, in_c, k, h_out, w_out, groups=1, bias=True, kind="conv"):
    params = out_c * (in_c // groups) * k * k + (out_c if bias else 0)
    elem = out_c * h_out * w_out if bias else 0
    return LayerCost(name, kind, params, conv_macs(out_c, in_c, k, k, h_out, w_out, groups), elem)


def _block_costs(prefix, cfg: LKBlockConfig, h, w, fused):
    c = cfg.channels
    n = c * h * w
    rows = []
    if cfg.pre_pointwise:
        rows.append(conv_cost(prefix + "pre", c, cfg.input_channels, 1, h, w))
    if fused:
        rows.append(conv_cost(prefix + "core", c, c, cfg.kernel_size, h, w, groups=c, kind="dwconv"))
    else:
        K = cfg.kernel_size
        rows.append(conv_cost(prefix + "large.conv", c, c, K, h, w, groups=c, bias=False, kind="dwconv"))
        rows.append(LayerCost(prefix + "large.bn", "bn", 2 * c, 0, n))
        for i, (k, _) in enumerate(cfg.branches):
            rows.append(conv_cost(f"{prefix}branches.{i}.conv", c, c, k, h, w, groups=c, bias=False,
                                  kind="dwconv"))
            rows.append(LayerCost(f"{prefix}branches.{i}.bn", "bn", 2 * c, 0, n))
        if cfg.branches:
            rows.append(LayerCost(prefix + "branch_sum", "add", 0, 0, n * len(cfg.branches)))
    rows.append(LayerCost(prefix + "gelu", "act", 0, 0, n))
    out_c = cfg.output_channels
    if cfg.post_pointwise:
        rows.append(conv_cost(prefix + "post", out_c, c, 1, h, w))
    rows.append(LayerCost(prefix + "relu", "act", 0, 0, out_c * h * w))
    return rows


def layer_costs(config, height=256, width=256, fused=False) -> List[LayerCost]:
    if isinstance(config, str):
        config = get_config(config)
    rows = []
    h, w = height // 2, width // 2
    s = config.stem_channels
    rows.append(conv_cost("encoder.stem.conv", s, config.in_channels, 3, h, w, bias=False))
    rows.append(LayerCost("encoder.stem.bn", "bn", 2 * s, 0, s * h * w))
    rows.append(LayerCost("encoder.stem.gelu", "act", 0, 0, s * h * w))
    prev = s
    dims = [(h, w)]
    for i in range(4):
        c = config.stage_channels[i]
        h, w = h // 2, w // 2
        dims.append((h, w))
        rows.append(conv_cost(f"encoder.stages.{i}.down.conv", c, prev, 3, h, w, bias=False))
        rows.append(LayerCost(f"encoder.stages.{i}.down.bn", "bn", 2 * c, 0, c * h * w))
        for j in range(config.stage_depths[i]):
            rows += _block_costs(f"encoder.stages.{i}.blocks.{j}.", config.encoder_block_config(i), h, w, fused)
        prev = c
    for j, (f_c, z_c, width_j) in enumerate(config.decoder_widths()):
        h, w = dims[4 - j]
        p = f"decoder.stages.{j}."
        rows += _block_costs(p + "block.", config.decoder_block_config(j), h, w, fused)
        rows.append(LayerCost(p + "upsample", "upsample", 0, 0, f_c * 4 * h * w))
        rows.append(conv_cost(p + "proj", width_j, f_c + z_c, 1, 2 * h, 2 * w))
    h, w = height, width
    rows.append(LayerCost("final.upsample", "upsample", 0, 0, s * h * w))
    rows.append(conv_cost("input_skip.conv1", s, config.in_channels, 3, h, w))
    rows.append(LayerCost("input_skip.relu", "act", 0, 0, s * h * w))
    rows.append(conv_cost("input_skip.conv2", s, s, 3, h, w))
    rows.append(LayerCost("fusion.add", "add", 0, 0, s * h * w))
    for head, out_c, act in (("np", 2, "softmax"), ("hv", 2, "tanh"), ("nt", config.num_classes, "softmax")):
        rows.append(conv_cost(f"heads.{head}", out_c, s, 1, h, w))
        rows.append(LayerCost(f"heads.{head}.{act}", "act", 0, 0, out_c * h * w))
    return rows


def count_params(net_or_config, fused=None) -> int:
    """Learnable parameter count of a built network or of a config.

    For a built network ``fused`` defaults to the network's own form.
    """
    if isinstance(net_or_config, Network):
        net = net_or_config
        if fused is not None and fused != net.fused:
            return count_params(net.config, fused)
        return sum(a.size for name, a in net.named_parameters()
                   if not name.endswith(("running_mean", "running_var")))
    config = get_config(net_or_config) if isinstance(net_or_config, str) else net_or_config
    return sum(r.params for r in layer_costs(config, 64, 64, bool(fused)))


def count_flops(config, height=256, width=256, fused=False) -> int:
    return sum(r.flops for r in layer_costs(config, height, width, fused))


def count_macs(config, height=256, width=256, fused=False) -> int:
    return sum(r.macs for r in layer_costs(config, height, width, fused))
