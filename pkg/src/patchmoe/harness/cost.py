"""Closed-form parameter and multiply-accumulate counts.

Nothing here builds a model: every count comes from the configuration
alone, so it can be cross-checked against the parameters a constructed
network actually stores.

MAC conventions: a 1x1 conv costs ``Cout * Cin`` per pixel and a depthwise
3x3 ``9 * C``.  One selective-scan step costs ``2 * C * N`` for the state
update (decay and input injection), ``C * N`` for the readout and ``C`` for
the skip term, plus its three gate projections (``C^2 + 2 * N * C``).
Normalization, activations, resizing and elementwise products are not
counted.
"""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field

from ..moe import MAX_EXPERTS, router_hidden_width
from ..segnet import NetworkConfig


@dataclass
class CostReport:
    params: int
    macs: int
    input_size: tuple
    # component -> (params, macs)
    breakdown: "OrderedDict[str, tuple[int, int]]" = field(default_factory=OrderedDict)

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    def to_text(self) -> str:
        h, w = self.input_size
        width = max(len(k) for k in self.breakdown) if self.breakdown else 10
        lines = [f"input {h}x{w}"]
        for name, (p, m) in self.breakdown.items():
            lines.append(f"{name:<{width}}  params {p:>10d}  macs {m:>14d}")
        lines.append(f"{'total':<{width}}  params {self.params:>10d}  macs {self.macs:>14d}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("component", "params", "macs"))
        for name, (p, m) in self.breakdown.items():
            w.writerow((name, p, m))
        w.writerow(("total", self.params, self.macs))
        return buf.getvalue()


def conv1x1_params(cin: int, cout: int, bias: bool = True) -> int:
    return cout * cin + (cout if bias else 0)


def ssm_params(channels: int, state_dim: int) -> int:
    """A_log (C*N), D (C), dt weight (C*C) and bias (C), B and C projections (2*N*C)."""
    c, n = channels, state_dim
    return c * c + 3 * n * c + 2 * c


def ssm_macs(channels: int, state_dim: int, length: int) -> int:
    c, n = channels, state_dim
    gates = c * c + 2 * n * c
    scan = 3 * c * n + c
    return (gates + scan) * length


def fusion_params(channels: int, use_concat: bool = True) -> int:
    c = channels
    hidden = router_hidden_width(c)
    total = 4 * 2 * c  # GroupNorm affine per directional expert
    if use_concat:
        total += conv1x1_params(4 * c, c) + 2 * c  # projection + BN affine
    total += 9 * c + c  # depthwise local branch
    total += 1  # alpha logit
    total += conv1x1_params(c, hidden) + conv1x1_params(hidden, MAX_EXPERTS)
    return total


def fusion_macs(channels: int, pixels: int, use_concat: bool = True) -> int:
    c = channels
    hidden = router_hidden_width(c)
    per_pixel = 9 * c + c * hidden + hidden * MAX_EXPERTS
    if use_concat:
        per_pixel += 4 * c * c
    return per_pixel * pixels


def block_params(channels: int, config: NetworkConfig) -> int:
    n_ssm = 1 if config.share_ssm else 4
    total = n_ssm * ssm_params(channels, config.state_dim)
    if config.use_moe:
        total += fusion_params(channels, config.use_concat)
    return total


def block_macs(channels: int, pixels: int, config: NetworkConfig) -> int:
    # Four directional scans run even when their weights are shared.
    total = 4 * ssm_macs(channels, config.state_dim, pixels)
    if config.use_moe:
        total += fusion_macs(channels, pixels, config.use_concat)
    return total


def count_cost(config: NetworkConfig, input_size: tuple | None = None) -> CostReport:
    """Parameters and MACs of one forward pass at ``input_size`` (default: the config's)."""
    h, w = input_size or config.input_size
    parts: "OrderedDict[str, tuple[int, int]]" = OrderedDict()
    chans = config.stage_channels
    pixels = [(h >> s) * (w >> s) for s in range(config.num_stages)]
    cin = config.in_channels
    for s, c in enumerate(chans):
        p = pixels[s]
        proj = conv1x1_params(cin, c)
        parts[f"stage{s}.projection"] = (proj, cin * c * p)
        nb = config.blocks_per_stage
        parts[f"stage{s}.blocks"] = (nb * block_params(c, config), nb * block_macs(c, p, config))
        parts[f"stage{s}.norm"] = (2 * c, 0)
        cin = c
    sdi_c = config.sdi_channels
    sdi_p = len(chans) * sum(conv1x1_params(c, sdi_c) for c in chans)
    # Each target level projects every source level at the source's resolution.
    sdi_m = len(chans) * sum(c * sdi_c * p for c, p in zip(chans, pixels))
    parts["sdi"] = (sdi_p, sdi_m)
    dec_p = (len(chans) - 1) * conv1x1_params(sdi_c, sdi_c) + conv1x1_params(sdi_c, config.num_classes)
    dec_m = sum(sdi_c * sdi_c * p for p in pixels[:-1]) + sdi_c * config.num_classes * pixels[0]
    parts["decoder"] = (dec_p, dec_m)
    params = sum(p for p, _ in parts.values())
    macs = sum(m for _, m in parts.values())
    return CostReport(params, macs, (h, w), parts)


def concat_expert_delta(channels: int) -> int:
    """Parameter change from toggling the concat expert in one fusion module."""
    return conv1x1_params(4 * channels, channels) + 2 * channels
