"""Mixture-of-experts fusion of four directional scan outputs.

Experts are the GroupNorm'd directional maps plus an optional concatenation
expert (1x1 conv over the four normalized maps, then BN + ReLU).  A router
blends a local (depthwise 3x3) and a global (pooled) view of the raw
directional sum and emits per-pixel softmax weights over the experts.  The
raw sum is added back after routing.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv1x1, DWConv3x3, GroupNorm, Module
from .tensor import DimensionError, Param, Tensor


@dataclass
class ExpertStack:
    experts: list  # E1..E4 (normalized directional maps) then E_concat when enabled
    raw_directional: list


@dataclass
class RouterOutput:
    logits: Tensor
    weights: Tensor
    alpha: float
    f_local: Tensor
    f_global: Tensor
    f_blend: Tensor


MAX_EXPERTS = 5


def router_hidden_width(channels: int) -> int:
    return max(4, channels // 2)


def _check_four(ys: Sequence[Tensor]) -> None:
    if len(ys) != 4:
        raise DimensionError(f"expected 4 directional maps, got {len(ys)}")
    for y in ys[1:]:
        if y.shape != ys[0].shape:
            raise DimensionError(f"directional maps disagree in shape: {ys[0].shape} vs {y.shape}")


class MoEFusion(Module):
    """Five-expert directional fusion.

    Without the concat expert the router still emits five logits but the
    fifth weight is pinned to zero, so the four directional experts share
    the simplex.

    Parameters
    ----------
    channels : int
        Channel width C of each directional map.
    rng : numpy.random.Generator
        Source for weight initialization.
    use_concat : bool
        Build the concatenation expert.
    use_residual : bool
        Add the raw directional sum to the routed output.
    groups : int, optional
        GroupNorm group count; defaults to 4 when C allows it, else 1.
    """

    def __init__(self, channels: int, rng: np.random.Generator, use_concat: bool = True,
                 use_residual: bool = True, groups: int | None = None):
        self.channels = channels
        self.use_concat = use_concat
        self.use_residual = use_residual
        self.norms = [GroupNorm(channels, groups) for _ in range(4)]
        if use_concat:
            self.concat_conv = Conv1x1(4 * channels, channels, rng)
            self.concat_bn = BatchNorm(channels)
        self.local_conv = DWConv3x3(channels, rng)
        # alpha = sigmoid(alpha_logit), clipped so rounding never reaches 0 or 1; 0 gives 0.5.
        self.alpha_logit = Param(np.zeros(1))
        hidden = router_hidden_width(channels)
        self.router_in = Conv1x1(channels, hidden, rng)
        # Always five logits; the concat slot is masked when that expert is off.
        self.router_out = Conv1x1(hidden, MAX_EXPERTS, rng, zero_init=True)

    @property
    def num_experts(self) -> int:
        return 5 if self.use_concat else 4

    def alpha(self) -> Tensor:
        return T.open_unit_sigmoid(self.alpha_logit)

    def build_experts(self, ys: Sequence[Tensor]) -> ExpertStack:
        _check_four(ys)
        normed = [gn(y) for gn, y in zip(self.norms, ys)]
        experts = list(normed)
        if self.use_concat:
            mixed = self.concat_conv(T.concat_channels(normed))
            experts.append(T.relu(self.concat_bn(mixed)))
        return ExpertStack(experts=experts, raw_directional=list(ys))

    def route(self, ys: Sequence[Tensor]) -> RouterOutput:
        _check_four(ys)
        s = T.add_n(ys)
        h, w = s.shape[2:]
        f_local = self.local_conv(s)
        f_global = T.broadcast_spatial(T.gap(s), h, w)
        a = self.alpha()
        f = T.add(T.scale(f_local, a), T.scale(f_global, T.one_minus(a)))
        logits = self.router_out(T.relu(self.router_in(f)))
        weights = T.softmax_over_channels(logits, active=self.num_experts)
        return RouterOutput(logits, weights, float(a.data.reshape(())), f_local, f_global, f)

    @staticmethod
    def fuse(stack: ExpertStack, router: RouterOutput) -> Tensor:
        return T.weighted_experts(router.weights, stack.experts)

    def residual_fuse(self, routed: Tensor, ys: Sequence[Tensor]) -> Tensor:
        if not self.use_residual:
            return routed
        return T.add(routed, T.add_n(ys))

    def forward(self, ys: Sequence[Tensor], return_routing: bool = False):
        stack = self.build_experts(ys)
        router = self.route(ys)
        out = self.residual_fuse(self.fuse(stack, router), ys)
        return (out, router) if return_routing else out


def routing_csv(router: RouterOutput) -> str:
    """Per-location routing weights as ``b,h,w,w1..wE`` rows."""
    w = router.weights.data
    nb, ne, nh, nw = w.shape
    buf = io.StringIO()
    buf.write("b,h,w," + ",".join(f"w{e + 1}" for e in range(ne)) + "\n")
    for b in range(nb):
        for i in range(nh):
            for j in range(nw):
                vals = ",".join(repr(float(v)) for v in w[b, :, i, j])
                buf.write(f"{b},{i},{j},{vals}\n")
    return buf.getvalue()
