"""Encoder / SDI / decoder assembly of Patch-MoE VSS blocks.

The encoder stacks, per stage, a 1x1 channel projection, ``blocks_per_stage``
Patch-MoE VSS blocks, a GroupNorm and (except after the last stage) a 2x2
average pool.  The norm keeps stage outputs at unit scale: the selective
gates make each block roughly cubic in its input magnitude.
Each pyramid level is then refined by SDI: every level is projected to
``sdi_channels``, resized to the target resolution and multiplied elementwise.
The decoder walks the SDI maps coarse to fine with nearest x2 upsampling,
a 1x1 conv + ReLU and additive skips, ending in a 1x1 head.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import container
from . import tensor as T
from .moe import MoEFusion
from .nn import Conv1x1, GroupNorm, Module
from .scan_order import DIRECTIONS, PatchScheme, parse_patch_scheme, scan_order
from .ssm import SsmParams, directional_scan
from .tensor import ConfigurationError, DimensionError, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    patch_scheme: PatchScheme = field(default_factory=lambda: parse_patch_scheme("8844/1111/1111/1111"))
    sdi_channels: int = 16
    num_classes: int = 1
    input_size: tuple = (64, 64)
    state_dim: int = 8
    use_moe: bool = True
    use_concat: bool = True
    use_residual: bool = True
    share_ssm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if isinstance(self.patch_scheme, str):
            object.__setattr__(self, "patch_scheme", parse_patch_scheme(self.patch_scheme))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def validate(self) -> None:
        if self.patch_scheme.num_stages != self.num_stages:
            raise ConfigurationError(
                f"patch scheme {self.patch_scheme} has {self.patch_scheme.num_stages} stages, "
                f"network has {self.num_stages}"
            )
        h, w = self.input_size
        div = 2 ** (self.num_stages - 1)
        if h < 1 or w < 1 or h % div or w % div:
            raise ConfigurationError(f"input size {h}x{w} must be divisible by {div}")
        if min(self.stage_channels) < 1 or self.blocks_per_stage < 1 or self.sdi_channels < 1:
            raise ConfigurationError("channel and block counts must be positive")
        if self.num_classes != 1:
            raise ConfigurationError("only a single sigmoid output class is supported")

    def stage_size(self, s: int) -> tuple[int, int]:
        return self.input_size[0] >> s, self.input_size[1] >> s

    def with_raster_scan(self) -> "NetworkConfig":
        return replace(self, patch_scheme=PatchScheme.raster(self.num_stages))

    def to_text(self) -> str:
        items = {
            "in_channels": self.in_channels,
            "stage_channels": ",".join(map(str, self.stage_channels)),
            "blocks_per_stage": self.blocks_per_stage,
            "patch_scheme": str(self.patch_scheme),
            "sdi_channels": self.sdi_channels,
            "num_classes": self.num_classes,
            "input_size": "x".join(map(str, self.input_size)),
            "state_dim": self.state_dim,
            "use_moe": int(self.use_moe),
            "use_concat": int(self.use_concat),
            "use_residual": int(self.use_residual),
            "share_ssm": int(self.share_ssm),
        }
        return "".join(f"{k}={v}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        return cls(
            in_channels=int(kv["in_channels"]),
            stage_channels=tuple(int(c) for c in kv["stage_channels"].split(",")),
            blocks_per_stage=int(kv["blocks_per_stage"]),
            patch_scheme=parse_patch_scheme(kv["patch_scheme"]),
            sdi_channels=int(kv["sdi_channels"]),
            num_classes=int(kv["num_classes"]),
            input_size=tuple(int(s) for s in kv["input_size"].split("x")),
            state_dim=int(kv["state_dim"]),
            use_moe=bool(int(kv["use_moe"])),
            use_concat=bool(int(kv["use_concat"])),
            use_residual=bool(int(kv["use_residual"])),
            share_ssm=bool(int(kv["share_ssm"])),
        )


class PatchMoEVSSBlock(Module):
    """Four directional patch-ordered scans fused by :class:`MoEFusion`.

    Without MoE (``use_moe=False``) the directional outputs are simply summed.
    """

    def __init__(self, channels: int, patch_sizes: Sequence[int], rng: np.random.Generator,
                 state_dim: int = 8, use_moe: bool = True, use_concat: bool = True,
                 use_residual: bool = True, share_ssm: bool = False):
        if len(patch_sizes) != 4:
            raise ConfigurationError(f"need one patch size per direction, got {patch_sizes}")
        self.patch_sizes = tuple(int(p) for p in patch_sizes)
        n_ssm = 1 if share_ssm else 4
        self.ssm = [SsmParams(channels, state_dim, rng) for _ in range(n_ssm)]
        self.fusion = MoEFusion(channels, rng, use_concat, use_residual) if use_moe else None

    def directional_outputs(self, x: Tensor) -> list:
        h, w = x.shape[2:]
        ys = []
        for d, (direction, p) in enumerate(zip(DIRECTIONS, self.patch_sizes)):
            order = scan_order(h, w, p, direction)
            ys.append(directional_scan(x, order, self.ssm[d % len(self.ssm)]))
        return ys

    def forward(self, x: Tensor) -> Tensor:
        ys = self.directional_outputs(x)
        if self.fusion is None:
            return T.add_n(ys)
        return self.fusion(ys)


def patch_moe_vss_block(x: Tensor, stage_patch_sizes: Sequence[int], block: PatchMoEVSSBlock) -> Tensor:
    """Run ``block`` with its scan orders rebuilt for ``stage_patch_sizes``."""
    if tuple(stage_patch_sizes) != block.patch_sizes:
        block.patch_sizes = tuple(int(p) for p in stage_patch_sizes)
    return block(x)


class Encoder(Module):
    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.projections = []
        self.stages = []
        self.norms = []
        cin = config.in_channels
        for s, c in enumerate(config.stage_channels):
            self.projections.append(Conv1x1(cin, c, rng))
            self.stages.append([
                PatchMoEVSSBlock(c, config.patch_scheme.stages[s], rng, config.state_dim,
                                 config.use_moe, config.use_concat, config.use_residual, config.share_ssm)
                for _ in range(config.blocks_per_stage)
            ])
            self.norms.append(GroupNorm(c))
            cin = c

    def forward(self, image: Tensor) -> list:
        pyramid = []
        x = image
        last = len(self.stages) - 1
        for s, (proj, blocks, norm) in enumerate(zip(self.projections, self.stages, self.norms)):
            x = proj(x)
            for blk in blocks:
                x = blk(x)
            x = norm(x)
            pyramid.append(x)
            if s != last:
                x = T.avg_pool2x2(x)
        return pyramid


class SDI(Module):
    """Semantics-and-detail infusion: per target level, one 1x1 projection per source level."""

    def __init__(self, stage_channels: Sequence[int], sdi_channels: int, rng: np.random.Generator):
        self.projections = [[Conv1x1(c, sdi_channels, rng, gain=1.0) for c in stage_channels]
                            for _ in stage_channels]

    def level(self, pyramid: Sequence[Tensor], target: int) -> Tensor:
        h, w = pyramid[target].shape[2:]
        out = None
        for k, feat in enumerate(pyramid):
            mapped = T.resize_nearest(self.projections[target][k](feat), h, w)
            out = mapped if out is None else T.hadamard(out, mapped)
        return out

    def forward(self, pyramid: Sequence[Tensor]) -> list:
        if len(pyramid) != len(self.projections):
            raise DimensionError(f"SDI built for {len(self.projections)} levels, got {len(pyramid)}")
        return [self.level(pyramid, l) for l in range(len(pyramid))]


def sdi(pyramid: Sequence[Tensor], target_level: int, module: SDI) -> Tensor:
    return module.level(pyramid, target_level)


class Decoder(Module):
    def __init__(self, num_levels: int, sdi_channels: int, num_classes: int, rng: np.random.Generator):
        self.up = [Conv1x1(sdi_channels, sdi_channels, rng) for _ in range(num_levels - 1)]
        self.head = Conv1x1(sdi_channels, num_classes, rng)

    def forward(self, maps: Sequence[Tensor]) -> Tensor:
        d = maps[-1]
        for l in range(len(maps) - 2, -1, -1):
            h, w = maps[l].shape[2:]
            d = T.add(T.relu(self.up[l](T.resize_nearest(d, h, w))), maps[l])
        return self.head(d)


class PatchMoENet(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config, rng)
        self.sdi = SDI(config.stage_channels, config.sdi_channels, rng)
        self.decoder = Decoder(config.num_stages, config.sdi_channels, config.num_classes, rng)

    def check_input(self, image: Tensor) -> None:
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != cfg.in_channels:
            raise DimensionError(f"expected (B, {cfg.in_channels}, H, W) input, got {image.shape}")
        div = 2 ** (cfg.num_stages - 1)
        h, w = image.shape[2:]
        if h % div or w % div:
            raise ConfigurationError(f"input size {h}x{w} must be divisible by {div}")

    def encode(self, image: Tensor) -> list:
        self.check_input(image)
        return self.encoder(image)

    def forward(self, image: Tensor) -> Tensor:
        """Logits of shape (B, num_classes, H, W)."""
        return self.decoder(self.sdi(self.encode(image)))

    def predict(self, image) -> np.ndarray:
        with T.no_grad():
            logits = self.forward(T.as_tensor(image))
        return T.open_unit(T._sigmoid(logits.data))


def encoder_forward(image: Tensor, model: PatchMoENet) -> list:
    return model.encode(image)


def predict(image, model: PatchMoENet) -> np.ndarray:
    return model.predict(image)


# ---------------------------------------------------------------- checkpoints


def to_container(model: PatchMoENet) -> container.Container:
    c = container.Container(echo=model.config.to_text())
    for name, p in model.named_parameters():
        c.add(name, p.data, container.KIND_PARAM)
    for name, buf in model.named_buffers():
        c.add(name, buf, container.KIND_BUFFER)
    return c


def save_checkpoint(path, model: PatchMoENet) -> None:
    container.save(path, to_container(model))


def load_checkpoint(path) -> PatchMoENet:
    c = container.load(path)
    model = PatchMoENet(NetworkConfig.from_text(c.echo))
    params = dict(model.named_parameters())
    buffers = {name: None for name, _ in model.named_buffers()}
    for rec in c.records:
        if rec.kind == container.KIND_PARAM:
            if rec.name not in params:
                raise container.ContainerError(f"unknown parameter {rec.name!r} in checkpoint")
            p = params[rec.name]
            if p.shape != rec.values.shape:
                raise container.ContainerError(f"shape mismatch for {rec.name}: {rec.values.shape} vs {p.shape}")
            p.data[...] = rec.values
        elif rec.name in buffers:
            _assign_buffer(model, rec.name, rec.values)
    return model


def _assign_buffer(model: Module, name: str, values: np.ndarray) -> None:
    *path, attr = name.split(".")
    obj = model
    for part in path:
        obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
    setattr(obj, attr, np.array(values, dtype=T.get_dtype()))
