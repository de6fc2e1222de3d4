"""Synthetic segmentation data: soft-edged elliptical blobs on a textured background."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import container


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (1, H, W), values in {0, 1}
    seed: int


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field = np.zeros((h, w))
    for _ in range(4):
        fy, fx = rng.uniform(1.0, 6.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field / 4.0


def make_sample(h: int, w: int, seed: int) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    mask = np.zeros((h, w), dtype=bool)
    soft = np.zeros((h, w))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        ay, ax = rng.uniform(0.08, 0.22) * h, rng.uniform(0.08, 0.22) * w
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / ax
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ay
        r = np.sqrt(u * u + v * v)
        mask |= r <= 1.0
        # Soft edge: intensity ramps over the outer ~15% of the radius.
        soft = np.maximum(soft, np.clip((1.0 - r) / 0.15 + 0.5, 0.0, 1.0))
    bg_color = rng.uniform(0.25, 0.45, 3)
    fg_color = bg_color + np.array([0.22, 0.04, -0.08]) + rng.uniform(-0.05, 0.05, 3)
    tex = _texture(rng, h, w)
    image = np.empty((3, h, w))
    for ch in range(3):
        base = bg_color[ch] + 0.15 * tex
        image[ch] = base + soft * (fg_color[ch] - bg_color[ch])
    image += rng.normal(0.0, 0.06, image.shape)
    return SyntheticSample(image=image, mask=mask[None].astype(np.float64), seed=seed)


def generate_dataset(n: int, h: int = 64, w: int = 64, seed: int = 0) -> list:
    """``n`` samples; sample ``i`` is seeded from ``(seed, i)`` so subsets are stable."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [make_sample(h, w, int(s)) for s in seeds]


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


def foreground_fraction(samples) -> float:
    return float(np.mean([s.mask.mean() for s in samples]))


def save_dataset(root, splits: dict) -> None:
    """Write ``{split: samples}`` as ``root/split/NNNNN.image.pmss`` + ``.mask.pmss``."""
    root = Path(root)
    for split, samples in splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            echo = f"seed={s.seed}\n"
            container.save_tensor(d / f"{i:05d}.image.pmss", s.image, "image", echo)
            container.save_tensor(d / f"{i:05d}.mask.pmss", s.mask, "mask", echo)


def load_split(directory) -> list:
    directory = Path(directory)
    samples = []
    for img_path in sorted(directory.glob("*.image.pmss")):
        mask_path = img_path.with_name(img_path.name.replace(".image.", ".mask."))
        c = container.load(img_path)
        seed = 0
        for line in c.echo.splitlines():
            if line.startswith("seed="):
                seed = int(line[5:])
        samples.append(SyntheticSample(c.records[0].values, container.load_tensor(mask_path), seed))
    if not samples:
        raise FileNotFoundError(f"no samples found in {directory}")
    return samples
