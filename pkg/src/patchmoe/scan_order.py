"""Patch-ordered directional scan permutations.

A scan order maps sequence slot ``t`` to flat spatial index ``perm[t]``
(``index = h * W + w``).  Patch-ordered scans tile the grid into
``ceil(H/p) x ceil(W/p)`` patches (edge patches may be smaller) and emit each
patch's pixels consecutively, so they never pool or drop pixels.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, DimensionError, Tensor


class Direction(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"
    WH_FORWARD = "wh_forward"
    WH_REVERSE = "wh_reverse"

    @classmethod
    def parse(cls, text: str) -> "Direction":
        key = text.strip().lower().replace("-", "_")
        aliases = {"whforward": "wh_forward", "whreverse": "wh_reverse"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(d.value for d in cls)
            raise ConfigurationError(f"unknown direction {text!r}; expected one of {names}") from None


DIRECTIONS = (Direction.FORWARD, Direction.REVERSE, Direction.WH_FORWARD, Direction.WH_REVERSE)


@dataclass(frozen=True, eq=False)
class ScanOrder:
    height: int
    width: int
    perm: np.ndarray
    inv: np.ndarray
    direction: Direction
    patch_size: int

    @property
    def length(self) -> int:
        return self.height * self.width

    def position_of(self, h: int, w: int) -> int:
        """Sequence slot at which pixel (h, w) is visited."""
        return int(self.inv[h * self.width + w])


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _check_dims(height: int, width: int) -> None:
    if height < 1 or width < 1:
        raise ConfigurationError(f"grid dimensions must be >= 1, got {height}x{width}")


@functools.lru_cache(maxsize=256)
def _build(height: int, width: int, p: int, direction: Direction) -> ScanOrder:
    rows, cols = np.divmod(np.arange(height * width), width)
    prow, pcol = rows // p, cols // p
    if direction in (Direction.FORWARD, Direction.REVERSE):
        # np.lexsort sorts by the last key first.
        perm = np.lexsort((cols, rows, pcol, prow))
    else:
        perm = np.lexsort((rows, cols, prow, pcol))
    if direction in (Direction.REVERSE, Direction.WH_REVERSE):
        perm = perm[::-1].copy()
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return ScanOrder(height, width, _frozen(perm), _frozen(inv), direction, p)


def build_raster(height: int, width: int) -> ScanOrder:
    """Row-major scan: the identity permutation."""
    _check_dims(height, width)
    return _build(height, width, 1, Direction.FORWARD)


def build_patch_order(height: int, width: int, p: int) -> ScanOrder:
    """Forward patch-ordered scan with square patches of side ``p``."""
    _check_dims(height, width)
    if p < 1:
        raise ConfigurationError(f"patch size must be >= 1, got {p}")
    return _build(height, width, int(p), Direction.FORWARD)


def orient(order: ScanOrder, direction: Direction) -> ScanOrder:
    """Re-derive ``order`` for another scan direction.

    ``REVERSE`` reverses the whole forward sequence.  ``WH_FORWARD`` walks the
    patch grid column by column and each patch column-major, so that ``p = 1``
    gives the classic column-major raster; ``WH_REVERSE`` reverses that.
    """
    if isinstance(direction, str):
        direction = Direction.parse(direction)
    return _build(order.height, order.width, order.patch_size, direction)


def scan_order(height: int, width: int, p: int, direction) -> ScanOrder:
    return orient(build_patch_order(height, width, p), direction)


def gather(x: Tensor, order: ScanOrder) -> Tensor:
    """Flatten a (B, C, H, W) map into a (B, C, H*W) sequence in scan order."""
    if x.ndim != 4 or x.shape[2:] != (order.height, order.width):
        raise DimensionError(f"gather: tensor {x.shape} does not match order {order.height}x{order.width}")
    b, c = x.shape[:2]
    return T.take_positions(T.reshape(x, (b, c, order.length)), order.perm)


def scatter(seq: Tensor, order: ScanOrder) -> Tensor:
    """Inverse of :func:`gather`."""
    if seq.ndim != 3 or seq.shape[2] != order.length:
        raise DimensionError(f"scatter: sequence {seq.shape} does not match order length {order.length}")
    b, c = seq.shape[:2]
    return T.reshape(T.take_positions(seq, order.inv), (b, c, order.height, order.width))


def patch_contiguous(order: ScanOrder) -> bool:
    """True when every patch of the partition occupies one contiguous run of slots."""
    h, w, p = order.height, order.width, order.patch_size
    rows, cols = np.divmod(np.arange(h * w), w)
    patch_id = (rows // p) * (-(-w // p)) + cols // p
    slots = order.inv
    n = patch_id.max() + 1
    lo = np.full(n, slots.size)
    hi = np.full(n, -1)
    np.minimum.at(lo, patch_id, slots)
    np.maximum.at(hi, patch_id, slots)
    counts = np.bincount(patch_id, minlength=n)
    return bool(np.all(hi - lo + 1 == counts))


def is_bijection(order: ScanOrder) -> bool:
    n = order.length
    return (
        order.perm.shape == (n,)
        and np.array_equal(np.sort(order.perm), np.arange(n))
        and np.array_equal(order.inv[order.perm], np.arange(n))
    )


@dataclass(frozen=True)
class LocalityProfile:
    """Histogram of sequence distances over all 4-neighbour pixel pairs."""

    counts: np.ndarray  # counts[d] = number of pairs at sequence distance d
    mean: float
    pairs: int

    def fraction_within(self, k: int) -> float:
        return float(self.counts[: k + 1].sum()) / self.pairs if self.pairs else 0.0

    def rows(self) -> list[tuple[int, int]]:
        return [(int(d), int(c)) for d, c in enumerate(self.counts) if c]


def neighbour_distances(order: ScanOrder) -> tuple[np.ndarray, np.ndarray]:
    """Sequence distances of horizontal and vertical neighbour pairs."""
    pos = order.inv.reshape(order.height, order.width).astype(np.int64)
    horiz = np.abs(np.diff(pos, axis=1)).ravel()
    vert = np.abs(np.diff(pos, axis=0)).ravel()
    return horiz, vert


def locality_profile(order: ScanOrder) -> LocalityProfile:
    horiz, vert = neighbour_distances(order)
    d = np.concatenate([horiz, vert])
    counts = np.bincount(d, minlength=1) if d.size else np.zeros(1, dtype=np.int64)
    return LocalityProfile(counts=counts, mean=float(d.mean()) if d.size else 0.0, pairs=int(d.size))


def format_permutation(order: ScanOrder) -> str:
    return " ".join(str(int(i)) for i in order.perm)


def locality_csv(profile: LocalityProfile) -> str:
    lines = ["distance,count"]
    lines += [f"{d},{c}" for d, c in profile.rows()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- patch schemes


class SchemeParseError(ConfigurationError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at character {position})")
        self.position = position


@dataclass(frozen=True)
class PatchScheme:
    """Patch size per stage and direction (forward, reverse, WH forward, WH reverse)."""

    stages: tuple[tuple[int, int, int, int], ...]

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("patch scheme needs at least one stage")
        for s in self.stages:
            if len(s) != 4 or any(int(p) < 1 for p in s):
                raise ConfigurationError(f"invalid stage {s!r}: need four patch sizes >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def __str__(self) -> str:
        parts = []
        for s in self.stages:
            if all(p <= 9 for p in s):
                parts.append("".join(str(p) for p in s))
            else:
                parts.append(",".join(str(p) for p in s))
        return "/".join(parts)

    @classmethod
    def raster(cls, num_stages: int) -> "PatchScheme":
        return cls(tuple((1, 1, 1, 1) for _ in range(num_stages)))


def parse_patch_scheme(text: str) -> PatchScheme:
    """Parse ``"8844/1111/1111/1111"``; a stage may also be ``"8,8,4,4"`` for sizes >= 10."""
    if not text:
        raise SchemeParseError("empty patch scheme", 0)
    stages = []
    offset = 0
    for group in text.split("/"):
        if "," in group:
            fields = group.split(",")
            if len(fields) != 4:
                raise SchemeParseError(f"stage {group!r} needs 4 comma-separated sizes", offset)
            sizes = []
            pos = offset
            for f in fields:
                if not f.isdigit():
                    raise SchemeParseError(f"non-numeric patch size {f!r}", pos)
                if int(f) == 0:
                    raise SchemeParseError("patch size 0", pos)
                sizes.append(int(f))
                pos += len(f) + 1
        else:
            for i, ch in enumerate(group):
                if not ch.isdigit():
                    raise SchemeParseError(f"non-digit {ch!r}", offset + i)
            if len(group) != 4:
                raise SchemeParseError(f"stage {group!r} has {len(group)} digits, expected 4", offset)
            for i, ch in enumerate(group):
                if ch == "0":
                    raise SchemeParseError("patch size 0", offset + i)
            sizes = [int(ch) for ch in group]
        stages.append(tuple(sizes))
        offset += len(group) + 1
    return PatchScheme(tuple(stages))
