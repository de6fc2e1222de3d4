"""Flat binary container for parameters and raw tensors.

Layout (all integers little-endian)::

    magic      4 bytes   b"PMSS"
    version    u32
    echo_len   u32, then echo_len bytes of UTF-8 ``key=value`` lines
    n_records  u32
    record     kind u8 (0 = parameter, 1 = buffer / plain tensor)
               name_len u32, name bytes (UTF-8)
               rank u32, dims rank x u64
               values prod(dims) x float64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"PMSS"
VERSION = 1
KIND_PARAM = 0
KIND_BUFFER = 1


class ContainerError(ValueError):
    pass


@dataclass
class Record:
    name: str
    values: np.ndarray
    kind: int = KIND_PARAM


@dataclass
class Container:
    echo: str = ""
    records: list = field(default_factory=list)

    def add(self, name: str, values, kind: int = KIND_PARAM) -> None:
        self.records.append(Record(name, np.asarray(values, dtype=np.float64), kind))

    def get(self, name: str) -> np.ndarray:
        for r in self.records:
            if r.name == name:
                return r.values
        raise KeyError(name)

    def param_scalar_count(self) -> int:
        return int(sum(r.values.size for r in self.records if r.kind == KIND_PARAM))


def _write(fh: BinaryIO, c: Container) -> None:
    echo = c.echo.encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(echo)))
    fh.write(echo)
    fh.write(struct.pack("<I", len(c.records)))
    for r in c.records:
        name = r.name.encode("utf-8")
        vals = np.asarray(r.values, dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
        fh.write(struct.pack("<BI", r.kind, len(name)))
        fh.write(name)
        fh.write(struct.pack("<I", vals.ndim))
        fh.write(struct.pack(f"<{vals.ndim}Q", *vals.shape))
        fh.write(vals.tobytes())


def save(path, c: Container) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        _write(fh, c)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerError("truncated container")
    return data


def load(path) -> Container:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ContainerError(f"{path}: bad magic, not a PMSS container")
        version, echo_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported format version {version}")
        echo = _read_exact(fh, echo_len).decode("utf-8")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        c = Container(echo=echo)
        for _ in range(n):
            kind, name_len = struct.unpack("<BI", _read_exact(fh, 5))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            count = int(np.prod(dims)) if rank else 1
            vals = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(dims)
            c.records.append(Record(name, vals.astype(np.float64), kind))
        if fh.read(1):
            raise ContainerError(f"{path}: trailing bytes after last record")
    return c


def save_tensor(path, values: np.ndarray, name: str = "tensor", echo: str = "") -> None:
    c = Container(echo=echo)
    c.add(name, values, KIND_BUFFER)
    save(path, c)


def load_tensor(path) -> np.ndarray:
    c = load(path)
    if len(c.records) != 1:
        raise ContainerError(f"{path}: expected a single tensor record, found {len(c.records)}")
    return c.records[0].values
