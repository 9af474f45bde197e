from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from app.errors import ConfigError
from app.grid import Field, PhaseGrid

MAGIC = b"HYPF"
# magic, nx, ny, Rx, Ry, 4 pad bytes -> 32-byte header
HEADER = struct.Struct("<4sIIdd4x")


def write_field_csv(path: Path, grid: PhaseGrid, field: Field) -> None:
    f = np.asarray(field, dtype=float)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        for i, xv in enumerate(grid.x):
            for j, yv in enumerate(grid.y):
                writer.writerow([repr(float(xv)), repr(float(yv)), repr(float(f[i, j]))])


def read_field_csv(path: Path, shape: Tuple[int, int]) -> Field:
    with Path(path).open("r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    values = np.array([float(r["value"]) for r in rows])
    if values.size != shape[0] * shape[1]:
        raise ConfigError(f"{path}: expected {shape[0] * shape[1]} values, found {values.size}")
    return values.reshape(shape)


def write_field_binary(path: Path, grid: PhaseGrid, field: Field) -> None:
    f = np.ascontiguousarray(field, dtype="<f8")
    with Path(path).open("wb") as fh:
        fh.write(HEADER.pack(MAGIC, grid.nx, grid.ny, grid.config.Rx, grid.config.Ry))
        fh.write(f.tobytes(order="C"))


def read_field_binary(path: Path) -> Tuple[Field, float, float]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ConfigError(f"{path}: truncated header")
    magic, nx, ny, rx, ry = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}")
    data = np.frombuffer(raw, dtype="<f8", offset=HEADER.size)
    if data.size != nx * ny:
        raise ConfigError(f"{path}: expected {nx * ny} values, found {data.size}")
    return data.reshape(nx, ny).copy(), rx, ry
