from __future__ import annotations

import numpy as np
import pytest

from app.errors import ConfigError
from app.field_io import HEADER, read_field_binary, read_field_csv, write_field_binary, write_field_csv
from app.flow import gaussian_ratio


def test_header_is_32_bytes():
    assert HEADER.size == 32


def test_binary_roundtrip(tmp_path, quadratic_grid):
    f = gaussian_ratio(quadratic_grid, (0.5, 0.0), ((0.5, 0.0), (0.0, 0.5)))
    path = tmp_path / "f.bin"
    write_field_binary(path, quadratic_grid, f)
    assert path.stat().st_size == 32 + 8 * f.size
    back, rx, ry = read_field_binary(path)
    assert (rx, ry) == (8.0, 8.0)
    np.testing.assert_array_equal(back, f)


def test_csv_roundtrip(tmp_path, quartic_grid):
    f = np.cos(quartic_grid.X) + quartic_grid.Y ** 2
    path = tmp_path / "f.csv"
    write_field_csv(path, quartic_grid, f)
    np.testing.assert_array_equal(read_field_csv(path, quartic_grid.shape), f)
    with pytest.raises(ConfigError):
        read_field_csv(path, (3, 3))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(HEADER.pack(b"NOPE", 1, 1, 1.0, 1.0) + np.zeros(1).tobytes())
    with pytest.raises(ConfigError, match="magic"):
        read_field_binary(path)


def test_truncated_files(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(b"HYPF\x00")
    with pytest.raises(ConfigError, match="header"):
        read_field_binary(path)
    path.write_bytes(HEADER.pack(b"HYPF", 2, 2, 1.0, 1.0) + np.zeros(3).tobytes())
    with pytest.raises(ConfigError, match="expected 4"):
        read_field_binary(path)
