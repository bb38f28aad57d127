"""Raster grids, resampling, spectral-index arithmetic, and the GRD1 format.

A Grid is an immutable 2-D field of finite doubles (kelvin for LST rasters,
dimensionless in [-1, 1] for spectral indices).  All operations are pure and
return fresh grids; values arrays are locked against writes so views can be
shared freely across threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

GRD1_MAGIC = "GRD1"
INDEX_SUFFIXES = (".ndvi", ".ndwi", ".ndbi")


class GridFormatError(ValueError):
    """Raised for malformed or truncated GRD1 files."""


def _frozen_array(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Grid:
    """A height x width raster of finite 64-bit floats, row-major."""

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"grid dims must be positive, got {self.height}x{self.width}")
        arr = _frozen_array(self.values, (self.height, self.width))
        if not np.isfinite(arr).all():
            raise ValueError("grid values must all be finite")
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_array(cls, values) -> "Grid":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(arr.shape[0], arr.shape[1], arr)

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class IndexStack:
    """NDVI/NDWI/NDBI grids on a shared lattice, each bounded to [-1, 1]."""

    ndvi: Grid
    ndwi: Grid
    ndbi: Grid

    def __post_init__(self):
        dims = {(g.height, g.width) for g in self.grids()}
        if len(dims) != 1:
            raise ValueError(f"index grids must share dimensions, got {sorted(dims)}")
        for name, g in zip(("ndvi", "ndwi", "ndbi"), self.grids()):
            if g.values.min() < -1.0 or g.values.max() > 1.0:
                raise ValueError(f"{name} values must lie in [-1, 1]")

    def grids(self) -> tuple[Grid, Grid, Grid]:
        return (self.ndvi, self.ndwi, self.ndbi)

    @property
    def height(self) -> int:
        return self.ndvi.height

    @property
    def width(self) -> int:
        return self.ndvi.width


def block_aggregate(g: Grid, factor: int) -> Grid:
    """Downsample by averaging non-overlapping factor x factor blocks.

    Both dimensions must be divisible by factor.  Block means are computed
    as first-element-plus-mean-of-deviations, which keeps the round trip
    with upsample_replicate bit-exact for any factor.
    """
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    if g.height % factor != 0:
        raise ValueError(f"height {g.height} not divisible by factor {factor}")
    if g.width % factor != 0:
        raise ValueError(f"width {g.width} not divisible by factor {factor}")
    hh, ww = g.height // factor, g.width // factor
    blocks = g.values.reshape(hh, factor, ww, factor)
    first = blocks[:, 0, :, 0]
    dev = blocks - first[:, None, :, None]
    out = first + dev.sum(axis=(1, 3)) / (factor * factor)
    return Grid(hh, ww, out)


def upsample_replicate(g: Grid, factor: int) -> Grid:
    """Replicate each pixel into a factor x factor block (nearest neighbor)."""
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    out = np.repeat(np.repeat(g.values, factor, axis=0), factor, axis=1)
    return Grid(g.height * factor, g.width * factor, out)


def normalized_difference(a: Grid, b: Grid) -> Grid:
    """Elementwise (a - b) / (a + b) over nonnegative bands; 0 where a + b == 0.

    The output is clipped to [-1, 1] to absorb last-ulp rounding.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"dimension mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    if a.values.min() < 0.0 or b.values.min() < 0.0:
        raise ValueError("normalized_difference requires nonnegative inputs")
    denom = a.values + b.values
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(denom == 0.0, 0.0, (a.values - b.values) / np.where(denom == 0.0, 1.0, denom))
    return Grid(a.height, a.width, np.clip(ratio, -1.0, 1.0))


@dataclass(frozen=True)
class Patch:
    """Read-only square window into a grid, anchored at (row, col)."""

    row: int
    col: int
    size: int
    values: np.ndarray

    def slice_array(self, arr: np.ndarray) -> np.ndarray:
        """The same window applied to another array on the same lattice."""
        return arr[..., self.row : self.row + self.size, self.col : self.col + self.size]


def extract_patches(g: Grid, size: int, stride: int) -> list[Patch]:
    """All size x size windows anchored at multiples of stride, row-major.

    Anchors (r, c) satisfy r + size <= height and c + size <= width.  Every
    pixel is covered when stride <= size and stride divides dim - size on
    each axis (true for the default 96/32/8 geometry).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if size < 1:
        raise ValueError(f"patch size must be >= 1, got {size}")
    if size > min(g.height, g.width):
        raise ValueError(
            f"patch size {size} exceeds grid dims {g.height}x{g.width}"
        )
    patches = []
    for r in range(0, g.height - size + 1, stride):
        for c in range(0, g.width - size + 1, stride):
            patches.append(Patch(r, c, size, g.values[r : r + size, c : c + size]))
    return patches


def write_grid(g: Grid, path: str | os.PathLike) -> None:
    """Write in GRD1 format: ASCII header line, then <f8 row-major payload."""
    header = f"{GRD1_MAGIC} {g.height} {g.width}\n".encode("ascii")
    payload = np.ascontiguousarray(g.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_grid(path: str | os.PathLike) -> Grid:
    """Read a GRD1 file; write_grid followed by read_grid is bit-identical."""
    with open(path, "rb") as fh:
        header = fh.readline(128)
        if not header.endswith(b"\n"):
            raise GridFormatError(f"{path}: missing or overlong header line")
        parts = header[:-1].split(b" ")
        if len(parts) != 3 or parts[0] != GRD1_MAGIC.encode("ascii"):
            raise GridFormatError(f"{path}: malformed GRD1 header {header!r}")
        try:
            height, width = int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise GridFormatError(f"{path}: non-integer dims in header") from exc
        if height <= 0 or width <= 0:
            raise GridFormatError(f"{path}: non-positive dims {height}x{width}")
        payload = fh.read()
    expected = height * width * 8
    if len(payload) < expected:
        raise GridFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    if len(payload) > expected:
        raise GridFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    values = np.frombuffer(payload, dtype="<f8").reshape(height, width)
    if not np.isfinite(values).all():
        raise GridFormatError(f"{path}: payload contains non-finite values")
    return Grid(height, width, values)


def write_index_stack(stack: IndexStack, base_path: str | os.PathLike) -> None:
    """Write three GRD1 files at base_path + (.ndvi|.ndwi|.ndbi)."""
    for suffix, g in zip(INDEX_SUFFIXES, stack.grids()):
        write_grid(g, f"{base_path}{suffix}")


def read_index_stack(base_path: str | os.PathLike) -> IndexStack:
    grids = [read_grid(f"{base_path}{suffix}") for suffix in INDEX_SUFFIXES]
    return IndexStack(*grids)
