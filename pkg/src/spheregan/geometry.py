"""Equirectangular (ERP) pixel <-> sphere conventions and tangent-plane sampling grids.

Pixel centers sit at half-integer offsets::

    lat = pi/2 - pi * (row + 0.5) / H
    lon = 2 * pi * (col + 0.5) / W - pi

Kernel taps are laid out on the plane tangent to the sphere at each output
pixel and mapped back with the inverse gnomonic projection. Tap order is
row-major in image orientation: image row offset -1, 0, +1 (north to south),
then column offset -1, 0, +1 (west to east).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

HALF_PI = 0.5 * math.pi
TWO_PI = 2.0 * math.pi


class SphereCoord(NamedTuple):
    lat: float
    lon: float


class GeometryError(ValueError):
    pass


def _check_erp(height: int, width: int) -> None:
    if width != 2 * height:
        raise GeometryError(f"ERP frames need width == 2 * height, got {height}x{width}")


def wrap_lon(lon):
    """Wrap longitude into [-pi, pi)."""
    return np.mod(np.asarray(lon) + math.pi, TWO_PI) - math.pi


def wrap_sphere(lat, lon):
    """Fold latitudes past a pole back onto the sphere.

    A latitude above pi/2 becomes pi - lat (below -pi/2: -pi - lat) and the
    longitude moves to the opposite meridian.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    north = lat > HALF_PI
    south = lat < -HALF_PI
    lat = np.where(north, math.pi - lat, np.where(south, -math.pi - lat, lat))
    lon = np.where(north | south, lon + math.pi, lon)
    return lat, wrap_lon(lon)


def pixel_to_sphere(row, col, height: int, width: int) -> SphereCoord:
    """Sphere coordinates of a pixel center (vectorizes over row/col arrays)."""
    lat = HALF_PI - math.pi * (np.asarray(row, dtype=np.float64) + 0.5) / height
    lon = TWO_PI * (np.asarray(col, dtype=np.float64) + 0.5) / width - math.pi
    if lat.ndim == 0:
        return SphereCoord(float(lat), float(lon))
    return SphereCoord(lat, lon)


def sphere_to_pixel(lat, lon, height: int, width: int):
    """Inverse of :func:`pixel_to_sphere`, returning fractional (row, col)."""
    row = (HALF_PI - np.asarray(lat, dtype=np.float64)) * height / math.pi - 0.5
    col = (np.asarray(lon, dtype=np.float64) + math.pi) * width / TWO_PI - 0.5
    return row, col


def gnomonic_inverse(center: SphereCoord, x, y) -> SphereCoord:
    """Map tangent-plane coordinates (x east, y north) around ``center`` onto the sphere."""
    lat0, lon0 = float(center[0]), float(center[1])
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.isnan(x).any() or np.isnan(y).any() or math.isnan(lat0) or math.isnan(lon0):
        raise GeometryError("NaN in gnomonic_inverse input")
    if not -HALF_PI < lat0 < HALF_PI:
        raise GeometryError(f"tangent point latitude {lat0} must lie strictly inside (-pi/2, pi/2)")

    rho = np.hypot(x, y)
    nu = np.arctan(rho)
    sin_nu, cos_nu = np.sin(nu), np.cos(nu)
    sin_lat0, cos_lat0 = math.sin(lat0), math.cos(lat0)
    safe_rho = np.where(rho == 0.0, 1.0, rho)

    arg = cos_nu * sin_lat0 + y * sin_nu * cos_lat0 / safe_rho
    lat = np.arcsin(np.clip(arg, -1.0, 1.0))
    dlon = np.arctan2(x * sin_nu, rho * cos_lat0 * cos_nu - y * sin_lat0 * sin_nu)
    lat = np.where(rho == 0.0, lat0, lat)
    lon = np.where(rho == 0.0, lon0, lon0 + dlon)
    lat, lon = wrap_sphere(lat, lon)
    if lat.ndim == 0:
        return SphereCoord(float(lat), float(lon))
    return SphereCoord(lat, lon)


@dataclass(frozen=True, eq=False)
class SamplingGrid:
    """Fractional source coordinates for every tap of every output pixel.

    ``coords[i, j, t]`` is the (row, col) in the input image sampled by tap
    ``t`` of output pixel ``(i, j)``. Columns are wrapped to [-0.5, W - 0.5);
    rows lie in [-0.5, H - 0.5], the half-pixel bands next to the poles being
    resolved across the pole by the sampler.
    """

    height: int
    width: int
    out_height: int
    out_width: int
    stride: int
    coords: np.ndarray

    @property
    def taps_per_pixel(self) -> int:
        return self.coords.shape[2]

    def tap_offsets(self) -> np.ndarray:
        """Tap coordinates relative to each output pixel's anchor, columns wrapped to [-W/2, W/2)."""
        rows = np.arange(self.out_height) * self.stride
        cols = np.arange(self.out_width) * self.stride
        off = self.coords.copy()
        off[..., 0] -= rows[:, None, None]
        off[..., 1] -= cols[None, :, None]
        off[..., 1] = np.mod(off[..., 1] + self.width / 2, self.width) - self.width / 2
        return off


def _build_grid(height: int, width: int, stride: int, offsets) -> SamplingGrid:
    _check_erp(height, width)
    step = math.tan(TWO_PI / width)
    out_h, out_w = height // stride, width // stride
    anchor_rows = np.arange(out_h) * stride
    anchor_cols = np.arange(out_w) * stride

    coords = np.empty((out_h, out_w, len(offsets), 2), dtype=np.float64)
    # taps depend on latitude only; compute one column and shift along longitude
    lat0, _ = pixel_to_sphere(anchor_rows, np.zeros_like(anchor_rows), height, width)
    base_lon = -math.pi + math.pi / width
    for i, lat in enumerate(lat0):
        for t, (di, dj) in enumerate(offsets):
            if di == 0 and dj == 0:
                coords[i, :, t, 0] = anchor_rows[i]
                coords[i, :, t, 1] = anchor_cols
                continue
            tap_lat, tap_lon = gnomonic_inverse(SphereCoord(lat, base_lon), dj * step, -di * step)
            r, c = sphere_to_pixel(tap_lat, tap_lon, height, width)
            coords[i, :, t, 0] = r
            coords[i, :, t, 1] = c + anchor_cols
    coords[..., 1] = np.mod(coords[..., 1] + 0.5, width) - 0.5
    coords.setflags(write=False)
    return SamplingGrid(height, width, out_h, out_w, stride, coords)


CONV_TAPS = tuple((di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1))
POOL_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))


def build_conv_grid(height: int, width: int, kernel: int = 3, stride: int = 1) -> SamplingGrid:
    """3x3 stride-1 spherical convolution grid; the center tap is the output pixel itself."""
    if kernel != 3 or stride != 1:
        raise GeometryError("only 3x3 stride-1 spherical convolutions are supported")
    if height < 4:
        raise GeometryError(f"height must be >= 4, got {height}")
    return _build_grid(height, width, 1, CONV_TAPS)


def build_pool_grid(height: int, width: int, kernel: int = 2, stride: int = 2) -> SamplingGrid:
    """2x2 stride-2 spherical pooling grid anchored at each block's top-left pixel."""
    if kernel != 2 or stride != 2:
        raise GeometryError("only 2x2 stride-2 spherical pooling is supported")
    if height % 2 or width % 2:
        raise GeometryError(f"pooling needs even dimensions, got {height}x{width}")
    return _build_grid(height, width, 2, POOL_TAPS)


def spherical_weights(height: int, width: int) -> np.ndarray:
    """Per-pixel cos(latitude) weights normalized to mean 1."""
    _check_erp(height, width)
    lat, _ = pixel_to_sphere(np.arange(height), np.zeros(height), height, width)
    w = np.repeat(np.cos(lat)[:, None], width, axis=1)
    return w / w.mean()


def grid_rows(grid: SamplingGrid):
    """Yield (out_row, out_col, tap_index, src_row, src_col) tuples for CSV dumps."""
    h, w, taps, _ = grid.coords.shape
    for i in range(h):
        for j in range(w):
            for t in range(taps):
                yield i, j, t, float(grid.coords[i, j, t, 0]), float(grid.coords[i, j, t, 1])
