"""Occupancy counting, Gaussian blurring and bilinear risk sampling.

The risk field is a blurred hit-count map, not a true distance transform: its
value grows toward obstacles, so descending it pushes query points away.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .scene import write_pgm16


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyGrid:
    origin: tuple[float, float]
    resolution: float
    counts: np.ndarray
    discarded: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape


@dataclass(frozen=True)
class RiskField:
    origin: tuple[float, float]
    resolution: float
    values: np.ndarray
    sigma: float
    oob_value: float | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def boundary_value(self) -> float:
        return float(self.values.max()) + 1.0 if self.oob_value is None else self.oob_value

    def sample(self, x: float, y: float) -> tuple[float, np.ndarray]:
        return sample(self, x, y)


def build_occupancy(points: np.ndarray, origin, resolution: float, shape, height_band=(0.05, 1.0)) -> OccupancyGrid:
    """Bin points whose z lies in ``height_band`` into a ``shape`` = (rows=y, cols=x) grid."""
    if resolution <= 0:
        raise FieldError("resolution must be positive")
    z_lo, z_hi = height_band
    if not z_lo < z_hi:
        raise FieldError(f"height band must satisfy z_lo < z_hi, got {height_band}")
    h, w = (int(s) for s in shape)
    if h <= 0 or w <= 0:
        raise FieldError(f"empty grid dimensions {shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = pts[(pts[:, 2] >= z_lo) & (pts[:, 2] <= z_hi)]
    col = np.floor((pts[:, 0] - origin[0]) / resolution).astype(np.int64)
    row = np.floor((pts[:, 1] - origin[1]) / resolution).astype(np.int64)
    inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    counts = np.zeros((h, w), dtype=np.int64)
    np.add.at(counts, (row[inside], col[inside]), 1)
    return OccupancyGrid((float(origin[0]), float(origin[1])), float(resolution), counts, int((~inside).sum()))


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.ones(1)
    half = math.ceil(3 * sigma)
    i = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (i / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(grid: OccupancyGrid, sigma: float) -> RiskField:
    if sigma < 0:
        raise FieldError(f"sigma must be non-negative, got {sigma}")
    values = grid.counts.astype(np.float64)
    if sigma > 0:
        k = gaussian_kernel(sigma)
        values = correlate1d(values, k, axis=0, mode="constant", cval=0.0)
        values = correlate1d(values, k, axis=1, mode="constant", cval=0.0)
        values = np.maximum(values, 0.0)
    return RiskField(grid.origin, grid.resolution, values, float(sigma))


def sample(field: RiskField, x: float, y: float) -> tuple[float, np.ndarray]:
    """Bilinear value and exact (x, y) gradient per meter.

    Queries in the half-cell rim beyond the outermost centers clamp to the edge
    cells.  Queries outside the grid rectangle return the boundary penalty with
    a gradient of magnitude 1/resolution whose negative points back inside.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise FieldError(f"non-finite query ({x}, {y})")
    res = field.resolution
    h, w = field.values.shape
    gx = (x - field.origin[0]) / res
    gy = (y - field.origin[1]) / res
    if not (0.0 <= gx <= w and 0.0 <= gy <= h):
        outward = np.array([gx - min(max(gx, 0.0), w), gy - min(max(gy, 0.0), h)])
        outward /= np.linalg.norm(outward)
        return field.boundary_value, outward / res
    # continuous coordinates of the query relative to cell centers
    cx, cy = gx - 0.5, gy - 0.5
    dfx = dfy = 1.0
    if cx < 0.0 or cx > w - 1:
        cx, dfx = min(max(cx, 0.0), w - 1.0), 0.0
    if cy < 0.0 or cy > h - 1:
        cy, dfy = min(max(cy, 0.0), h - 1.0), 0.0
    i0 = min(int(math.floor(cx)), max(w - 2, 0))
    j0 = min(int(math.floor(cy)), max(h - 2, 0))
    i1, j1 = min(i0 + 1, w - 1), min(j0 + 1, h - 1)
    tx, ty = cx - i0, cy - j0
    v = field.values
    v00, v10, v01, v11 = v[j0, i0], v[j0, i1], v[j1, i0], v[j1, i1]
    value = (1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10 + (1 - tx) * ty * v01 + tx * ty * v11
    dvdx = ((1 - ty) * (v10 - v00) + ty * (v11 - v01)) * dfx / res
    dvdy = ((1 - tx) * (v01 - v00) + tx * (v11 - v10)) * dfy / res
    return float(value), np.array([dvdx, dvdy])


def sample_many(field: RiskField, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    vals, grads = np.empty(len(xy)), np.empty((len(xy), 2))
    for k, (x, y) in enumerate(xy):
        vals[k], grads[k] = sample(field, float(x), float(y))
    return vals, grads


def frustum_grid(pose, max_range: float, hfov: float, resolution: float, margin: float = 1.0):
    """Axis-aligned world grid covering the camera footprint plus a margin around the robot.

    Returns (origin, shape) for :func:`build_occupancy`.
    """
    x, y, th = (float(p) for p in pose)
    half = min(hfov / 2, math.radians(89))
    corners = [(0.0, 0.0)]
    for a in (th - half, th, th + half):
        corners.append((max_range * math.cos(a), max_range * math.sin(a)))
    pts = np.array(corners)
    # anchored to the pose so the binning is translation equivariant
    lo = np.floor((pts.min(axis=0) - margin) / resolution)
    hi = np.ceil((pts.max(axis=0) + margin) / resolution)
    shape = (int(hi[1] - lo[1]), int(hi[0] - lo[0]))
    return (x + lo[0] * resolution, y + lo[1] * resolution), shape


def export_field(path, field: RiskField) -> None:
    """Write a normalized 16-bit PGM plus a JSON header describing the grid."""
    peak = float(field.values.max())
    norm = field.values / peak if peak > 0 else np.zeros_like(field.values)
    # PGM rows run top-down; flip so +y points up in viewers
    write_pgm16(Path(path).with_suffix(".pgm"), np.rint(norm[::-1] * 65535).astype(np.uint16))
    header = {
        "origin": list(field.origin),
        "resolution": field.resolution,
        "shape": list(field.shape),
        "sigma": field.sigma,
        "peak": peak,
        "rows_flipped": True,
    }
    Path(path).with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
