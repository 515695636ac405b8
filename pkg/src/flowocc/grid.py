"""Grid containers and interpolation.

Every dense grid is a float array with channels last: feature maps are
``(H, W, C)``, flow fields ``(H, W, 2)`` holding ``(dx, dy)`` in pixels,
masks ``(H, W)`` bool, voxel feature grids ``(X, Y, Z, C)`` and label grids
``(X, Y, Z)`` integer. Pixel ``(x, y)`` is column ``x``, row ``y``; continuous
coordinates put the origin at the center of pixel ``(0, 0)``.

Sampling outside the grid reads zeros.
"""
from __future__ import annotations

import numpy as np

from flowocc.errors import ShapeError


def check_feature_map(fm: np.ndarray, name: str = "feature map") -> np.ndarray:
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeError(f"{name} must be (H, W, C), got shape {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise ValueError(f"{name} contains non-finite values")
    return fm


def check_flow(flow: np.ndarray, hw: tuple[int, int] | None = None, name: str = "flow") -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f"{name} must be (H, W, 2), got shape {flow.shape}")
    if hw is not None and flow.shape[:2] != tuple(hw):
        raise ShapeError(f"{name} is {flow.shape[:2]}, expected {tuple(hw)}")
    if not np.all(np.isfinite(flow)):
        raise ValueError(f"{name} contains non-finite values")
    return flow


def bilinear_sample_points(src: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``src`` at arrays of continuous coordinates.

    ``xs`` and ``ys`` broadcast together; the result has shape
    ``broadcast(xs, ys).shape + (C,)``. Neighbours outside the grid
    contribute zero.
    """
    src = np.asarray(src, dtype=np.float64)
    h, w, c = src.shape
    xs, ys = np.broadcast_arrays(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    out = np.zeros(xs.shape + (c,), dtype=np.float64)
    # fixed corner order keeps results reproducible
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(xs.shape + (c,), dtype=np.float64)
            vals[inside] = src[yi[inside], xi[inside]]
            out += (wx * wy)[..., None] * vals
    return out


def bilinear_sample(src: np.ndarray, x: float, y: float) -> np.ndarray:
    """Channel vector of ``src`` interpolated at ``(x, y)``."""
    src = check_feature_map(src, "src")
    return bilinear_sample_points(src, np.float64(x), np.float64(y))


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate arrays of shape ``(h, w)``."""
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp ``src``: ``out[p] = src(p + flow[p])``."""
    src = check_feature_map(src, "src")
    h, w, _ = src.shape
    flow = check_flow(flow, (h, w))
    xs, ys = pixel_grid(h, w)
    return bilinear_sample_points(src, xs + flow[..., 0], ys + flow[..., 1])


def trilinear_sample_points(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear lookup in a ``(X, Y, Z, C)`` grid at continuous voxel indices.

    ``pts`` has shape ``(..., 3)`` ordered ``(x, y, z)`` with integer values at
    voxel centers. Out-of-grid corners contribute zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    nx, ny, nz, c = grid.shape
    pts = np.asarray(pts, dtype=np.float64)
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    lead = pts.shape[:-1]

    out = np.zeros(lead + (c,), dtype=np.float64)
    for corner in range(8):
        offs = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        weight = np.ones(lead, dtype=np.float64)
        idx = []
        for axis, o in enumerate(offs):
            f = frac[..., axis]
            weight = weight * (f if o else 1.0 - f)
            idx.append(base[..., axis] + o)
        ix, iy, iz = idx
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        vals = np.zeros(lead + (c,), dtype=np.float64)
        vals[inside] = grid[ix[inside], iy[inside], iz[inside]]
        out += weight[..., None] * vals
    return out
