"""Voxel grids, unit vectors and the similarity kernels used throughout.

Grids are plain numpy arrays indexed ``[x, y, z]`` or ``[x, y, z, c]``.  The
serialized order is x fastest, then y, then z, then channel, which is numpy
Fortran order on that shape.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

# Norm below which a vector is treated as the zero-fallback.
EPS_NORM = 1e-12


class InvalidInputError(ValueError):
    pass


def check_finite(a, name: str = "input") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def as_grid(data, name: str = "grid", channels: bool | None = None) -> np.ndarray:
    """Validate a voxel grid: 3-D scalar or 4-D channelled, finite, non-empty."""
    a = check_finite(data, name)
    if a.ndim not in (3, 4):
        raise InvalidInputError(f"{name} must be 3-D or 4-D, got shape {a.shape}")
    if channels is True and a.ndim != 4:
        raise InvalidInputError(f"{name} must carry a channel axis, got shape {a.shape}")
    if channels is False and a.ndim != 3:
        raise InvalidInputError(f"{name} must be a scalar grid, got shape {a.shape}")
    if min(a.shape) < 1:
        raise InvalidInputError(f"{name} has an empty axis: {a.shape}")
    return a


def l2_normalize(v, axis: int = -1):
    """Scale vectors to unit L2 norm along ``axis``.

    Returns ``(unit, degenerate)``.  Vectors with norm below ``EPS_NORM`` come
    back as all zeros with ``degenerate`` set; for a 1-D input ``degenerate``
    is a plain bool, otherwise a boolean array over the remaining axes.
    """
    v = check_finite(v, "vector")
    if v.ndim == 0 or v.shape[axis] < 1:
        raise InvalidInputError("cannot normalize an empty vector")
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    degenerate = norm < EPS_NORM
    safe = np.where(degenerate, 1.0, norm)
    unit = np.where(degenerate, 0.0, v / safe)
    degenerate = np.squeeze(degenerate, axis=axis)
    if v.ndim == 1:
        degenerate = bool(degenerate)
    return unit, degenerate


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(a @ b, -1.0, 1.0))


def similarity(rows: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Clamped inner products between every row (n, d) and every token (k, d).

    Uses einsum's own loops rather than BLAS so the summation order is fixed.
    """
    return np.clip(np.einsum("nd,kd->nk", rows, tokens), -1.0, 1.0)


def tempered_softmax(scores, tau: float, axis: int = -1) -> np.ndarray:
    if not tau > 0:
        raise InvalidInputError(f"temperature must be > 0, got {tau}")
    s = check_finite(scores, "scores")
    if s.ndim == 0 or s.shape[axis] == 0:
        raise InvalidInputError("softmax over an empty score vector")
    z = s / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def logistic(x):
    return expit(x)


def block_grid_shape(dims, block: int) -> tuple[int, int, int]:
    if block < 1:
        raise InvalidInputError(f"block size must be >= 1, got {block}")
    return tuple(-(-n // block) for n in dims[:3])


def block_pool(grid, block: int):
    """Mean channel vector of each ``block``-sided cube, truncated at the far edges.

    Returns ``(index, means)``: ``index`` is (n, 3) block coordinates and
    ``means`` is (n, C), both in lexicographic block order (x fastest).
    A scalar grid is treated as C = 1.
    """
    g = as_grid(grid)
    if g.ndim == 3:
        g = g[..., None]
    nb = block_grid_shape(g.shape, block)
    sums = g
    counts = np.ones(g.shape[:3])
    for axis in range(3):
        starts = np.arange(0, g.shape[axis], block)
        sums = np.add.reduceat(sums, starts, axis=axis)
        counts = np.add.reduceat(counts, starts, axis=axis)
    means = sums / counts[..., None]
    bx, by, bz = np.meshgrid(*(np.arange(n) for n in nb), indexing="ij")
    index = np.stack([a.ravel(order="F") for a in (bx, by, bz)], axis=1)
    return index, flatten_voxels(means)


def block_ids(dims, block: int) -> np.ndarray:
    """Per-voxel index into the ``block_pool`` ordering."""
    nb = block_grid_shape(dims, block)
    ix, iy, iz = np.meshgrid(*(np.arange(n) // block for n in dims[:3]), indexing="ij")
    return ix + nb[0] * (iy + nb[1] * iz)


def flatten_voxels(grid: np.ndarray) -> np.ndarray:
    """(H, W, D, C) -> (N, C) rows in serialized voxel order."""
    return grid.reshape(-1, grid.shape[3], order="F")


def unflatten_voxels(rows: np.ndarray, dims) -> np.ndarray:
    return rows.reshape(tuple(dims[:3]) + (rows.shape[1],), order="F")
