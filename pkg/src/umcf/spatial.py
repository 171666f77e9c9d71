"""Spatial statistics of class probability maps and the spatial token set.

Probability maps are (H, W, D, 3) arrays with channels ordered ET, TC, WT.
Coordinates are integer voxel indices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .field import InvalidInputError, as_grid, l2_normalize
from .tokens import TokenSet, make_token_set, project_embeddings

CLASSES = ("ET", "TC", "WT")
EPS_MASS = 1e-8
HARD_THRESHOLD = 0.5
# Stand-in for +inf in the squared-distance passes; keeps parabola intersections finite.
_FAR = 1e30


def class_index(c) -> int:
    if isinstance(c, str):
        try:
            return CLASSES.index(c.upper())
        except ValueError:
            raise InvalidInputError(f"unknown class {c!r}; expected one of {CLASSES}") from None
    if c not in (0, 1, 2):
        raise InvalidInputError(f"class index out of range: {c}")
    return int(c)


def as_probmaps(p, name: str = "probmaps") -> np.ndarray:
    a = as_grid(p, name, channels=True)
    if a.shape[3] != 3:
        raise InvalidInputError(f"{name} must have 3 channels (ET, TC, WT), got {a.shape[3]}")
    if a.min() < 0.0 or a.max() > 1.0:
        raise InvalidInputError(f"{name} values must lie in [0, 1]")
    return a


def harden(pc: np.ndarray, threshold: float = HARD_THRESHOLD) -> np.ndarray:
    """Binary mask of voxels with probability strictly above ``threshold``."""
    return np.asarray(pc) > threshold


def _coords(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def weighted_centroid(pc):
    """Returns ``(centroid, mass, degenerate)``; zero mass falls back to the volume center."""
    pc = as_grid(pc, "probability map", channels=False)
    mass = float(np.sum(pc))
    if mass < EPS_MASS:
        center = np.array([(n - 1) / 2.0 for n in pc.shape])
        return center, mass, True
    mu = np.array([np.sum(pc * x) for x in _coords(pc.shape)]) / mass
    return mu, mass, False


def weighted_covariance(pc, mu):
    """Returns ``(cov, degenerate)``; the matrix is symmetric by construction."""
    pc = as_grid(pc, "probability map", channels=False)
    mass = float(np.sum(pc))
    if mass < EPS_MASS:
        return np.zeros((3, 3)), True
    centered = [x - m for x, m in zip(_coords(pc.shape), mu)]
    cov = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            cov[i, j] = cov[j, i] = np.sum(pc * centered[i] * centered[j]) / mass
    return cov, False


def sym3_eigenvalues(m) -> tuple[float, float, float]:
    """Closed-form eigenvalues of a real symmetric 3x3 matrix, descending.

    Trigonometric solution of the depressed characteristic cubic.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3) or not np.all(np.isfinite(a)):
        raise InvalidInputError(f"expected a finite 3x3 matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-9 * scale:
        raise InvalidInputError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    q = (a[0, 0] + a[1, 1] + a[2, 2]) / 3.0
    diag = np.array([a[0, 0], a[1, 1], a[2, 2]]) - q
    p2 = float(np.sum(diag * diag) + 2.0 * off)
    if p2 == 0.0:
        return q, q, q
    if off == 0.0:
        l1, l2, l3 = sorted((a[0, 0], a[1, 1], a[2, 2]), reverse=True)
        return float(l1), float(l2), float(l3)
    p = math.sqrt(p2 / 6.0)
    b = (a - q * np.eye(3)) / p
    r = (
        b[0, 0] * (b[1, 1] * b[2, 2] - b[1, 2] * b[2, 1])
        - b[0, 1] * (b[1, 0] * b[2, 2] - b[1, 2] * b[2, 0])
        + b[0, 2] * (b[1, 0] * b[2, 1] - b[1, 1] * b[2, 0])
    ) / 2.0
    # |r| <= 1 in exact arithmetic; rounding can push it just outside.
    phi = math.acos(min(1.0, max(-1.0, r))) / 3.0
    l1 = q + 2.0 * p * math.cos(phi)
    l3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    l1, l2, l3 = sorted((l1, l2, l3), reverse=True)
    return float(l1), float(l2), float(l3)


@numba.njit(cache=True)
def _lower_envelope_rows(rows):
    """In-place 1-D squared distance transform of each row (lower envelope of parabolas)."""
    n_rows, n = rows.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    f = np.empty(n, dtype=np.float64)
    for r in range(n_rows):
        for i in range(n):
            f[i] = rows[r, i]
        k = 0
        v[0] = 0
        z[0] = -np.inf
        z[1] = np.inf
        for q in range(1, n):
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            while s <= z[k]:
                k -= 1
                s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d = q - v[k]
            rows[r, q] = d * d + f[v[k]]


def squared_edt(features: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from every voxel to the nearest ``True`` voxel.

    Exact, separable, linear per axis.  Voxels of an all-False input get >= 1e30.
    """
    feat = np.asarray(features, dtype=bool)
    out = np.where(feat, 0.0, _FAR)
    for axis in range(feat.ndim):
        moved = np.ascontiguousarray(np.moveaxis(out, axis, -1))
        shape = moved.shape
        rows = moved.reshape(-1, shape[-1])
        _lower_envelope_rows(rows)
        out = np.moveaxis(rows.reshape(shape), -1, axis)
    return np.ascontiguousarray(out)


def signed_distance_transform(mask):
    """Signed center-to-center distance to the nearest opposite-class voxel.

    Positive inside the mask, negative outside.  Returns ``(sdt, degenerate)``;
    a mask that is all inside or all outside gives zeros with ``degenerate`` set.
    """
    m = np.asarray(mask)
    if m.ndim != 3 or min(m.shape) < 1:
        raise InvalidInputError(f"mask must be a non-empty 3-D grid, got shape {m.shape}")
    m = m.astype(bool)
    n_in = int(m.sum())
    if n_in == 0 or n_in == m.size:
        return np.zeros(m.shape), True
    inside = np.sqrt(squared_edt(~m))
    outside = np.sqrt(squared_edt(m))
    return np.where(m, inside, -outside), False


def mean_sdt(sdt) -> float:
    return float(np.mean(as_grid(sdt, "sdt", channels=False)))


def local_tv(pc: np.ndarray) -> np.ndarray:
    """Per-voxel mean absolute difference to the existing 6-neighbours."""
    pc = np.asarray(pc, dtype=np.float64)
    total = np.zeros_like(pc)
    count = np.zeros_like(pc)
    for axis in range(3):
        n = pc.shape[axis]
        if n < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        diff = np.abs(pc[tuple(hi)] - pc[tuple(lo)])
        total[tuple(lo)] += diff
        total[tuple(hi)] += diff
        count[tuple(lo)] += 1
        count[tuple(hi)] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (grid edge does not count)."""
    m = np.asarray(mask, dtype=bool)
    exposed = np.zeros_like(m)
    for axis in range(3):
        n = m.shape[axis]
        if n < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        differs = m[tuple(lo)] != m[tuple(hi)]
        exposed[tuple(lo)] |= differs
        exposed[tuple(hi)] |= differs
    return exposed & m


@dataclass(frozen=True)
class SpatialStats:
    centroid: np.ndarray
    covariance: np.ndarray
    eigenvalues: tuple[float, float, float]
    mean_sdt: float
    mass: float
    degenerate: bool

    def as_dict(self) -> dict:
        return {
            "centroid": [float(x) for x in self.centroid],
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "mean_sdt": float(self.mean_sdt),
            "mass": float(self.mass),
            "degenerate": bool(self.degenerate),
        }


@dataclass(frozen=True)
class TopoFeatures:
    smoothness: float
    boundary_gradient: float
    surface_to_volume: float
    degenerate: bool  # empty hardened mask

    def vector(self) -> np.ndarray:
        return np.array([self.smoothness, self.boundary_gradient, self.surface_to_volume])


def spatial_stats(probmaps, c, threshold: float = HARD_THRESHOLD) -> SpatialStats:
    pc = as_probmaps(probmaps)[..., class_index(c)]
    mu, mass, degenerate = weighted_centroid(pc)
    if degenerate:
        return SpatialStats(mu, np.zeros((3, 3)), (0.0, 0.0, 0.0), 0.0, mass, True)
    cov, _ = weighted_covariance(pc, mu)
    eig = sym3_eigenvalues(cov)
    sdt, _ = signed_distance_transform(harden(pc, threshold))
    return SpatialStats(mu, cov, eig, mean_sdt(sdt), mass, False)


def hier_token(stats: SpatialStats):
    """Normalized ``[centroid, eigenvalues, mean SDT]`` 7-vector; returns ``(vector, degenerate)``."""
    raw = np.concatenate([stats.centroid, np.asarray(stats.eigenvalues), [stats.mean_sdt]])
    return l2_normalize(raw)


def topo_features(probmaps, c, threshold: float = HARD_THRESHOLD) -> TopoFeatures:
    pc = as_probmaps(probmaps)[..., class_index(c)]
    smooth = float(np.mean(local_tv(pc)))
    mask = harden(pc, threshold)
    sdt, _ = signed_distance_transform(mask)
    band = np.abs(sdt) <= 2.0
    grad = np.sqrt(sum(g * g for g in _central_gradient(pc)))
    bgrad = float(np.mean(grad[band])) if band.any() else 0.0
    n_mask = int(mask.sum())
    if n_mask == 0:
        return TopoFeatures(smooth, bgrad, 0.0, True)
    s2v = int(boundary_voxels(mask).sum()) / n_mask
    return TopoFeatures(smooth, bgrad, float(s2v), False)


def _central_gradient(pc: np.ndarray):
    """Central differences inside, one-sided at the edges, zero along singleton axes."""
    return [np.gradient(pc, axis=a) if pc.shape[a] > 1 else np.zeros_like(pc) for a in range(3)]


def build_spatial_tokens(probmaps, dim: int, seed: int = 0, threshold: float = HARD_THRESHOLD) -> TokenSet:
    """Six spatial tokens: hierarchical ET, TC, WT then topological ET, TC, WT, embedded in ``dim``."""
    p = as_probmaps(probmaps)
    hier, topo, degen, stats = [], [], [], []
    for c in CLASSES:
        st = spatial_stats(p, c, threshold)
        tf = topo_features(p, c, threshold)
        h, h_deg = hier_token(st)
        t, t_deg = l2_normalize(tf.vector())
        hier.append(h)
        topo.append(t)
        degen.append((st.degenerate or h_deg, st.degenerate or t_deg))
        stats.append(st)
    hier_proj, lifted_h = project_embeddings(np.stack(hier), dim, seed)
    topo_proj, lifted_t = project_embeddings(np.stack(topo), dim, seed)
    vectors = np.concatenate([hier_proj, topo_proj])
    flags = [d[0] for d in degen] + [d[1] for d in degen]
    labels = [f"{c}-hier" for c in CLASSES] + [f"{c}-topo" for c in CLASSES]
    meta = {"stats": dict(zip(CLASSES, stats)), "lifted": lifted_h or lifted_t}
    return make_token_set("spatial", vectors, labels, degenerate=flags, meta=meta)
