"""Per-voxel uncertainty fields feeding the gated fusion, each valued in [0, 1]."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .spatial import as_probmaps, local_tv


@dataclass(frozen=True)
class UncertaintyFields:
    u_V: np.ndarray
    u_T: np.ndarray
    u_S: np.ndarray
    u_TS: np.ndarray

    def stacked(self) -> np.ndarray:
        """(H, W, D, 4) in the order V, T, S, TS."""
        return np.stack([self.u_V, self.u_T, self.u_S, self.u_TS], axis=-1)

    def summary(self) -> dict:
        out = {}
        for name in ("u_V", "u_T", "u_S", "u_TS"):
            a = getattr(self, name)
            out[name] = {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max())}
        return out


def u_visual(probmaps) -> np.ndarray:
    """Mean binary entropy over the three (nested, non-exclusive) classes, in bits."""
    p = as_probmaps(probmaps)
    h = entr(p) + entr(1.0 - p)
    return np.clip(h.mean(axis=-1) / math.log(2.0), 0.0, 1.0)


def u_text(phi_t) -> np.ndarray:
    return 1.0 - np.asarray(phi_t, dtype=np.float64)


def u_spatial(probmaps) -> np.ndarray:
    p = as_probmaps(probmaps)
    tv = np.mean([local_tv(p[..., c]) for c in range(3)], axis=0)
    return np.clip(tv, 0.0, 1.0)


def u_joint(u_t, u_s) -> np.ndarray:
    return (np.asarray(u_t) + np.asarray(u_s)) / 2.0


def compute_uncertainties(probmaps, phi_t) -> UncertaintyFields:
    ut = u_text(phi_t)
    us = u_spatial(probmaps)
    return UncertaintyFields(u_visual(probmaps), ut, us, u_joint(ut, us))
