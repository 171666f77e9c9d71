"""Synthetic nested-ellipsoid phantoms and segmentation metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import InvalidInputError, l2_normalize
from .spatial import HARD_THRESHOLD, as_probmaps, harden
from .tokens import PhraseEmbedding

# Region labels of the phantom volume; nesting is ET inside necrosis/TC inside edema/WT.
BACKGROUND, EDEMA, NECROSIS, ENHANCING = 0, 1, 2, 3


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def violation_mask(probmaps, threshold: float = HARD_THRESHOLD) -> np.ndarray:
    p = as_probmaps(probmaps)
    et, tc, wt = (harden(p[..., c], threshold) for c in range(3))
    return (et & ~tc) | (tc & ~wt)


def hierarchy_violation_rate(probmaps, threshold: float = HARD_THRESHOLD) -> float:
    """Fraction of voxels whose hardened labels break ET <= TC <= WT."""
    return float(violation_mask(probmaps, threshold).mean())


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    center: tuple[float, float, float] | None = None  # defaults to the volume center
    wt_axes: tuple[float, float, float] = (12.0, 10.0, 9.0)
    tc_axes: tuple[float, float, float] = (8.0, 7.0, 6.0)
    et_axes: tuple[float, float, float] = (5.0, 4.0, 4.0)
    tc_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    et_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    feature_dim: int = 32
    anchor_seed: int = 7
    feature_noise: float = 0.5
    blur: float = 1.0
    violation_rate: float = 0.0
    seed: int = 42

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown phantom spec key(s): {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Phantom:
    spec: PhantomSpec
    labels: np.ndarray  # region label volume (BACKGROUND..ENHANCING)
    masks: np.ndarray  # (H, W, D, 3) bool ground truth, ET/TC/WT
    features: np.ndarray  # (H, W, D, d) unit rows
    probmaps: np.ndarray  # (H, W, D, 3)
    anchors: np.ndarray  # (4, d) region anchors
    phrases: list[PhraseEmbedding] = field(default_factory=list)

    def token_document(self) -> dict:
        """Semantic token file content for the phantom's phrases (the ``words`` form)."""
        return {
            "dim": int(self.features.shape[3]),
            "modality": "semantic",
            "tokens": [
                {"label": p.phrase, "words": [[float(x) for x in w] for w in p.word_vectors]}
                for p in self.phrases
            ],
        }


def _ellipsoid(dims, center, axes) -> np.ndarray:
    x, y, z = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    r = ((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2 + ((z - center[2]) / axes[2]) ** 2
    return r <= 1.0


def simplex_anchors(n: int, dim: int, seed: int) -> np.ndarray:
    """``n`` unit vectors with pairwise inner product -1/(n-1), randomly rotated into ``dim``."""
    if dim < n:
        raise InvalidInputError(f"feature dim {dim} too small for {n} simplex anchors")
    vertices = np.eye(n) - 1.0 / n
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    return vertices @ q.T


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Nested ellipsoids with anchor-plus-noise features and corrupted probability maps."""
    dims = tuple(int(n) for n in spec.dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidInputError(f"bad phantom dims {spec.dims}")
    if not 0.0 <= spec.violation_rate <= 1.0:
        raise InvalidInputError("violation_rate must lie in [0, 1]")
    if spec.feature_noise < 0 or spec.blur < 0:
        raise InvalidInputError("feature_noise and blur must be >= 0")
    wt_a, tc_a, et_a = (np.asarray(a, dtype=np.float64) for a in (spec.wt_axes, spec.tc_axes, spec.et_axes))
    if not (np.all(wt_a > tc_a) and np.all(tc_a > et_a) and np.all(et_a > 0)):
        raise InvalidInputError("semi-axes must strictly decrease WT > TC > ET > 0 on every axis")
    center = np.asarray(spec.center if spec.center is not None else [(n - 1) / 2.0 for n in dims])
    wt = _ellipsoid(dims, center, wt_a)
    tc = _ellipsoid(dims, center + np.asarray(spec.tc_offset), tc_a)
    et = _ellipsoid(dims, center + np.asarray(spec.tc_offset) + np.asarray(spec.et_offset), et_a)
    if np.any(et & ~tc) or np.any(tc & ~wt):
        raise InvalidInputError("ellipsoids are not nested on the voxel grid; reduce the offsets")
    if not et.any():
        raise InvalidInputError("enhancing region is empty on the voxel grid")

    labels = np.full(dims, BACKGROUND, dtype=np.int64)
    labels[wt] = EDEMA
    labels[tc] = NECROSIS
    labels[et] = ENHANCING

    d = spec.feature_dim
    anchors = simplex_anchors(4, d, spec.anchor_seed)
    rng = np.random.default_rng(spec.seed)
    # Per-component std scaled so the noise vector norm is about feature_noise.
    noise = rng.standard_normal(dims + (d,)) * (spec.feature_noise / np.sqrt(d))
    features, _ = l2_normalize(anchors[labels] + noise, axis=-1)

    masks = np.stack([et, tc, wt], axis=-1)
    probmaps = masks.astype(np.float64)
    if spec.blur > 0:
        probmaps = np.stack([gaussian_filter(probmaps[..., c], spec.blur, mode="constant") for c in range(3)], -1)
    probmaps = np.clip(probmaps, 0.0, 1.0)
    if spec.violation_rate > 0:
        swap = rng.random(dims) < spec.violation_rate
        et_p = probmaps[..., 0].copy()
        probmaps[..., 0] = np.where(swap, probmaps[..., 1], probmaps[..., 0])
        probmaps[..., 1] = np.where(swap, et_p, probmaps[..., 1])

    # Two "words" per phrase: the region anchor and a slightly perturbed copy.
    word_noise = rng.standard_normal((3, d)) * (0.1 / np.sqrt(d))
    phrases = [
        PhraseEmbedding("enhancing tumor", np.stack([anchors[ENHANCING], anchors[ENHANCING] + word_noise[0]])),
        PhraseEmbedding("necrotic core", np.stack([anchors[NECROSIS], anchors[NECROSIS] + word_noise[1]])),
        PhraseEmbedding("peritumoral edema", np.stack([anchors[EDEMA], anchors[EDEMA] + word_noise[2]])),
    ]
    return Phantom(spec, labels, masks, features, probmaps, anchors, phrases)
