"""Visual and semantic token sets, their prototypes, and the fixed embedding projection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .field import InvalidInputError, as_grid, block_pool, check_finite, l2_normalize

MODALITIES = ("visual", "semantic", "spatial")


@dataclass(frozen=True)
class TokenSet:
    """Unit-norm tokens of one modality plus their normalized mean.

    ``degenerate`` marks zero-fallback tokens; they are kept in place (so token
    order stays meaningful) but left out of the prototype and of attention.
    """

    modality: str
    tokens: np.ndarray  # (k, d)
    degenerate: np.ndarray  # (k,) bool
    prototype: np.ndarray  # (d,)
    prototype_degenerate: bool
    labels: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def active(self) -> np.ndarray:
        """Non-degenerate tokens, in order."""
        return self.tokens[~self.degenerate]


@dataclass(frozen=True)
class PhraseEmbedding:
    phrase: str
    word_vectors: np.ndarray  # (n_words, d)

    def __post_init__(self):
        w = check_finite(self.word_vectors, f"word vectors of {self.phrase!r}")
        if w.ndim == 1:
            w = w[None, :]
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise InvalidInputError(f"phrase {self.phrase!r} needs at least one word vector")
        object.__setattr__(self, "word_vectors", w)


def make_token_set(modality: str, vectors, labels: Sequence[str] = (), degenerate=None, meta=None) -> TokenSet:
    """Normalize raw vectors into a TokenSet and compute its prototype."""
    if modality not in MODALITIES:
        raise InvalidInputError(f"unknown modality {modality!r}")
    vecs = check_finite(vectors, "token vectors")
    if vecs.ndim != 2 or vecs.shape[1] < 1:
        raise InvalidInputError(f"token vectors must be (k, d), got {vecs.shape}")
    if vecs.shape[0] == 0:
        unit, degen = vecs.copy(), np.zeros(0, dtype=bool)
    else:
        unit, degen = l2_normalize(vecs, axis=1)
    if degenerate is not None:
        forced = np.asarray(degenerate, dtype=bool)
        unit[forced] = 0.0
        degen = degen | forced
    if np.any(~degen):
        proto, proto_degen = l2_normalize(np.mean(unit[~degen], axis=0))
    else:
        proto, proto_degen = np.zeros(vecs.shape[1]), True
    labels = tuple(labels) if labels else tuple(f"{modality}_{i}" for i in range(vecs.shape[0]))
    if len(labels) != vecs.shape[0]:
        raise InvalidInputError("one label per token required")
    return TokenSet(modality, unit, degen, proto, proto_degen, labels, dict(meta or {}))


def build_visual_tokens(features, block: int, dim: int | None = None) -> TokenSet:
    """One token per cubic block: the normalized block-mean feature vector."""
    f = as_grid(features, "features", channels=True)
    if dim is not None and f.shape[3] != dim:
        raise InvalidInputError(f"feature channels {f.shape[3]} != configured dim {dim}")
    index, means = block_pool(f, block)
    labels = [f"block_{i}_{j}_{k}" for i, j, k in index]
    return make_token_set("visual", means, labels, meta={"block": block, "block_index": index})


def build_semantic_tokens(phrases: Sequence[PhraseEmbedding]) -> TokenSet:
    if not phrases:
        raise InvalidInputError("no phrases given; ablate the semantic stream explicitly instead")
    dims = {p.word_vectors.shape[1] for p in phrases}
    if len(dims) != 1:
        raise InvalidInputError(f"phrases disagree on embedding dim: {sorted(dims)}")
    pooled = np.stack([p.word_vectors.mean(axis=0) for p in phrases])
    return make_token_set("semantic", pooled, [p.phrase for p in phrases])


def projection_matrix(d_in: int, d_out: int, seed: int) -> np.ndarray:
    """Seeded (d_out, d_in) matrix with orthonormal rows, or orthonormal columns when d_out > d_in.

    Rows (or columns) come from classical Gram-Schmidt on a uniform(-1, 1) draw.
    """
    rng = np.random.default_rng([seed, d_in, d_out])
    k, n = min(d_in, d_out), max(d_in, d_out)
    basis = np.zeros((k, n))
    while True:
        draw = rng.uniform(-1.0, 1.0, size=(k, n))
        ok = True
        for i in range(k):
            v = draw[i] - basis[:i].T @ (basis[:i] @ draw[i])
            nv = np.linalg.norm(v)
            if nv < 1e-8:
                ok = False
                break
            basis[i] = v / nv
        if ok:
            break
    return basis if d_out <= d_in else basis.T


def project_embeddings(raw, target_dim: int, seed: int):
    """Map (n, d_text) vectors into ``target_dim`` with a fixed seeded isometry-like map.

    Returns ``(projected, lifted)`` where ``lifted`` flags the d_text < target_dim
    case, in which vectors are embedded through orthonormal columns instead.
    """
    x = check_finite(raw, "embeddings")
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 1:
        raise InvalidInputError(f"embeddings must be (n, d_text) with d_text >= 1, got {x.shape}")
    if target_dim < 1:
        raise InvalidInputError(f"target dim must be >= 1, got {target_dim}")
    d_text = x.shape[1]
    if d_text == target_dim:
        return x.copy(), False
    p = projection_matrix(d_text, target_dim, seed)
    return np.einsum("nd,kd->nk", x, p), target_dim > d_text
