"""Coherent-field fusion: semantic field, biased visual attention, token messages,
channel modulation, uncertainty gating and the convex fixed-point update.

All fields are (H, W, D, d) arrays whose voxel rows are unit vectors.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._parallel import map_rows
from .evaluation import hierarchy_violation_rate
from .field import (
    InvalidInputError,
    as_grid,
    block_pool,
    flatten_voxels,
    l2_normalize,
    logistic,
    similarity,
    tempered_softmax,
    unflatten_voxels,
)
from .spatial import EPS_MASS, HARD_THRESHOLD, as_probmaps, build_spatial_tokens, local_tv
from .tokens import TokenSet, build_visual_tokens
from .uncertainty import UncertaintyFields, compute_uncertainties

STREAMS = ("V", "T", "S", "TS")


class ConfigError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: "FusionDiagnostics"):
        super().__init__(message)
        self.diagnostics = diagnostics


# JSON key -> attribute name where they differ.
_CONFIG_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class FusionConfig:
    tau: float = 0.1
    lam: float = 0.5
    iterations: int = 3
    block: int = 8
    w_hier: float = 1.0
    w_topo: float = 0.5
    refresh_probmaps: bool = True
    renormalize_each_iter: bool = True
    disable_mV: bool = False
    disable_mT: bool = False
    disable_mS: bool = False
    disable_mTS: bool = False
    disable_pfug: bool = False
    pairwise_mode: bool = False
    disable_bias: bool = False
    hard_threshold: float = HARD_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if not (isinstance(self.tau, (int, float)) and self.tau > 0):
            raise ConfigError(f"tau must be > 0, got {self.tau!r}")
        if not (isinstance(self.lam, (int, float)) and 0 < self.lam < 1):
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam!r}")
        for name in ("iterations", "block", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.block < 1:
            raise ConfigError(f"block must be >= 1, got {self.block}")
        if self.w_hier < 0 or self.w_topo < 0:
            raise ConfigError("penalty weights w_hier, w_topo must be >= 0")
        if not 0 < self.hard_threshold < 1:
            raise ConfigError(f"hard_threshold must lie in (0, 1), got {self.hard_threshold!r}")
        for f in fields(self):
            if f.type == "bool" and not isinstance(getattr(self, f.name), bool):
                raise ConfigError(f"{f.name} must be a boolean")

    @property
    def enabled(self) -> tuple[str, ...]:
        off = {"V": self.disable_mV, "T": self.disable_mT, "S": self.disable_mS, "TS": self.disable_mTS}
        return tuple(s for s in STREAMS if not off[s])

    @classmethod
    def from_dict(cls, doc: dict) -> "FusionConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, value in doc.items():
            name = _CONFIG_ALIASES.get(key, key)
            if name not in known or key == "lam":
                raise ConfigError(f"unknown config key {key!r}")
            kw[name] = value
        return cls(**kw)

    def to_dict(self) -> dict:
        inverse = {v: k for k, v in _CONFIG_ALIASES.items()}
        return {inverse.get(k, k): v for k, v in asdict(self).items()}


@dataclass
class FusionDiagnostics:
    residuals: list[float] = field(default_factory=list)
    gate_means: list[dict[str, float]] = field(default_factory=list)
    mean_phi_T: list[float] = field(default_factory=list)
    raw_hier_penalty: list[float] = field(default_factory=list)
    violation_rate_before: float = 0.0
    violation_rate_after: float = 0.0
    flags: list[str] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = []
        for t, res in enumerate(self.residuals):
            rec = {"event": "iteration", "t": t + 1, "residual": res, "gate_means": self.gate_means[t],
                   "mean_phi_T": self.mean_phi_T[t]}
            if t < len(self.raw_hier_penalty):
                rec["raw_hier_penalty"] = self.raw_hier_penalty[t]
            lines.append(json.dumps(rec, sort_keys=True))
        lines.append(json.dumps({
            "event": "summary",
            "residuals": self.residuals,
            "violation_rate_before": self.violation_rate_before,
            "violation_rate_after": self.violation_rate_after,
            "flags": self.flags,
        }, sort_keys=True))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- semantic field


def semantic_field(features, t_bar, tau: float, t_bar_degenerate: bool = False):
    """Logistic of tempered cosine similarity to the semantic prototype.

    Returns ``(phi, degenerate)``; a degenerate prototype yields 0.5 everywhere.
    """
    f = as_grid(features, "features", channels=True)
    t_bar = np.asarray(t_bar, dtype=np.float64)
    if t_bar.shape != (f.shape[3],):
        raise InvalidInputError(f"prototype dim {t_bar.shape} != field dim {f.shape[3]}")
    if not tau > 0:
        raise InvalidInputError(f"temperature must be > 0, got {tau}")
    if t_bar_degenerate or not np.any(t_bar):
        return np.full(f.shape[:3], 0.5), True
    sim = similarity(flatten_voxels(f), t_bar[None, :])
    return unflatten_voxels(logistic(sim / tau), f.shape)[..., 0], False


# ---------------------------------------------------------------- penalties


def hier_penalty(probmaps, w_hier: float) -> np.ndarray:
    """Hinge on nesting violations: ``w * (max(0, ET - TC) + max(0, TC - WT))``."""
    p = as_probmaps(probmaps)
    et, tc, wt = p[..., 0], p[..., 1], p[..., 2]
    return w_hier * (np.maximum(0.0, et - tc) + np.maximum(0.0, tc - wt))


def topo_penalty(probmaps, w_topo: float) -> np.ndarray:
    """Local total variation averaged over classes, scaled by ``w_topo``."""
    p = as_probmaps(probmaps)
    return w_topo * np.mean([local_tv(p[..., c]) for c in range(3)], axis=0)


# ---------------------------------------------------------------- attention


def _attend(rows: np.ndarray, tokens: np.ndarray, tau: float, bias=None) -> np.ndarray:
    """Per-row softmax attention over ``tokens`` with an optional per-token score bias."""

    def chunk(sl):
        scores = similarity(rows[sl], tokens)
        if bias is not None:
            scores = scores + bias[None, :]
        weights = tempered_softmax(scores, tau, axis=1)
        return np.einsum("nk,kd->nd", weights, tokens)

    return map_rows(chunk, rows.shape[0])


def attention_weights(features, tokens, tau: float, bias=None) -> np.ndarray:
    """(N, k) attention weights in serialized voxel order; exposed for inspection."""
    rows = flatten_voxels(as_grid(features, "features", channels=True))
    scores = similarity(rows, np.asarray(tokens))
    if bias is not None:
        scores = scores + np.asarray(bias)[None, :]
    return tempered_softmax(scores, tau, axis=1)


def visual_bias(visual: TokenSet, phi_t, r_hier, r_topo) -> np.ndarray:
    """Per-token bias from block means at each token's source block.

    ``log(1 + phi) - r_hier - r_topo`` evaluated voxel-wise depends only on x and
    would cancel in the softmax over tokens, so it is read at the token's block.
    """
    block = visual.meta.get("block")
    if block is None:
        raise InvalidInputError("visual tokens carry no source block size")
    terms = []
    for grid in (phi_t, r_hier, r_topo):
        _, means = block_pool(grid, block)
        terms.append(means[:, 0])
    phi_b, hier_b, topo_b = terms
    if phi_b.shape[0] != len(visual):
        raise InvalidInputError("visual tokens were built on a different grid")
    return np.log1p(phi_b) - hier_b - topo_b


def varw(features, visual: TokenSet, phi_t, r_hier, r_topo, tau: float, bias: bool = True):
    """Visual message: attention over visual tokens with medical-prior bias.

    Returns ``(m_V, degenerate)``.
    """
    f = as_grid(features, "features", channels=True)
    if len(visual) == 0:
        raise InvalidInputError("empty visual token set")
    if visual.dim != f.shape[3]:
        raise InvalidInputError(f"token dim {visual.dim} != field dim {f.shape[3]}")
    keep = ~visual.degenerate
    if not keep.any():
        return np.zeros_like(f), True
    mu = visual_bias(visual, phi_t, r_hier, r_topo)[keep] if bias else None
    m = _attend(flatten_voxels(f), visual.tokens[keep], tau, mu)
    return unflatten_voxels(m, f.shape), False


def ssam(features, tokens: TokenSet, tau: float):
    """Similarity-softmax message over a semantic or spatial token set.

    Degenerate tokens are left out; an empty or all-degenerate set gives a zero
    message with ``degenerate`` set.  Returns ``(m_q, degenerate)``.
    """
    f = as_grid(features, "features", channels=True)
    if tokens.modality not in ("semantic", "spatial"):
        raise InvalidInputError(f"ssam expects semantic or spatial tokens, got {tokens.modality}")
    if len(tokens) and tokens.dim != f.shape[3]:
        raise InvalidInputError(f"token dim {tokens.dim} != field dim {f.shape[3]}")
    active = tokens.active if len(tokens) else np.zeros((0, f.shape[3]))
    if active.shape[0] == 0:
        return np.zeros_like(f), True
    return unflatten_voxels(_attend(flatten_voxels(f), active, tau), f.shape), False


def zscm(t_bar, s_bar, features) -> np.ndarray:
    f = as_grid(features, "features", channels=True)
    gate = np.asarray(t_bar, dtype=np.float64) * np.asarray(s_bar, dtype=np.float64)
    if gate.shape != (f.shape[3],):
        raise InvalidInputError(f"prototype dims {gate.shape} != field dim {f.shape[3]}")
    return f * gate


# ---------------------------------------------------------------- gating


def gate_weights(uncertainties: dict[str, np.ndarray], enabled) -> np.ndarray:
    """Softmax of ``-u`` over the enabled streams: (..., len(enabled))."""
    if not enabled:
        raise InvalidInputError("all streams disabled")
    u = np.stack([np.asarray(uncertainties[s], dtype=np.float64) for s in enabled], axis=-1)
    return tempered_softmax(-u, 1.0, axis=-1)


def pairwise_weights(uncertainties: dict[str, np.ndarray], enabled) -> np.ndarray:
    """Effective stream weights when every pair is gated on its own and pair results are averaged."""
    if not enabled:
        raise InvalidInputError("all streams disabled")
    shape = np.shape(uncertainties[enabled[0]])
    if len(enabled) == 1:
        return np.ones(shape + (1,))
    w = np.zeros(shape + (len(enabled),))
    pairs = list(itertools.combinations(range(len(enabled)), 2))
    for i, j in pairs:
        pw = gate_weights(uncertainties, (enabled[i], enabled[j]))
        w[..., i] += pw[..., 0]
        w[..., j] += pw[..., 1]
    return w / len(pairs)


def _mix(streams: dict[str, np.ndarray], enabled, weights: np.ndarray) -> np.ndarray:
    out = np.zeros_like(streams[enabled[0]])
    for k, s in enumerate(enabled):
        out += weights[..., k : k + 1] * streams[s]
    return out


def pfug(streams: dict[str, np.ndarray], uncertainties: dict[str, np.ndarray], enabled=None):
    """Uncertainty-gated fusion of the enabled message streams.

    Returns ``(m_tilde, weights)`` with weights shaped (H, W, D, n_enabled).
    """
    enabled = tuple(enabled if enabled is not None else streams)
    w = gate_weights(uncertainties, enabled)
    return _mix(streams, enabled, w), w


def pairwise_fusion(streams: dict[str, np.ndarray], uncertainties: dict[str, np.ndarray], enabled=None):
    enabled = tuple(enabled if enabled is not None else streams)
    w = pairwise_weights(uncertainties, enabled)
    return _mix(streams, enabled, w), w


def convex_update(f_t, m_tilde, lam: float) -> np.ndarray:
    if not 0 < lam < 1:
        raise ConfigError(f"lambda must lie in (0, 1), got {lam}")
    f_t = np.asarray(f_t, dtype=np.float64)
    # Written as a step toward m so that m == F is a fixed point bit for bit.
    return f_t + lam * (np.asarray(m_tilde, dtype=np.float64) - f_t)


# ---------------------------------------------------------------- probability refresh


def project_hierarchy(probmaps) -> np.ndarray:
    """Cumulative max over ET -> TC -> WT, so that ET <= TC <= WT everywhere."""
    p = np.asarray(probmaps, dtype=np.float64)
    return np.maximum.accumulate(p, axis=-1)


def class_anchors(features, probmaps):
    """Contrastive class directions; returns ``(anchors, degenerate)``.

    Each anchor is the normalized difference between the probability-weighted
    mean feature inside the class and the (1 - P)-weighted mean outside it.
    Subtracting the outside mean cancels any component shared by all voxels,
    which the fused messages add, so the probe's zero level stays meaningful.
    """
    f = as_grid(features, "features", channels=True)
    p = as_probmaps(probmaps)
    rows = flatten_voxels(f)
    w_in = flatten_voxels(p)
    w_out = 1.0 - w_in
    mass_in, mass_out = w_in.sum(axis=0), w_out.sum(axis=0)
    empty = (mass_in < EPS_MASS) | (mass_out < EPS_MASS)
    mean_in = np.einsum("nc,nd->cd", w_in, rows) / np.where(empty, 1.0, mass_in)[:, None]
    mean_out = np.einsum("nc,nd->cd", w_out, rows) / np.where(empty, 1.0, mass_out)[:, None]
    anchors, degenerate = l2_normalize(mean_in - mean_out, axis=1)
    anchors[empty] = 0.0
    return anchors, degenerate | empty


def refresh_probmaps(features, anchors, tau: float, previous=None, anchor_degenerate=None):
    """Linear probe ``logistic(sim(F, anchor_c) / tau)`` followed by hierarchy projection.

    Classes with a degenerate anchor keep their ``previous`` map.  Returns
    ``(projected, raw)``.
    """
    f = as_grid(features, "features", channels=True)
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.shape != (3, f.shape[3]):
        raise InvalidInputError(f"expected (3, {f.shape[3]}) anchors, got {anchors.shape}")
    sim = similarity(flatten_voxels(f), anchors)
    raw = unflatten_voxels(logistic(sim / tau), f.shape)
    if anchor_degenerate is not None and np.any(anchor_degenerate):
        if previous is None:
            raise InvalidInputError("degenerate anchor and no previous maps to fall back on")
        prev = as_probmaps(previous)
        for c in np.flatnonzero(anchor_degenerate):
            raw[..., c] = prev[..., c]
    return project_hierarchy(raw), raw


# ---------------------------------------------------------------- driver


@dataclass
class FusionResult:
    field: np.ndarray
    probmaps: np.ndarray
    diagnostics: FusionDiagnostics
    uncertainties: UncertaintyFields | None = None
    raw_probmaps: np.ndarray | None = None


def _field_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a * a)))


def run_fusion(features, semantic: TokenSet | None, probmaps, cfg: FusionConfig = FusionConfig(),
               visual: TokenSet | None = None) -> FusionResult:
    """Iterate the coherent-field update for ``cfg.iterations`` steps.

    Visual tokens are pooled once from the initial field unless given.  Spatial
    tokens and probability maps are rebuilt every iteration when
    ``cfg.refresh_probmaps`` is set.
    """
    f = as_grid(features, "features", channels=True)
    p = as_probmaps(probmaps)
    if p.shape[:3] != f.shape[:3]:
        raise InvalidInputError(f"features shape {f.shape[:3]} does not match probmaps shape {p.shape[:3]}")
    enabled = cfg.enabled
    if not enabled:
        raise ConfigError("all streams disabled")
    d = f.shape[3]
    if semantic is None:
        if "T" in enabled or "TS" in enabled:
            raise ConfigError("no semantic tokens: disable the T and TS streams explicitly")
        t_bar, t_degen = np.zeros(d), True
    else:
        if semantic.dim != d:
            raise InvalidInputError(f"semantic token dim {semantic.dim} != field dim {d}")
        t_bar, t_degen = semantic.prototype, semantic.prototype_degenerate
    if visual is None and "V" in enabled:
        visual = build_visual_tokens(f, cfg.block, d)

    diag = FusionDiagnostics(violation_rate_before=hierarchy_violation_rate(p, cfg.hard_threshold))
    if t_degen:
        diag.flags.append("semantic prototype degenerate")
    spatial = None
    uncert = None
    raw = None
    for t in range(cfg.iterations):
        if spatial is None or cfg.refresh_probmaps:
            spatial = build_spatial_tokens(p, d, cfg.seed, cfg.hard_threshold)
        phi, _ = semantic_field(f, t_bar, cfg.tau, t_degen)
        r_hier = hier_penalty(p, cfg.w_hier)
        r_topo = topo_penalty(p, cfg.w_topo)

        streams, degenerate = {}, {}
        if "V" in enabled:
            streams["V"], degenerate["V"] = varw(f, visual, phi, r_hier, r_topo, cfg.tau, bias=not cfg.disable_bias)
        if "T" in enabled:
            streams["T"], degenerate["T"] = ssam(f, semantic, cfg.tau)
        if "S" in enabled:
            streams["S"], degenerate["S"] = ssam(f, spatial, cfg.tau)
        if "TS" in enabled:
            streams["TS"] = zscm(t_bar, spatial.prototype, f)
            degenerate["TS"] = t_degen or spatial.prototype_degenerate

        uncert = compute_uncertainties(p, phi)
        u = {"V": uncert.u_V, "T": uncert.u_T, "S": uncert.u_S, "TS": uncert.u_TS}
        for s in enabled:
            if degenerate[s]:
                u[s] = np.ones(f.shape[:3])
                flag = f"stream {s} degenerate"
                if flag not in diag.flags:
                    diag.flags.append(flag)

        if cfg.pairwise_mode:
            m_tilde, w = pairwise_fusion(streams, u, enabled)
        elif cfg.disable_pfug:
            w = np.full(f.shape[:3] + (len(enabled),), 1.0 / len(enabled))
            m_tilde = _mix(streams, enabled, w)
        else:
            m_tilde, w = pfug(streams, u, enabled)

        f_next = convex_update(f, m_tilde, cfg.lam)
        if cfg.renormalize_each_iter:
            f_next, _ = l2_normalize(f_next, axis=-1)
        base = _field_norm(f)
        residual = _field_norm(f_next - f) / base if base > 0 else 0.0
        diag.residuals.append(residual)
        diag.gate_means.append({s: float(w[..., k].mean()) for k, s in enumerate(enabled)})
        diag.mean_phi_T.append(float(phi.mean()))
        f = f_next

        if cfg.refresh_probmaps:
            anchors, a_degen = class_anchors(f, p)
            p, raw = refresh_probmaps(f, anchors, cfg.tau, previous=p, anchor_degenerate=a_degen)
            diag.raw_hier_penalty.append(float(hier_penalty(raw, 1.0).mean()))

        if residual > 10.0 * diag.residuals[0]:
            raise ConvergenceError(f"residual {residual:.3g} exceeds 10x the first residual", diag)

    diag.violation_rate_after = hierarchy_violation_rate(p, cfg.hard_threshold)
    return FusionResult(f, p, diag, uncert, raw)
