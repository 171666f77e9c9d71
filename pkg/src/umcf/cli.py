"""Command-line driver: ``umcf {fuse,phantom,sdt,stats,dice,diag}``.

Exit codes: 0 success, 1 validation error, 2 IO or format error.
Reports go to stdout as one JSON object per line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from ._parallel import worker_count
from .evaluation import PhantomSpec, dice, generate_phantom, hierarchy_violation_rate
from .field import InvalidInputError
from .fusion import ConfigError, ConvergenceError, FusionConfig, run_fusion, semantic_field
from .spatial import CLASSES, HARD_THRESHOLD, as_probmaps, signed_distance_transform, spatial_stats
from .uncertainty import compute_uncertainties

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

ABLATIONS = {
    "disable_mV": "--disable-mV",
    "disable_mT": "--disable-mT",
    "disable_mS": "--disable-mS",
    "disable_mTS": "--disable-mTS",
    "disable_pfug": "--disable-pfug",
    "pairwise_mode": "--pairwise",
    "disable_bias": "--disable-bias",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(record) -> None:
    print(json.dumps(record, sort_keys=True))


def _read_probmaps(path) -> np.ndarray:
    return as_probmaps(io.read_volume(path).astype(np.float64), f"probmaps {path}")


def _read_mask(path) -> np.ndarray:
    vol = io.read_volume(path)
    if vol.ndim != 3:
        raise InvalidInputError(f"mask {path} must be a 3-D volume, got shape {vol.shape}")
    return vol > 0.5


def cmd_fuse(args) -> int:
    cfg = io.read_config(args.config) if args.config else FusionConfig()
    overrides = {name: True for name in ABLATIONS if getattr(args, name)}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    cfg = dataclasses.replace(cfg, **overrides)
    if not cfg.enabled:
        raise ConfigError("all streams disabled")
    features = io.read_volume(args.features).astype(np.float64)
    probmaps = _read_probmaps(args.probmaps)
    if features.ndim != 4:
        raise InvalidInputError(f"features must be a 4-D volume (H, W, D, d), got shape {features.shape}")
    if features.shape[:3] != probmaps.shape[:3]:
        raise InvalidInputError(
            f"features shape {features.shape[:3]} does not match probmaps shape {probmaps.shape[:3]}"
        )
    tokens = io.read_tokens(args.tokens, features.shape[3], cfg.seed)
    if tokens.modality != "semantic":
        raise InvalidInputError(f"--tokens must hold semantic tokens, got modality {tokens.modality!r}")
    if len(tokens) == 0:
        tokens = None
    try:
        result = run_fusion(features, tokens, probmaps, cfg)
    except ConvergenceError as exc:
        sys.stdout.write(exc.diagnostics.to_jsonl())
        raise
    out = Path(args.out)
    io.write_volume(out, result.field)
    pm_out = Path(args.probmaps_out) if args.probmaps_out else out.with_name(out.stem + "_probmaps.vol")
    io.write_volume(pm_out, result.probmaps)
    if args.uncertainty_out:
        io.write_volume(args.uncertainty_out, result.uncertainties.stacked())
    report = result.diagnostics.to_jsonl()
    if args.diag:
        Path(args.diag).write_text(report)
    else:
        sys.stdout.write(report)
    return EXIT_OK


def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_dict(io.read_json(args.spec)) if args.spec else PhantomSpec()
    ph = generate_phantom(spec)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    io.write_volume(outdir / "features.vol", ph.features)
    io.write_volume(outdir / "probmaps.vol", ph.probmaps)
    io.write_volume(outdir / "masks.vol", ph.masks.astype(np.float32))
    for c, name in enumerate(CLASSES):
        io.write_volume(outdir / f"mask_{name}.vol", ph.masks[..., c].astype(np.float32))
    io.write_token_file(outdir / "tokens.json", ph.token_document())
    (outdir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({
        "outdir": str(outdir),
        "dims": list(ph.labels.shape),
        "feature_dim": int(ph.features.shape[3]),
        "voxels": {name: int(ph.masks[..., c].sum()) for c, name in enumerate(CLASSES)},
        "violation_rate": hierarchy_violation_rate(ph.probmaps),
    })
    return EXIT_OK


def cmd_sdt(args) -> int:
    sdt, degenerate = signed_distance_transform(_read_mask(args.mask))
    io.write_volume(args.out, sdt)
    _emit({"degenerate": degenerate, "mean_sdt": float(sdt.mean()), "out": str(args.out)})
    return EXIT_OK


def cmd_stats(args) -> int:
    p = _read_probmaps(args.probmaps)
    for name in CLASSES:
        st = spatial_stats(p, name, args.threshold)
        _emit({"class": name, **st.as_dict()})
    return EXIT_OK


def cmd_dice(args) -> int:
    a, b = io.read_volume(args.a), io.read_volume(args.b)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        print(repr(dice(a > 0.5, b > 0.5)))
    elif a.shape[3] == 3:
        _emit({name: dice(a[..., c] > 0.5, b[..., c] > 0.5) for c, name in enumerate(CLASSES)})
    else:
        raise InvalidInputError(f"dice expects 3-D masks or 3-channel class masks, got shape {a.shape}")
    return EXIT_OK


def cmd_diag(args) -> int:
    p = _read_probmaps(args.probmaps)
    if args.features and args.tokens:
        features = io.read_volume(args.features).astype(np.float64)
        if features.ndim != 4 or features.shape[:3] != p.shape[:3]:
            raise InvalidInputError(
                f"features shape {features.shape[:3]} does not match probmaps shape {p.shape[:3]}"
            )
        tokens = io.read_tokens(args.tokens, features.shape[3], args.seed)
        phi, _ = semantic_field(features, tokens.prototype, args.tau, tokens.prototype_degenerate)
    elif args.features or args.tokens:
        raise InvalidInputError("--features and --tokens must be given together")
    else:
        phi = np.full(p.shape[:3], 0.5)
    fields = compute_uncertainties(p, phi)
    for name, summary in fields.summary().items():
        _emit({"field": name, **summary})
    if args.out:
        io.write_volume(args.out, fields.stacked())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="umcf", description="Coherent-field multimodal fusion and its verification tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", help="run the fusion iteration on feature/token/probability files")
    p.add_argument("--features", required=True, help="4-D feature volume (H, W, D, d)")
    p.add_argument("--tokens", required=True, help="semantic token JSON file")
    p.add_argument("--probmaps", required=True, help="4-D probability volume (H, W, D, 3), channels ET, TC, WT")
    p.add_argument("--config", help="JSON fusion config; absent keys take defaults")
    p.add_argument("--out", default="fused.vol", help="fused field output (default: fused.vol)")
    p.add_argument("--probmaps-out", help="refreshed probmaps output (default: <out stem>_probmaps.vol)")
    p.add_argument("--uncertainty-out", help="write the final four uncertainty fields as a 4-channel volume")
    p.add_argument("--diag", help="diagnostics JSON-lines report path (default: stdout)")
    p.add_argument("--iterations", type=int, help="override the configured iteration count")
    for name, flag in ABLATIONS.items():
        p.add_argument(flag, dest=name, action="store_true", help=f"set {name} (ablation)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("phantom", help="generate a nested-ellipsoid phantom")
    p.add_argument("--spec", help="JSON phantom spec; absent keys take defaults")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("sdt", help="signed distance transform of a binary mask (positive inside)")
    p.add_argument("--mask", required=True, help="3-D mask volume; values > 0.5 are inside")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sdt)

    p = sub.add_parser("stats", help="centroid, covariance eigenvalues and mean SDT per class")
    p.add_argument("--probmaps", required=True)
    p.add_argument("--threshold", type=float, default=HARD_THRESHOLD, help="hardening threshold for the SDT")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("dice", help="Dice overlap of two mask volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_dice)

    p = sub.add_parser("diag", help="summaries of the four uncertainty fields")
    p.add_argument("--probmaps", required=True)
    p.add_argument("--features", help="feature volume, for the text-consistency field")
    p.add_argument("--tokens", help="semantic token file, for the text-consistency field")
    p.add_argument("--tau", type=float, default=FusionConfig.tau)
    p.add_argument("--seed", type=int, default=0, help="projection seed for mismatched token dims")
    p.add_argument("--out", help="write the fields as a 4-channel volume (V, T, S, TS)")
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    try:
        worker_count()
        return args.func(args)
    except (io.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, ConfigError, ConvergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
