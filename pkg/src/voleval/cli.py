"""Command-line interface.

Subcommands mirror the analysis stages: ``validate`` audits a manifest
and its mask files, ``evaluate`` produces the long metric table,
``aggregate``/``compare``/``thickness`` derive summaries from it, and
``droid``/``correlate``/``ensemble`` work on the masks directly.

Exit codes: 0 success, 1 validation failure, 2 run completed with
exclusions, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .ensemble import parse_ensemble_spec
from .manifest import ManifestError, load_manifest
from .report import (
    MetricTable,
    RunConfig,
    compare_all,
    read_metrics_csv,
    run_aggregate,
    run_compare,
    run_correlate,
    run_droid,
    run_evaluate,
    run_thickness_agreement,
    write_correlation_csv,
    write_droid_csv,
    write_droid_svg,
    write_exclusions_json,
    write_json,
    write_metrics_csv,
)
from .volume import CARTILAGE_TISSUES, TISSUE_LABELS, VolumeFormatError, load_volume

log = logging.getLogger("voleval")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL = 2
EXIT_INTERNAL = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", help="dataset manifest (CSV or JSON)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--split", action="append", dest="splits",
                        help="split(s) to include (repeatable; default: test)")
    parser.add_argument("--models", help="comma-separated model subset")
    parser.add_argument("--config", help="RunConfig JSON file")
    parser.add_argument("--jobs", type=int, help="worker threads (default: cpu count)")


def _add_ensemble_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--ensemble", action="append", dest="ensembles", default=None, metavar="SPEC",
        help='ensemble spec: "vote:k=4", "oracle:tp" or "oracle:tn" (repeatable)',
    )
    parser.add_argument(
        "--members", help="comma-separated member models for --ensemble (default: all models)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voleval", description="volumetric segmentation evaluation pipeline"
    )
    parser.add_argument("--version", action="version", version=f"voleval {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, hint in (
        ("validate", "audit manifest, file geometry and label alphabets"),
        ("evaluate", "metric table for all models and ensembles -> metrics.csv"),
        ("aggregate", "summary (mean +- sd, RMS-CV) -> summary.json"),
        ("compare", "Kruskal-Wallis + Dunn across models -> stats.json"),
        ("thickness", "Bland-Altman and metric correlations -> bland_altman.json"),
        ("droid", "depth-wise Dice profiles -> droid_<tissue>.csv/.svg"),
        ("ensemble", "evaluate ensembles only -> metrics.csv"),
        ("correlate", "pairwise Dice matrices -> dice_correlation_<tissue>.csv"),
    ):
        p = sub.add_parser(name, help=hint)
        _add_common(p)
        if name != "validate":
            _add_ensemble_args(p)
        if name in ("aggregate", "compare", "thickness"):
            p.add_argument("--metrics", help="existing metrics.csv to reuse instead of re-evaluating")
        if name == "aggregate":
            p.add_argument("--by-kl-grade", action="store_true", help="stratify by KL grade")
        if name == "compare":
            p.add_argument("--metric", help="restrict to one metric")
            p.add_argument("--tissue", help="restrict to one tissue")
            p.add_argument("--alpha", type=float, default=0.05)
        if name == "droid":
            p.add_argument("--bins", type=int, help="profile bin count (default 20)")
    return parser


def _build_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        config = RunConfig.from_json(args.config)
    else:
        if not args.manifest:
            raise ValueError("--manifest (or --config) is required")
        config = RunConfig(manifest=args.manifest)
    updates: dict = {}
    if args.manifest:
        updates["manifest"] = args.manifest
    if args.models:
        updates["models"] = tuple(m.strip() for m in args.models.split(",") if m.strip())
    if args.splits:
        updates["splits"] = tuple(args.splits)
    if args.out:
        updates["out"] = args.out
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    if getattr(args, "bins", None):
        updates["droid_bins"] = args.bins
    if getattr(args, "ensembles", None):
        manifest_models = load_manifest(config.manifest, validate_paths=False).models
        members = (
            tuple(m.strip() for m in args.members.split(","))
            if getattr(args, "members", None)
            else manifest_models
        )
        specs = tuple(parse_ensemble_spec(s, members) for s in args.ensembles)
        updates["ensembles"] = config.ensembles + specs
    if updates:
        config = replace(config, **updates)
    return config


def _outdir(config: RunConfig) -> Path:
    out = Path(config.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_table(args: argparse.Namespace, config: RunConfig) -> MetricTable:
    if getattr(args, "metrics", None):
        return read_metrics_csv(args.metrics)
    return run_evaluate(config)


def _cmd_validate(args: argparse.Namespace) -> int:
    config = _build_config(args)
    manifest = load_manifest(config.manifest)
    problems: list[str] = []
    for scan in manifest.scans_for(config.splits):
        try:
            gt = load_volume(manifest.resolve(scan.ground_truth_path))
        except (VolumeFormatError, FileNotFoundError) as exc:
            problems.append(f"{scan.subject_id}/{scan.timepoint}: ground truth: {exc}")
            continue
        for model, path in scan.prediction_paths.items():
            try:
                vol = load_volume(manifest.resolve(path))
            except (VolumeFormatError, FileNotFoundError) as exc:
                problems.append(f"{scan.subject_id}/{scan.timepoint}: {model}: {exc}")
                continue
            if vol.dims != gt.dims or not vol.spacing.isclose(gt.spacing):
                problems.append(
                    f"{scan.subject_id}/{scan.timepoint}: {model}: geometry "
                    f"{vol.dims}/{vol.spacing.to_tuple()} differs from reference "
                    f"{gt.dims}/{gt.spacing.to_tuple()}"
                )
    n_scans = len(manifest.scans_for(config.splits))
    if problems:
        for line in problems:
            print(f"FAIL {line}")
        print(f"{len(problems)} problem(s) across {n_scans} scan(s)")
        return EXIT_VALIDATION
    print(f"OK {n_scans} scan(s), models: {', '.join(manifest.models)}")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    config = _build_config(args)
    table = run_evaluate(config)
    out = _outdir(config)
    write_metrics_csv(table, out / "metrics.csv")
    write_exclusions_json(table, out / "exclusions.json")
    log.info("wrote %s (%d records, %d exclusions)",
             out / "metrics.csv", len(table.records), len(table.exclusions))
    return EXIT_PARTIAL if table.exclusions else EXIT_OK


def _cmd_aggregate(args: argparse.Namespace) -> int:
    config = _build_config(args)
    table = _load_table(args, config)
    manifest = load_manifest(config.manifest) if config.manifest else None
    summary = run_aggregate(table, manifest=manifest, stratify_kl=args.by_kl_grade)
    out = _outdir(config)
    write_json(summary, out / "summary.json")
    log.info("wrote %s", out / "summary.json")
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    config = _build_config(args)
    table = _load_table(args, config)
    if args.metric and args.tissue:
        doc = {"alpha": args.alpha,
               "comparisons": [run_compare(table, args.metric, args.tissue, alpha=args.alpha)]}
    else:
        doc = compare_all(
            table,
            metrics=(args.metric,) if args.metric else None,
            tissues=(args.tissue,) if args.tissue else None,
            alpha=args.alpha,
        )
    out = _outdir(config)
    write_json(doc, out / "stats.json")
    log.info("wrote %s", out / "stats.json")
    return EXIT_OK


def _cmd_thickness(args: argparse.Namespace) -> int:
    config = _build_config(args)
    table = _load_table(args, config)
    doc = {}
    for code in CARTILAGE_TISSUES:
        tissue = TISSUE_LABELS[code]
        if any(r.tissue == tissue and r.metric == "thickness_diff_mm" for r in table.records):
            doc[tissue] = run_thickness_agreement(table, tissue)
    if not doc:
        raise ValueError("no thickness records present; run on cartilage data first")
    out = _outdir(config)
    write_json(doc, out / "bland_altman.json")
    log.info("wrote %s", out / "bland_altman.json")
    return EXIT_OK


def _cmd_droid(args: argparse.Namespace) -> int:
    config = _build_config(args)
    profiles = run_droid(config)
    out = _outdir(config)
    by_tissue: dict[str, list] = {}
    for p in profiles:
        by_tissue.setdefault(p.tissue, []).append(p)
    for tissue, tissue_profiles in by_tissue.items():
        write_droid_csv(tissue_profiles, out / f"droid_{tissue}.csv")
        write_droid_svg(tissue_profiles, out / f"droid_{tissue}.svg", title=tissue)
        log.info("wrote droid_%s.csv/.svg", tissue)
    return EXIT_OK


def _cmd_ensemble(args: argparse.Namespace) -> int:
    config = _build_config(args)
    if not config.ensembles:
        raise ValueError("ensemble command needs at least one --ensemble spec (or config entry)")
    config = replace(config, models=())
    table = run_evaluate(config)
    out = _outdir(config)
    write_metrics_csv(table, out / "metrics.csv")
    write_exclusions_json(table, out / "exclusions.json")
    log.info("wrote %s (%d records)", out / "metrics.csv", len(table.records))
    return EXIT_PARTIAL if table.exclusions else EXIT_OK


def _cmd_correlate(args: argparse.Namespace) -> int:
    config = _build_config(args)
    matrices = run_correlate(config)
    out = _outdir(config)
    for matrix in matrices:
        write_correlation_csv(matrix, out / f"dice_correlation_{matrix.tissue}.csv")
        log.info("wrote dice_correlation_%s.csv", matrix.tissue)
    return EXIT_OK


_COMMANDS = {
    "validate": _cmd_validate,
    "evaluate": _cmd_evaluate,
    "aggregate": _cmd_aggregate,
    "compare": _cmd_compare,
    "thickness": _cmd_thickness,
    "droid": _cmd_droid,
    "ensemble": _cmd_ensemble,
    "correlate": _cmd_correlate,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ManifestError, VolumeFormatError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
