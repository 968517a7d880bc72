"""Batch pipeline: manifest in, the full analysis out.

``run_evaluate`` walks a manifest and produces the long-format
:class:`MetricTable` (one row per model x scan x tissue x metric);
everything else (summaries, statistical comparisons, thickness
agreement, depth profiles, correlation matrices) is derived from it or
from the same masks. Outputs are deterministic: numeric values are
rounded to 10 significant digits when recorded, rows are sorted on
stable keys, and reductions are order-independent (math.fsum), so
identical inputs give byte-identical files at any parallelism.

The run metadata carries a timestamp field only if the caller provides
one: a wall-clock stamp would break the byte-identical reruns the
pipeline promises.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .droid import BinSample, DepthProfile, profile_from_samples, scan_bin_samples
from .ensemble import EnsembleSpec, build_ensemble_mask, parse_ensemble_spec, vote_labels
from .manifest import SPLITS, DatasetManifest, ManifestError, ScanRecord, load_manifest
from .overlap import (
    CV_VARIANTS,
    DiceCorrelationMatrix,
    MetricRecord,
    dice,
    pair_cv,
    voe,
    volume_mm3,
)
from .surface import EmptyMaskError, assd_mm, max_distance_mm
from .stats import dunn_posthoc, kruskal_wallis, pearson
from .thickness import bland_altman, mean_thickness_mm
from .volume import (
    CARTILAGE_TISSUES,
    TISSUE_CODES,
    TISSUE_LABELS,
    BinaryMask,
    LabelVolume,
    extract_mask,
    load_volume,
)

__all__ = [
    "RunConfig",
    "MetricTable",
    "run_evaluate",
    "run_aggregate",
    "run_compare",
    "compare_all",
    "run_thickness_agreement",
    "run_droid",
    "run_correlate",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_exclusions_json",
    "write_json",
    "write_droid_csv",
    "write_droid_svg",
    "write_correlation_csv",
]

PIXEL_METRICS = ("dice", "voe", "cv", "assd_mm")
THICKNESS_METRICS = ("thickness_pred_mm", "thickness_gt_mm", "thickness_diff_mm", "thickness_error_mm")
VOLUME_METRICS = ("volume_pred_mm3", "volume_gt_mm3")
COMPARE_METRICS = ("dice", "voe", "cv", "assd_mm", "thickness_error_mm")
HIGHER_BETTER = {"dice"}
LOWER_BETTER = {"voe", "cv", "assd_mm", "thickness_error_mm"}
ASSD_POLICIES = ("exclude", "max_penalty")

MODEL_KIND_BASE = "model"
MODEL_KIND_VOTE = "vote_ensemble"
MODEL_KIND_ORACLE = "oracle_ensemble"


def round10(value: float) -> float:
    """Canonical table precision: 10 significant digits."""
    return float(f"{value:.10g}")


def fmt(value: float) -> str:
    return f"{value:.10g}"


def _tissue_order(name: str) -> int:
    return TISSUE_CODES.get(name, 99)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything a batch run needs beyond the manifest contents."""

    manifest: str
    models: tuple[str, ...] | None = None
    ensembles: tuple[EnsembleSpec, ...] = ()
    splits: tuple[str, ...] = ("test",)
    droid_bins: int = 20
    cv_variant: str = "sample"
    assd_empty_policy: str = "exclude"
    out: str | None = None
    jobs: int | None = None
    timestamp: str | None = None

    def __post_init__(self):
        if self.cv_variant not in CV_VARIANTS:
            raise ValueError(f"cv_variant must be one of {CV_VARIANTS}, got {self.cv_variant!r}")
        if self.assd_empty_policy not in ASSD_POLICIES:
            raise ValueError(
                f"assd_empty_policy must be one of {ASSD_POLICIES}, got {self.assd_empty_policy!r}"
            )
        for s in self.splits:
            if s not in SPLITS:
                raise ValueError(f"unknown split {s!r}; expected one of {SPLITS}")
        if self.droid_bins < 2:
            raise ValueError(f"droid_bins must be >= 2, got {self.droid_bins}")

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        ensembles = []
        for e in doc.get("ensembles", []):
            if isinstance(e, str):
                raise ValueError(
                    "config ensembles must be objects like "
                    '{"spec": "vote:k=4", "members": [...]}'
                )
            ensembles.append(
                parse_ensemble_spec(e["spec"], e["members"], name=e.get("name", ""))
            )
        return cls(
            manifest=doc["manifest"],
            models=tuple(doc["models"]) if doc.get("models") else None,
            ensembles=tuple(ensembles),
            splits=tuple(doc.get("splits", ("test",))),
            droid_bins=int(doc.get("droid_bins", 20)),
            cv_variant=doc.get("cv_variant", "sample"),
            assd_empty_policy=doc.get("assd_empty_policy", "exclude"),
            out=doc.get("out"),
            jobs=doc.get("jobs"),
            timestamp=doc.get("timestamp"),
        )

    def echo(self) -> dict:
        """Configuration as recorded in outputs.

        Execution details that must not influence the results (output
        directory, worker count) are deliberately not echoed.
        """
        return {
            "models": list(self.models) if self.models else None,
            "ensembles": [
                {"name": e.name, "kind": e.kind, "k": e.k, "members": list(e.members)}
                for e in self.ensembles
            ],
            "splits": list(self.splits),
            "droid_bins": self.droid_bins,
            "cv_variant": self.cv_variant,
            "assd_empty_policy": self.assd_empty_policy,
        }


@dataclass(frozen=True)
class MetricTable:
    """Long-format records plus run metadata and the exclusion manifest."""

    records: tuple[MetricRecord, ...]
    exclusions: tuple[dict, ...] = ()
    metadata: dict = field(default_factory=dict)

    def values(
        self, model: str | None = None, tissue: str | None = None, metric: str | None = None
    ) -> list[MetricRecord]:
        out = []
        for r in self.records:
            if model is not None and r.model != model:
                continue
            if tissue is not None and r.tissue != tissue:
                continue
            if metric is not None and r.metric != metric:
                continue
            out.append(r)
        return out

    def model_names(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.model, None)
        return tuple(sorted(seen))

    def model_kind(self, name: str) -> str:
        kinds = self.metadata.get("models", {})
        if name in kinds:
            return kinds[name]
        if name.startswith("oracle:"):
            return MODEL_KIND_ORACLE
        if name.startswith("vote:"):
            return MODEL_KIND_VOTE
        return MODEL_KIND_BASE


def _record_sort_key(r: MetricRecord):
    return (r.model, r.subject_id, r.timepoint, _tissue_order(r.tissue), r.metric)


def _exclusion_sort_key(e: dict):
    return (
        e.get("model") or "",
        e.get("subject_id") or "",
        e.get("timepoint") or "",
        _tissue_order(e.get("tissue") or ""),
        e.get("metric") or "",
        e.get("reason") or "",
    )


def _parallel_map(fn: Callable, items: Sequence, jobs: int | None) -> list:
    n = jobs if jobs and jobs > 0 else (os.cpu_count() or 1)
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _resolve_models(manifest: DatasetManifest, config: RunConfig) -> tuple[str, ...]:
    if config.models is None:
        models = manifest.models
    else:
        unknown = [m for m in config.models if m not in manifest.models]
        if unknown:
            raise ManifestError(
                f"models {unknown} not among manifest prediction columns {list(manifest.models)}"
            )
        models = config.models
    for spec in config.ensembles:
        unknown = [m for m in spec.members if m not in manifest.models]
        if unknown:
            raise ManifestError(f"ensemble {spec.name}: unknown member models {unknown}")
    return tuple(models)


def _load_scan_volumes(
    manifest: DatasetManifest, scan: ScanRecord, needed: Iterable[str]
) -> tuple[LabelVolume, dict[str, LabelVolume], list[dict]]:
    gt = load_volume(manifest.resolve(scan.ground_truth_path))
    volumes: dict[str, LabelVolume] = {}
    problems: list[dict] = []
    for model in needed:
        path = scan.prediction_paths.get(model)
        entry = {
            "model": model,
            "subject_id": scan.subject_id,
            "timepoint": scan.timepoint,
            "tissue": None,
            "metric": None,
        }
        if path is None:
            problems.append({**entry, "reason": "no prediction listed in manifest"})
            continue
        try:
            vol = load_volume(manifest.resolve(path))
        except Exception as exc:  # noqa: BLE001 - report and continue
            problems.append({**entry, "reason": f"failed to load {path}: {exc}"})
            continue
        if vol.dims != gt.dims or not vol.spacing.isclose(gt.spacing):
            problems.append(
                {
                    **entry,
                    "reason": (
                        f"geometry mismatch: prediction {vol.dims}/"
                        f"{vol.spacing.to_tuple()} vs reference {gt.dims}/"
                        f"{gt.spacing.to_tuple()}"
                    ),
                }
            )
            continue
        volumes[model] = vol
    return gt, volumes, problems


def _tissue_metric_records(
    model: str,
    scan: ScanRecord,
    tissue: int,
    pred_mask: BinaryMask,
    gt_mask: BinaryMask,
    config: RunConfig,
    exclusions: list[dict],
) -> list[MetricRecord]:
    tissue_name = TISSUE_LABELS[tissue]

    def rec(metric: str, value: float) -> MetricRecord:
        return MetricRecord(
            model=model,
            subject_id=scan.subject_id,
            timepoint=scan.timepoint,
            tissue=tissue_name,
            metric=metric,
            value=round10(value),
        )

    def exclude(metric: str, reason: str) -> None:
        exclusions.append(
            {
                "model": model,
                "subject_id": scan.subject_id,
                "timepoint": scan.timepoint,
                "tissue": tissue_name,
                "metric": metric,
                "reason": reason,
            }
        )

    out = [rec("dice", dice(pred_mask, gt_mask)), rec("voe", voe(pred_mask, gt_mask))]
    v_pred = volume_mm3(pred_mask)
    v_gt = volume_mm3(gt_mask)
    out.append(rec("volume_pred_mm3", v_pred))
    out.append(rec("volume_gt_mm3", v_gt))
    if v_pred == 0.0 and v_gt == 0.0:
        exclude("cv", "cv undefined: both volumes zero")
    else:
        out.append(rec("cv", pair_cv(v_pred, v_gt, config.cv_variant)))
    try:
        out.append(rec("assd_mm", assd_mm(pred_mask, gt_mask)))
    except EmptyMaskError as err:
        sides = ",".join("prediction" if s == "a" else "reference" for s in err.sides)
        if config.assd_empty_policy == "exclude":
            exclude("assd_mm", f"assd undefined: empty mask ({sides})")
        else:
            penalty = 0.0 if len(err.sides) == 2 else max_distance_mm(gt_mask.dims, gt_mask.spacing)
            out.append(rec("assd_mm", penalty))
    if tissue in CARTILAGE_TISSUES:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            t_pred = mean_thickness_mm(pred_mask).mean_thickness_mm
            t_gt = mean_thickness_mm(gt_mask).mean_thickness_mm
        out.append(rec("thickness_pred_mm", t_pred))
        out.append(rec("thickness_gt_mm", t_gt))
        out.append(rec("thickness_diff_mm", t_pred - t_gt))
        out.append(rec("thickness_error_mm", abs(t_pred - t_gt)))
        if pred_mask.is_empty() or gt_mask.is_empty():
            sides = ",".join(
                name
                for name, m in (("prediction", pred_mask), ("reference", gt_mask))
                if m.is_empty()
            )
            exclude("thickness_pred_mm", f"thickness of empty mask ({sides}) reported as 0")
    return out


def _evaluate_scan(
    manifest: DatasetManifest, scan: ScanRecord, models: tuple[str, ...], config: RunConfig
) -> tuple[list[MetricRecord], list[dict], dict[str, int]]:
    member_names = {m for spec in config.ensembles for m in spec.members}
    needed = sorted(set(models) | member_names)
    gt, volumes, exclusions = _load_scan_volumes(manifest, scan, needed)
    records: list[MetricRecord] = []
    conflicts: dict[str, int] = {}

    gt_masks = {t: extract_mask(gt, t) for t in TISSUE_LABELS}
    member_masks: dict[int, dict[str, BinaryMask]] = {
        t: {m: extract_mask(volumes[m], t) for m in volumes} for t in TISSUE_LABELS
    }

    for model in models:
        if model not in volumes:
            continue  # exclusion already recorded
        for tissue in sorted(TISSUE_LABELS):
            records.extend(
                _tissue_metric_records(
                    model, scan, tissue, member_masks[tissue][model], gt_masks[tissue],
                    config, exclusions,
                )
            )

    for spec in config.ensembles:
        missing = [m for m in spec.members if m not in volumes]
        if missing:
            exclusions.append(
                {
                    "model": spec.name,
                    "subject_id": scan.subject_id,
                    "timepoint": scan.timepoint,
                    "tissue": None,
                    "metric": None,
                    "reason": f"member model(s) unavailable for this scan: {missing}",
                }
            )
            continue
        if spec.kind == "vote":
            fused, report = vote_labels([volumes[m] for m in spec.members], spec.k)
            conflicts[spec.name] = conflicts.get(spec.name, 0) + report.conflict_voxels
            ensemble_masks = {t: extract_mask(fused, t) for t in TISSUE_LABELS}
        else:
            ensemble_masks = {
                t: build_ensemble_mask(spec, member_masks[t], gt_masks[t])
                for t in TISSUE_LABELS
            }
        for tissue in sorted(TISSUE_LABELS):
            records.extend(
                _tissue_metric_records(
                    spec.name, scan, tissue, ensemble_masks[tissue], gt_masks[tissue],
                    config, exclusions,
                )
            )
    return records, exclusions, conflicts


def _manifest_sha256(manifest: DatasetManifest) -> str | None:
    if manifest.source_path is None:
        return None
    return hashlib.sha256(manifest.source_path.read_bytes()).hexdigest()


def run_evaluate(config: RunConfig, manifest: DatasetManifest | None = None) -> MetricTable:
    """Evaluate every configured model and ensemble over the manifest.

    Per model x scan x tissue the table gets dice, voe, per-scan volume
    CV, volumes, ASSD (per the empty-mask policy) and, for cartilage
    tissues, thickness values and errors. Scans a model cannot be
    scored on are reported in the exclusion manifest and the run
    continues.
    """
    if manifest is None:
        manifest = load_manifest(config.manifest)
    models = _resolve_models(manifest, config)
    ensemble_names = [spec.name for spec in config.ensembles]
    clash = set(models) & set(ensemble_names)
    if clash:
        raise ValueError(f"ensemble names clash with model names: {sorted(clash)}")
    scans = manifest.scans_for(config.splits)
    if not scans:
        raise ManifestError(f"no scans in splits {config.splits}")

    results = _parallel_map(
        lambda scan: _evaluate_scan(manifest, scan, models, config), scans, config.jobs
    )

    records: list[MetricRecord] = []
    exclusions: list[dict] = []
    conflicts: dict[str, int] = {}
    for scan_records, scan_exclusions, scan_conflicts in results:
        records.extend(scan_records)
        exclusions.extend(scan_exclusions)
        for name, n in scan_conflicts.items():
            conflicts[name] = conflicts.get(name, 0) + n

    metadata = {
        "tool": "voleval",
        "version": __version__,
        "manifest": manifest.source_path.name if manifest.source_path else None,
        "manifest_sha256": _manifest_sha256(manifest),
        "timestamp": config.timestamp,
        "config": config.echo(),
        "models": {
            **{m: MODEL_KIND_BASE for m in models},
            **{
                spec.name: (MODEL_KIND_VOTE if spec.kind == "vote" else MODEL_KIND_ORACLE)
                for spec in config.ensembles
            },
        },
        "vote_conflict_voxels": {
            spec.name: conflicts.get(spec.name, 0)
            for spec in config.ensembles
            if spec.kind == "vote"
        },
    }
    return MetricTable(
        records=tuple(sorted(records, key=_record_sort_key)),
        exclusions=tuple(sorted(exclusions, key=_exclusion_sort_key)),
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# Aggregation (summary tables)
# ---------------------------------------------------------------------------

def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)

def _sd(values: Sequence[float], mean: float) -> float:
    if len(values) < 2:
        return 0.0
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))


def _rms(values: Sequence[float]) -> float:
    return math.sqrt(math.fsum(v * v for v in values) / len(values))


def _aggregate_cell(metric: str, values: Sequence[float]) -> dict:
    if metric == "cv":
        value = _rms(values)
        aggregation = "rms"
    else:
        value = _mean(values)
        aggregation = "mean"
    sd = _sd(values, _mean(values))
    return {
        "aggregation": aggregation,
        "value": round10(value),
        "sd": round10(sd),
        "n": len(values),
    }


def run_aggregate(
    table: MetricTable,
    manifest: DatasetManifest | None = None,
    stratify_kl: bool = False,
) -> dict:
    """Summarize the long table to mean +- sd per model x tissue x metric.

    Per-scan CVs aggregate as root-mean-square instead of the mean. The
    best submitted (non-ensemble) model per tissue x performance-metric
    is marked; ensembles never hold the mark. With ``stratify_kl`` the
    cells are additionally broken out by KL grade, which requires the
    manifest metadata.
    """
    if not table.records:
        raise ValueError("cannot aggregate an empty metric table")
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in table.records:
        groups.setdefault((r.model, r.tissue, r.metric), []).append(r.value)

    cells = []
    for (model, tissue, metric), values in groups.items():
        cell = {"model": model, "tissue": tissue, "metric": metric}
        cell.update(_aggregate_cell(metric, values))
        cells.append(cell)

    # leaderboard marks among base models only
    best: dict[tuple[str, str], float] = {}
    for cell in cells:
        metric = cell["metric"]
        if metric not in HIGHER_BETTER | LOWER_BETTER:
            continue
        if table.model_kind(cell["model"]) != MODEL_KIND_BASE:
            continue
        key = (cell["tissue"], metric)
        value = cell["value"]
        if key not in best:
            best[key] = value
        elif metric in HIGHER_BETTER:
            best[key] = max(best[key], value)
        else:
            best[key] = min(best[key], value)
    for cell in cells:
        key = (cell["tissue"], cell["metric"])
        if key in best and table.model_kind(cell["model"]) == MODEL_KIND_BASE:
            cell["best"] = cell["value"] == best[key]

    cells.sort(key=lambda c: (c["model"], _tissue_order(c["tissue"]), c["metric"]))
    summary = {"run": table.metadata, "aggregates": cells}

    if stratify_kl:
        if manifest is None:
            raise ValueError("KL stratification needs the manifest metadata")
        kl_by_scan: dict[tuple[str, str], int | None] = {
            s.scan_id: s.kl_grade for s in manifest.scans
        }
        strata: dict[tuple[int, str, str, str], list[float]] = {}
        for r in table.records:
            scan_id = (r.subject_id, r.timepoint)
            if scan_id not in kl_by_scan:
                continue
            kl = kl_by_scan[scan_id]
            if kl is None:
                raise ValueError(
                    f"KL stratification requested but scan {scan_id} has no kl_grade"
                )
            strata.setdefault((kl, r.model, r.tissue, r.metric), []).append(r.value)
        kl_cells = []
        for (kl, model, tissue, metric), values in strata.items():
            cell = {"kl_grade": kl, "model": model, "tissue": tissue, "metric": metric}
            cell.update(_aggregate_cell(metric, values))
            kl_cells.append(cell)
        kl_cells.sort(
            key=lambda c: (c["kl_grade"], c["model"], _tissue_order(c["tissue"]), c["metric"])
        )
        summary["kl_stratified"] = kl_cells
    return summary


# ---------------------------------------------------------------------------
# Statistical comparison
# ---------------------------------------------------------------------------

def run_compare(
    table: MetricTable, metric: str, tissue: str, alpha: float = 0.05
) -> dict:
    """Kruskal-Wallis + Dunn/Bonferroni across models for one metric."""
    per_model: dict[str, list[float]] = {}
    for r in table.records:
        if r.metric == metric and r.tissue == tissue:
            per_model.setdefault(r.model, []).append(r.value)
    models = sorted(per_model)
    if len(models) < 2:
        raise ValueError(
            f"need per-scan {metric} values for at least 2 models on {tissue}, "
            f"got {len(models)}"
        )
    groups = [per_model[m] for m in models]
    kw = kruskal_wallis(groups)
    dunn = dunn_posthoc(groups)
    return {
        "metric": metric,
        "tissue": tissue,
        "alpha": alpha,
        "models": models,
        "group_sizes": list(kw.group_sizes),
        "kruskal_wallis": {
            "H": round10(kw.H),
            "df": kw.df,
            "p": round10(kw.p),
            "degenerate": kw.degenerate,
            "significant": kw.p < alpha,
        },
        "dunn": [
            {
                "model_a": models[pair.a],
                "model_b": models[pair.b],
                "z": round10(pair.z),
                "p_raw": round10(pair.p_raw),
                "p_adjusted": round10(pair.p_adjusted),
                "significant": pair.p_adjusted < alpha,
            }
            for pair in dunn.pairs
        ],
    }


def compare_all(
    table: MetricTable,
    metrics: Sequence[str] | None = None,
    tissues: Sequence[str] | None = None,
    alpha: float = 0.05,
) -> dict:
    """run_compare over every metric x tissue with enough data."""
    wanted_metrics = tuple(metrics) if metrics else COMPARE_METRICS
    wanted_tissues = (
        tuple(tissues)
        if tissues
        else tuple(TISSUE_LABELS[c] for c in sorted(TISSUE_LABELS))
    )
    comparisons = []
    for tissue in wanted_tissues:
        for metric in wanted_metrics:
            models_with_data = {
                r.model for r in table.records if r.metric == metric and r.tissue == tissue
            }
            if len(models_with_data) < 2:
                continue
            comparisons.append(run_compare(table, metric, tissue, alpha=alpha))
    return {"alpha": alpha, "comparisons": comparisons}


# ---------------------------------------------------------------------------
# Thickness agreement
# ---------------------------------------------------------------------------

def _ba_dict(differences: Sequence[float]) -> dict:
    ba = bland_altman(differences)
    return {
        "bias": round10(ba.bias),
        "sd": round10(ba.sd),
        "loa_low": round10(ba.loa_low),
        "loa_high": round10(ba.loa_high),
        "n": ba.n,
    }


def run_thickness_agreement(table: MetricTable, tissue: str) -> dict:
    """Bland-Altman agreement and metric-vs-thickness-error correlation.

    Per-scan signed thickness differences and per-subject longitudinal
    change differences pool across non-diagnostic models (bound
    ensembles are built from the reference and would fake agreement).
    Subjects without both timepoints are skipped and listed.
    """
    models = [
        m for m in table.model_names() if table.model_kind(m) != MODEL_KIND_ORACLE
    ]
    diff: dict[tuple[str, str, str], float] = {}
    t_pred: dict[tuple[str, str, str], float] = {}
    t_gt: dict[tuple[str, str, str], float] = {}
    for r in table.records:
        if r.tissue != tissue or r.model not in models:
            continue
        key = (r.model, r.subject_id, r.timepoint)
        if r.metric == "thickness_diff_mm":
            diff[key] = r.value
        elif r.metric == "thickness_pred_mm":
            t_pred[key] = r.value
        elif r.metric == "thickness_gt_mm":
            t_gt[key] = r.value
    if not diff:
        raise ValueError(f"no thickness records for tissue {tissue}")

    per_scan = [diff[k] for k in sorted(diff)]

    longitudinal: list[float] = []
    skipped: list[dict] = []
    subjects = sorted({s for _, s, _ in t_pred})
    for model in models:
        for subject in subjects:
            kb = (model, subject, "baseline")
            ky = (model, subject, "year1")
            if kb in t_pred and ky in t_pred and kb in t_gt and ky in t_gt:
                change_pred = t_pred[ky] - t_pred[kb]
                change_gt = t_gt[ky] - t_gt[kb]
                longitudinal.append(change_pred - change_gt)
            else:
                skipped.append({"model": model, "subject_id": subject,
                                "reason": "missing timepoint pair"})

    correlations: dict[str, dict] = {}
    errors: dict[tuple[str, str, str], float] = {}
    for r in table.records:
        if r.tissue == tissue and r.metric == "thickness_error_mm" and r.model in models:
            errors[(r.model, r.subject_id, r.timepoint)] = r.value
    for metric in PIXEL_METRICS:
        xs, ys = [], []
        for r in table.records:
            if r.tissue != tissue or r.metric != metric or r.model not in models:
                continue
            key = (r.model, r.subject_id, r.timepoint)
            if key in errors:
                xs.append(r.value)
                ys.append(errors[key])
        if len(xs) < 2:
            continue
        try:
            res = pearson(xs, ys)
            correlations[metric] = {
                "r": round10(res.r),
                "n": res.n,
                "category": res.category,
            }
        except ValueError as exc:
            correlations[metric] = {"r": None, "n": len(xs), "category": None,
                                    "note": str(exc)}

    out = {
        "tissue": tissue,
        "models": models,
        "per_scan": _ba_dict(per_scan),
        "pearson_vs_thickness_error": correlations,
        "skipped": skipped,
    }
    if len(longitudinal) >= 2:
        out["longitudinal"] = _ba_dict(longitudinal)
    return out


# ---------------------------------------------------------------------------
# Depth profiles and correlation matrices over the manifest
# ---------------------------------------------------------------------------

def _non_oracle_names(config: RunConfig, models: tuple[str, ...]) -> list[str]:
    names = list(models)
    names.extend(spec.name for spec in config.ensembles if spec.kind == "vote")
    return names


def _scan_masks_for_droid(
    manifest: DatasetManifest, scan: ScanRecord, models: tuple[str, ...], config: RunConfig
) -> tuple[dict[tuple[str, int], list[BinSample]], list[dict]]:
    gt, volumes, problems = _load_scan_volumes(
        manifest, scan, sorted(set(models) | {m for s in config.ensembles for m in s.members})
    )
    samples: dict[tuple[str, int], list[BinSample]] = {}
    axis = manifest.through_plane_axis
    gt_masks = {t: extract_mask(gt, t) for t in TISSUE_LABELS}

    def add(name: str, tissue: int, mask: BinaryMask) -> None:
        samples[(name, tissue)] = scan_bin_samples(
            mask, gt_masks[tissue], axis=axis, bins=config.droid_bins
        )

    for model in models:
        if model not in volumes:
            continue
        for tissue in TISSUE_LABELS:
            add(model, tissue, extract_mask(volumes[model], tissue))
    for spec in config.ensembles:
        if spec.kind != "vote" or any(m not in volumes for m in spec.members):
            continue
        fused, _ = vote_labels([volumes[m] for m in spec.members], spec.k)
        for tissue in TISSUE_LABELS:
            add(spec.name, tissue, extract_mask(fused, tissue))
    return samples, problems


def run_droid(
    config: RunConfig, manifest: DatasetManifest | None = None
) -> list[DepthProfile]:
    """Pooled depth profiles for every non-diagnostic model x tissue."""
    if manifest is None:
        manifest = load_manifest(config.manifest)
    models = _resolve_models(manifest, config)
    scans = manifest.scans_for(config.splits)
    results = _parallel_map(
        lambda scan: _scan_masks_for_droid(manifest, scan, models, config), scans, config.jobs
    )
    pooled: dict[tuple[str, int], list[BinSample]] = {}
    for samples, _problems in results:
        for key, scan_samples in samples.items():
            pooled.setdefault(key, []).extend(scan_samples)
    profiles = []
    for name in _non_oracle_names(config, models):
        for tissue in sorted(TISSUE_LABELS):
            key = (name, tissue)
            if key not in pooled:
                continue
            profiles.append(
                profile_from_samples(
                    pooled[key], config.droid_bins, model=name, tissue=TISSUE_LABELS[tissue]
                )
            )
    return profiles


def _scan_pair_dice(
    manifest: DatasetManifest, scan: ScanRecord, names: list[str], config: RunConfig
) -> dict[tuple[str, str, int], float]:
    specs_by_name = {spec.name: spec for spec in config.ensembles}
    base = [n for n in names if n not in specs_by_name]
    gt, volumes, _problems = _load_scan_volumes(
        manifest, scan, sorted(set(base) | {m for s in config.ensembles for m in s.members})
    )
    gt_masks = {t: extract_mask(gt, t) for t in TISSUE_LABELS}
    member_masks = {
        t: {m: extract_mask(volumes[m], t) for m in volumes} for t in TISSUE_LABELS
    }
    masks: dict[str, dict[int, BinaryMask]] = {}
    for name in base:
        if name in volumes:
            masks[name] = {t: member_masks[t][name] for t in TISSUE_LABELS}
    for name in names:
        spec = specs_by_name.get(name)
        if spec is None or any(m not in volumes for m in spec.members):
            continue
        if spec.kind == "vote":
            fused, _ = vote_labels([volumes[m] for m in spec.members], spec.k)
            masks[name] = {t: extract_mask(fused, t) for t in TISSUE_LABELS}
        else:
            masks[name] = {
                t: build_ensemble_mask(spec, member_masks[t], gt_masks[t])
                for t in TISSUE_LABELS
            }
    out: dict[tuple[str, str, int], float] = {}
    for i, a in enumerate(names):
        if a not in masks:
            continue
        for b in names[i + 1:]:
            if b not in masks:
                continue
            for tissue in TISSUE_LABELS:
                out[(a, b, tissue)] = dice(masks[a][tissue], masks[b][tissue])
    return out


def run_correlate(
    config: RunConfig,
    manifest: DatasetManifest | None = None,
    models: Sequence[str] | None = None,
) -> list[DiceCorrelationMatrix]:
    """Per-tissue mean pairwise Dice matrices between model predictions."""
    if manifest is None:
        manifest = load_manifest(config.manifest)
    resolved = _resolve_models(manifest, config)
    names = list(models) if models else _non_oracle_names(config, resolved)
    if len(names) < 2:
        raise ValueError(f"correlation matrix needs at least 2 models, got {names}")
    scans = manifest.scans_for(config.splits)
    results = _parallel_map(
        lambda scan: _scan_pair_dice(manifest, scan, names, config), scans, config.jobs
    )
    matrices = []
    for tissue in sorted(TISSUE_LABELS):
        k = len(names)
        values = np.ones((k, k))
        for i, a in enumerate(names):
            for j in range(i + 1, k):
                b = names[j]
                per_scan = [
                    r[(a, b, tissue)] for r in results if (a, b, tissue) in r
                ]
                if not per_scan:
                    raise ValueError(
                        f"no common scans for models {a} and {b} on {TISSUE_LABELS[tissue]}"
                    )
                mean = math.fsum(per_scan) / len(per_scan)
                values[i, j] = mean
                values[j, i] = mean
        matrices.append(
            DiceCorrelationMatrix(
                models=tuple(names), values=values, tissue=TISSUE_LABELS[tissue]
            )
        )
    return matrices


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

CSV_HEADER = ("model", "subject_id", "timepoint", "tissue", "metric", "value")


def write_metrics_csv(table: MetricTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in table.records:
            writer.writerow(
                (r.model, r.subject_id, r.timepoint, r.tissue, r.metric, fmt(r.value))
            )


def read_metrics_csv(path: str | Path) -> MetricTable:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            records.append(
                MetricRecord(
                    model=row["model"],
                    subject_id=row["subject_id"],
                    timepoint=row["timepoint"],
                    tissue=row["tissue"],
                    metric=row["metric"],
                    value=float(row["value"]),
                )
            )
    return MetricTable(records=tuple(records), metadata={"source": str(path)})


def write_json(doc: dict | list, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def write_exclusions_json(table: MetricTable, path: str | Path) -> None:
    write_json(list(table.exclusions), path)


def write_droid_csv(profiles: Sequence[DepthProfile], path: str | Path) -> None:
    """All models' profiles for one tissue: bin edges, mean Dice, weight."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("model", "bin_low", "bin_high", "mean_dice", "n"))
        for profile in profiles:
            for i in range(profile.bins):
                mean = profile.means[i]
                writer.writerow(
                    (
                        profile.model,
                        fmt(profile.bin_edges[i]),
                        fmt(profile.bin_edges[i + 1]),
                        "" if mean is None else fmt(round10(mean)),
                        fmt(profile.counts[i]),
                    )
                )


def write_correlation_csv(matrix: DiceCorrelationMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("model", *matrix.models))
        for i, name in enumerate(matrix.models):
            writer.writerow(
                (name, *(fmt(round10(float(v))) for v in matrix.values[i]))
            )


SVG_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
)


def write_droid_svg(profiles: Sequence[DepthProfile], path: str | Path, title: str = "") -> None:
    """Minimal SVG line chart: one polyline per model, fixed axes."""
    left, top, width, height = 60.0, 24.0, 420.0, 330.0
    bottom = top + height

    def sx(pos: float) -> float:
        return left + width * pos / 100.0

    def sy(value: float) -> float:
        return bottom - height * value

    lines = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="640" height="420" '
        'viewBox="0 0 640 420" font-family="sans-serif" font-size="12">',
        f'<text x="{left:.2f}" y="14" font-size="14">{title}</text>',
        f'<rect x="{left:.2f}" y="{top:.2f}" width="{width:.2f}" height="{height:.2f}" '
        'fill="none" stroke="#000"/>',
    ]
    for tick in range(0, 101, 20):
        x = sx(tick)
        lines.append(
            f'<line x1="{x:.2f}" y1="{bottom:.2f}" x2="{x:.2f}" y2="{bottom + 5:.2f}" stroke="#000"/>'
        )
        lines.append(
            f'<text x="{x:.2f}" y="{bottom + 18:.2f}" text-anchor="middle">{tick}</text>'
        )
    for i in range(6):
        value = i / 5.0
        y = sy(value)
        lines.append(
            f'<line x1="{left - 5:.2f}" y1="{y:.2f}" x2="{left:.2f}" y2="{y:.2f}" stroke="#000"/>'
        )
        lines.append(
            f'<text x="{left - 8:.2f}" y="{y + 4:.2f}" text-anchor="end">{value:.1f}</text>'
        )
    lines.append(
        f'<text x="{left + width / 2:.2f}" y="{bottom + 36:.2f}" text-anchor="middle">'
        "normalized position (%)</text>"
    )
    lines.append(
        f'<text x="16" y="{top + height / 2:.2f}" transform="rotate(-90 16 '
        f'{top + height / 2:.2f})" text-anchor="middle">slice Dice</text>'
    )

    for index, profile in enumerate(profiles):
        color = SVG_PALETTE[index % len(SVG_PALETTE)]
        centers = [
            (profile.bin_edges[i] + profile.bin_edges[i + 1]) / 2.0
            for i in range(profile.bins)
        ]
        run: list[str] = []
        runs: list[list[str]] = []
        for i in range(profile.bins):
            mean = profile.means[i]
            if mean is None:
                if run:
                    runs.append(run)
                    run = []
                continue
            run.append(f"{sx(centers[i]):.2f},{sy(mean):.2f}")
        if run:
            runs.append(run)
        for pts in runs:
            if len(pts) == 1:
                x, y = pts[0].split(",")
                lines.append(f'<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>')
            else:
                lines.append(
                    f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" '
                    'stroke-width="1.5"/>'
                )
        ly = top + 16 + 16 * index
        lines.append(
            f'<line x1="{left + width + 12:.2f}" y1="{ly - 4:.2f}" '
            f'x2="{left + width + 34:.2f}" y2="{ly - 4:.2f}" stroke="{color}" stroke-width="1.5"/>'
        )
        lines.append(f'<text x="{left + width + 40:.2f}" y="{ly:.2f}">{profile.model}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
