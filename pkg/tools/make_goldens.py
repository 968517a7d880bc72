#!/usr/bin/env python3
"""Regenerate the committed golden outputs in tests/golden/.

The metric values in the goldens are computed by the brute-force
oracles in tests/oracles.py (counting loops, exhaustive surface and
distance scans, per-voxel fusions), not by the library's metric code.
The library is used only for what the goldens do not certify: reading
the SEGV inputs, the output file formats, and the statistics transforms
that have their own hand-verified unit tests (run on the oracle-built
record table). Aggregation (mean/sd/RMS, best marks) is recomputed here
with plain fsum loops.

Run from the repo root:  python3 tools/make_goldens.py
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import oracles  # noqa: E402

from voleval import __version__  # noqa: E402
from voleval.droid import DepthProfile  # noqa: E402
from voleval.manifest import load_manifest  # noqa: E402
from voleval.overlap import DiceCorrelationMatrix, MetricRecord  # noqa: E402
from voleval.report import (  # noqa: E402
    MetricTable,
    compare_all,
    run_thickness_agreement,
    write_correlation_csv,
    write_droid_csv,
    write_droid_svg,
    write_json,
)
from voleval.synthetic import MODELS, write_synthetic_dataset  # noqa: E402
from voleval.volume import CARTILAGE_TISSUES, TISSUE_LABELS, load_volume  # noqa: E402

GOLDEN_DIR = ROOT / "tests" / "golden"
ENSEMBLES = ("vote:k=2", "oracle:tp", "oracle:tn")
VOTE_K = 2
BINS = 20
TISSUE_ORDER = {name: code for code, name in TISSUE_LABELS.items()}


def fmt(value: float) -> str:
    return f"{value:.10g}"


def round10(value: float) -> float:
    return float(fmt(value))


def tissue_masks(volume) -> dict[int, np.ndarray]:
    return {t: np.asarray(volume.voxels == t) for t in TISSUE_LABELS}


def fused_masks(member_masks: list[np.ndarray], gt_mask: np.ndarray, kind: str) -> np.ndarray:
    if kind == "vote:k=2":
        return oracles.vote_voxelwise(member_masks, VOTE_K)
    if kind == "oracle:tp":
        return oracles.oracle_tp_voxelwise(member_masks, gt_mask)
    return oracles.oracle_tn_voxelwise(member_masks, gt_mask)


def scan_records(scan, spacing, masks_by_model, gt_masks):
    records = []
    thickness_cache: dict[tuple[str, int], float] = {}
    for model, masks in masks_by_model.items():
        for tissue, name in TISSUE_LABELS.items():
            pred = masks[tissue]
            gt = gt_masks[tissue]

            def add(metric: str, value: float) -> None:
                records.append(
                    MetricRecord(
                        model=model,
                        subject_id=scan.subject_id,
                        timepoint=scan.timepoint,
                        tissue=name,
                        metric=metric,
                        value=round10(value),
                    )
                )

            add("dice", oracles.dice_counts(pred, gt))
            add("voe", oracles.voe_counts(pred, gt))
            v_pred = oracles.volume_counts_mm3(pred, spacing)
            v_gt = oracles.volume_counts_mm3(gt, spacing)
            add("volume_pred_mm3", v_pred)
            add("volume_gt_mm3", v_gt)
            add("cv", oracles.pair_cv_arithmetic(v_pred, v_gt))
            add("assd_mm", oracles.assd_scan(pred, gt, spacing))
            if tissue in CARTILAGE_TISSUES:
                key = (model, tissue)
                if key not in thickness_cache:
                    thickness_cache[key], _ = oracles.thickness_scan(pred, spacing)
                gt_key = ("__gt__", tissue)
                if gt_key not in thickness_cache:
                    thickness_cache[gt_key], _ = oracles.thickness_scan(gt, spacing)
                t_pred = thickness_cache[key]
                t_gt = thickness_cache[gt_key]
                add("thickness_pred_mm", t_pred)
                add("thickness_gt_mm", t_gt)
                add("thickness_diff_mm", t_pred - t_gt)
                add("thickness_error_mm", abs(t_pred - t_gt))
    return records


def build_table(manifest) -> tuple[MetricTable, dict]:
    spacing = None
    records = []
    droid_samples: dict[tuple[str, str], list] = {}
    pair_dice: dict[tuple[str, str, str], list[float]] = {}
    droid_names = [*MODELS, "vote:k=2"]
    correlate_names = droid_names

    for scan in manifest.scans:
        gt_volume = load_volume(manifest.resolve(scan.ground_truth_path))
        spacing = gt_volume.spacing
        gt_masks = tissue_masks(gt_volume)
        masks_by_model: dict[str, dict[int, np.ndarray]] = {}
        for model in MODELS:
            vol = load_volume(manifest.resolve(scan.prediction_paths[model]))
            masks_by_model[model] = tissue_masks(vol)
        for kind in ENSEMBLES:
            masks_by_model[kind] = {
                t: fused_masks([masks_by_model[m][t] for m in MODELS], gt_masks[t], kind)
                for t in TISSUE_LABELS
            }
        records.extend(scan_records(scan, spacing, masks_by_model, gt_masks))

        axis = manifest.through_plane_axis
        for name in droid_names:
            for tissue, tname in TISSUE_LABELS.items():
                samples = droid_samples.setdefault((name, tname), [])
                gt_mask = gt_masks[tissue]
                pred_mask = masks_by_model[name][tissue]
                for i, offset, extent in oracles.depth_positions(gt_mask, axis):
                    d = oracles.slice_dice_counts(
                        np.take(pred_mask, i, axis=axis), np.take(gt_mask, i, axis=axis)
                    )
                    num, den = (BINS, 2) if extent == 0 else (BINS * offset, extent)
                    q, r = divmod(num, den)
                    if r != 0:
                        samples.append((q, 1.0, d))
                    elif q <= 0:
                        samples.append((0, 1.0, d))
                    elif q >= BINS:
                        samples.append((BINS - 1, 1.0, d))
                    else:
                        samples.append((q - 1, 0.5, d))
                        samples.append((q, 0.5, d))
        for i, a in enumerate(correlate_names):
            for b in correlate_names[i + 1:]:
                for tissue, tname in TISSUE_LABELS.items():
                    pair_dice.setdefault((a, b, tname), []).append(
                        oracles.dice_counts(
                            masks_by_model[a][tissue], masks_by_model[b][tissue]
                        )
                    )

    records.sort(
        key=lambda r: (r.model, r.subject_id, r.timepoint, TISSUE_ORDER[r.tissue], r.metric)
    )
    table = MetricTable(records=tuple(records))
    extras = {
        "droid_samples": droid_samples,
        "pair_dice": pair_dice,
        "droid_names": droid_names,
        "correlate_names": correlate_names,
    }
    return table, extras


def write_metrics(table: MetricTable, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("model", "subject_id", "timepoint", "tissue", "metric", "value"))
        for r in table.records:
            writer.writerow((r.model, r.subject_id, r.timepoint, r.tissue, r.metric, fmt(r.value)))


def run_metadata(manifest_path: Path) -> dict:
    sha = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    return {
        "tool": "voleval",
        "version": __version__,
        "manifest": manifest_path.name,
        "manifest_sha256": sha,
        "timestamp": None,
        "config": {
            "models": None,
            "ensembles": [
                {"name": "vote:k=2", "kind": "vote", "k": VOTE_K, "members": list(MODELS)},
                {"name": "oracle:tp", "kind": "oracle_tp", "k": None, "members": list(MODELS)},
                {"name": "oracle:tn", "kind": "oracle_tn", "k": None, "members": list(MODELS)},
            ],
            "splits": ["test"],
            "droid_bins": BINS,
            "cv_variant": "sample",
            "assd_empty_policy": "exclude",
        },
        "models": {
            **{m: "model" for m in MODELS},
            "vote:k=2": "vote_ensemble",
            "oracle:tp": "oracle_ensemble",
            "oracle:tn": "oracle_ensemble",
        },
        "vote_conflict_voxels": {"vote:k=2": 0},
    }


def build_summary(table: MetricTable, metadata: dict) -> dict:
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in table.records:
        groups.setdefault((r.model, r.tissue, r.metric), []).append(r.value)
    cells = []
    for (model, tissue, metric), values in groups.items():
        mean = math.fsum(values) / len(values)
        if metric == "cv":
            value = math.sqrt(math.fsum(v * v for v in values) / len(values))
            aggregation = "rms"
        else:
            value = mean
            aggregation = "mean"
        sd = (
            0.0
            if len(values) < 2
            else math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))
        )
        cells.append(
            {
                "model": model,
                "tissue": tissue,
                "metric": metric,
                "aggregation": aggregation,
                "value": round10(value),
                "sd": round10(sd),
                "n": len(values),
            }
        )
    performance = {"dice": max, "voe": min, "cv": min, "assd_mm": min, "thickness_error_mm": min}
    best: dict[tuple[str, str], float] = {}
    for cell in cells:
        if cell["metric"] not in performance or cell["model"] not in MODELS:
            continue
        key = (cell["tissue"], cell["metric"])
        pick = performance[cell["metric"]]
        best[key] = cell["value"] if key not in best else pick(best[key], cell["value"])
    for cell in cells:
        key = (cell["tissue"], cell["metric"])
        if key in best and cell["model"] in MODELS:
            cell["best"] = cell["value"] == best[key]
    cells.sort(key=lambda c: (c["model"], TISSUE_ORDER[c["tissue"]], c["metric"]))
    return {"run": metadata, "aggregates": cells}


def build_droid_profiles(extras) -> dict[str, list[DepthProfile]]:
    width = 100.0 / BINS
    edges = tuple(i * width for i in range(BINS + 1))
    by_tissue: dict[str, list[DepthProfile]] = {}
    for name in extras["droid_names"]:
        for code in sorted(TISSUE_LABELS):
            tname = TISSUE_LABELS[code]
            samples = extras["droid_samples"][(name, tname)]
            means = []
            counts = []
            for b in range(BINS):
                bucket = [(w, d) for bb, w, d in samples if bb == b]
                total = math.fsum(w for w, _ in bucket)
                counts.append(total)
                means.append(
                    None if total == 0.0 else math.fsum(w * d for w, d in bucket) / total
                )
            by_tissue.setdefault(tname, []).append(
                DepthProfile(
                    bin_edges=edges, means=tuple(means), counts=tuple(counts),
                    model=name, tissue=tname,
                )
            )
    return by_tissue


def build_matrices(extras) -> list[DiceCorrelationMatrix]:
    names = extras["correlate_names"]
    out = []
    for code in sorted(TISSUE_LABELS):
        tname = TISSUE_LABELS[code]
        k = len(names)
        values = np.ones((k, k))
        for i, a in enumerate(names):
            for j in range(i + 1, k):
                per_scan = extras["pair_dice"][(a, names[j], tname)]
                mean = math.fsum(per_scan) / len(per_scan)
                values[i, j] = mean
                values[j, i] = mean
        out.append(DiceCorrelationMatrix(models=tuple(names), values=values, tissue=tname))
    return out


def main() -> None:
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        manifest_path = write_synthetic_dataset(tmp)
        manifest = load_manifest(manifest_path)
        table, extras = build_table(manifest)

        write_metrics(table, GOLDEN_DIR / "metrics.csv")
        write_json([], GOLDEN_DIR / "exclusions.json")
        write_json(build_summary(table, run_metadata(manifest_path)), GOLDEN_DIR / "summary.json")
        write_json(compare_all(table), GOLDEN_DIR / "stats.json")
        agreement = {
            TISSUE_LABELS[code]: run_thickness_agreement(table, TISSUE_LABELS[code])
            for code in CARTILAGE_TISSUES
        }
        write_json(agreement, GOLDEN_DIR / "bland_altman.json")
        for tname, profiles in build_droid_profiles(extras).items():
            write_droid_csv(profiles, GOLDEN_DIR / f"droid_{tname}.csv")
            write_droid_svg(profiles, GOLDEN_DIR / f"droid_{tname}.svg", title=tname)
        for matrix in build_matrices(extras):
            write_correlation_csv(matrix, GOLDEN_DIR / f"dice_correlation_{matrix.tissue}.csv")
    print(f"goldens written to {GOLDEN_DIR}")


if __name__ == "__main__":
    main()
