import csv
import json
import math

import numpy as np
import pytest

from voleval.ensemble import parse_ensemble_spec
from voleval.manifest import load_manifest
from voleval.overlap import MetricRecord
from voleval.report import (
    MetricTable,
    RunConfig,
    compare_all,
    read_metrics_csv,
    round10,
    run_aggregate,
    run_compare,
    run_correlate,
    run_droid,
    run_evaluate,
    run_thickness_agreement,
    write_droid_csv,
    write_droid_svg,
    write_metrics_csv,
)
from voleval.volume import LabelVolume, TISSUE_LABELS, VoxelSpacing, save_volume

SPACING = VoxelSpacing(0.31, 0.46, 0.70)


def tiny_labels(seed, thin=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros((14, 12, 10), np.uint8)
    labels[2:12, 2:7 - thin, 2:8] = 1
    labels[2:12, 8:10, 2:8] = 2
    labels[3:6, 10:12, 3:7] = 3
    labels[8:12, 10:12, 3:7] = 4
    # sprinkle a little per-seed variation into tissue 1's edge
    edge = rng.random((10, 6)) < 0.3
    labels[2:12, 6 - thin, 2:8][edge] = 0
    return labels


def shift_x(labels):
    out = np.zeros_like(labels)
    out[1:] = labels[:-1]
    return out


def build_dataset(tmp_path, subjects=("p1", "p2"), with_year1=True):
    rows = []
    for si, subject in enumerate(subjects):
        timepoints = ("baseline", "year1") if with_year1 else ("baseline",)
        for ti, timepoint in enumerate(timepoints):
            labels = tiny_labels(seed=10 * si + ti, thin=ti)
            gt_path = tmp_path / f"gt_{subject}_{timepoint}.segv"
            save_volume(LabelVolume(labels, SPACING), gt_path)
            good = tmp_path / f"good_{subject}_{timepoint}.segv"
            save_volume(LabelVolume(labels, SPACING), good)
            off = tmp_path / f"off_{subject}_{timepoint}.segv"
            save_volume(LabelVolume(shift_x(labels), SPACING), off)
            rows.append(
                f"{subject},{timepoint},test,{gt_path.name},{good.name},{off.name},"
                f"{si + 1},25,60,male"
            )
    manifest = tmp_path / "manifest.csv"
    header = "subject_id,timepoint,split,ground_truth_path,model:good,model:off,kl_grade,bmi,age,sex"
    manifest.write_text("\n".join([header, *rows]) + "\n")
    return manifest


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("data")
    manifest_path = build_dataset(tmp)
    config = RunConfig(manifest=str(manifest_path), jobs=1)
    return manifest_path, config, run_evaluate(config)


class TestRunEvaluate:
    def test_identical_model_scores_perfectly(self, dataset):
        _, _, table = dataset
        for r in table.records:
            if r.model != "good":
                continue
            if r.metric in ("dice",):
                assert r.value == 1.0
            if r.metric in ("voe", "cv", "assd_mm", "thickness_error_mm", "thickness_diff_mm"):
                assert r.value == 0.0

    def test_completeness(self, dataset):
        manifest_path, _, table = dataset
        manifest = load_manifest(manifest_path)
        expected_scans = {(s.subject_id, s.timepoint) for s in manifest.scans}
        for model in ("good", "off"):
            for scan in expected_scans:
                for tissue in TISSUE_LABELS.values():
                    records = [
                        r
                        for r in table.records
                        if r.model == model
                        and (r.subject_id, r.timepoint) == scan
                        and r.tissue == tissue
                    ]
                    metrics = {r.metric for r in records}
                    assert {"dice", "voe", "volume_pred_mm3", "volume_gt_mm3"} <= metrics

    def test_no_duplicate_records(self, dataset):
        _, _, table = dataset
        keys = [(r.model, r.subject_id, r.timepoint, r.tissue, r.metric) for r in table.records]
        assert len(keys) == len(set(keys))

    def test_deterministic_across_jobs(self, dataset, tmp_path):
        manifest_path, config, table = dataset
        from dataclasses import replace

        table4 = run_evaluate(replace(config, jobs=4))
        assert table4.records == table.records
        assert table4.exclusions == table.exclusions
        p1, p4 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(table, p1)
        write_metrics_csv(table4, p4)
        assert p1.read_bytes() == p4.read_bytes()

    def test_records_sorted_and_rounded(self, dataset):
        _, _, table = dataset
        keys = [
            (r.model, r.subject_id, r.timepoint, r.tissue, r.metric) for r in table.records
        ]
        assert all(r.value == round10(r.value) for r in table.records)
        resorted = sorted(
            table.records,
            key=lambda r: (r.model, r.subject_id, r.timepoint,
                           list(TISSUE_LABELS.values()).index(r.tissue), r.metric),
        )
        assert list(table.records) == resorted

    def test_metadata(self, dataset):
        _, _, table = dataset
        assert table.metadata["tool"] == "voleval"
        assert table.metadata["manifest"] == "manifest.csv"
        assert len(table.metadata["manifest_sha256"]) == 64
        assert table.metadata["timestamp"] is None
        assert table.metadata["models"] == {"good": "model", "off": "model"}

    def test_csv_round_trip(self, dataset, tmp_path):
        _, _, table = dataset
        path = tmp_path / "metrics.csv"
        write_metrics_csv(table, path)
        back = read_metrics_csv(path)
        assert back.records == table.records


class TestEvaluateEdgeCases:
    def test_geometry_mismatch_excluded_run_continues(self, tmp_path):
        manifest_path = build_dataset(tmp_path, subjects=("p1",), with_year1=False)
        bad = tmp_path / "off_p1_baseline.segv"
        save_volume(LabelVolume(np.zeros((4, 4, 4), np.uint8), SPACING), bad)
        table = run_evaluate(RunConfig(manifest=str(manifest_path), jobs=1))
        assert any(
            e["model"] == "off" and "geometry" in e["reason"] for e in table.exclusions
        )
        assert any(r.model == "good" for r in table.records)
        assert not any(r.model == "off" for r in table.records)

    def test_empty_prediction_assd_policy(self, tmp_path):
        manifest_path = build_dataset(tmp_path, subjects=("p1",), with_year1=False)
        labels = tiny_labels(seed=0)
        labels[labels == 3] = 0  # drop patellar tissue entirely
        save_volume(LabelVolume(labels, SPACING), tmp_path / "off_p1_baseline.segv")

        table = run_evaluate(RunConfig(manifest=str(manifest_path), jobs=1))
        excl = [
            e for e in table.exclusions
            if e["model"] == "off" and e["metric"] == "assd_mm"
        ]
        assert len(excl) == 1 and "prediction" in excl[0]["reason"]
        assert not any(
            r.model == "off" and r.tissue == "patellar_cartilage" and r.metric == "assd_mm"
            for r in table.records
        )

        table_pen = run_evaluate(
            RunConfig(manifest=str(manifest_path), jobs=1, assd_empty_policy="max_penalty")
        )
        penalized = [
            r for r in table_pen.records
            if r.model == "off" and r.tissue == "patellar_cartilage" and r.metric == "assd_mm"
        ]
        assert len(penalized) == 1 and penalized[0].value > 0

    def test_unknown_model_rejected(self, tmp_path):
        manifest_path = build_dataset(tmp_path, subjects=("p1",), with_year1=False)
        with pytest.raises(Exception, match="nope"):
            run_evaluate(RunConfig(manifest=str(manifest_path), models=("nope",), jobs=1))

    def test_missing_prediction_cell_excluded(self, tmp_path):
        # "off" exists for p2 but has no prediction listed for p1
        manifest_path = build_dataset(tmp_path, subjects=("p1", "p2"), with_year1=False)
        lines = manifest_path.read_text().splitlines()
        header = lines[0].split(",")
        row = lines[1].split(",")
        assert row[0] == "p1"
        row[header.index("model:off")] = ""
        manifest_path.write_text("\n".join([lines[0], ",".join(row), *lines[2:]]) + "\n")
        table = run_evaluate(RunConfig(manifest=str(manifest_path), jobs=1))
        assert any(
            e["model"] == "off" and e["subject_id"] == "p1" and "no prediction" in e["reason"]
            for e in table.exclusions
        )
        assert any(r.model == "off" and r.subject_id == "p2" for r in table.records)
        assert not any(r.model == "off" and r.subject_id == "p1" for r in table.records)

    def test_empty_split_selection_rejected(self, tmp_path):
        manifest_path = build_dataset(tmp_path, subjects=("p1",), with_year1=False)
        with pytest.raises(Exception, match="no scans"):
            run_evaluate(
                RunConfig(manifest=str(manifest_path), splits=("validation",), jobs=1)
            )

    def test_ensembles_evaluated(self, tmp_path):
        manifest_path = build_dataset(tmp_path, subjects=("p1",), with_year1=False)
        specs = (
            parse_ensemble_spec("vote:k=1", ("good", "off")),
            parse_ensemble_spec("oracle:tp", ("good", "off")),
            parse_ensemble_spec("oracle:tn", ("good", "off")),
        )
        table = run_evaluate(RunConfig(manifest=str(manifest_path), ensembles=specs, jobs=1))
        models = {r.model for r in table.records}
        assert {"vote:k=1", "oracle:tp", "oracle:tn"} <= models
        assert table.metadata["models"]["oracle:tp"] == "oracle_ensemble"
        assert table.metadata["vote_conflict_voxels"] == {"vote:k=1": 0}
        # oracle ensembles contain the reference, so they score >= the members
        for r in table.records:
            if r.model == "oracle:tp" and r.metric == "dice":
                assert r.value == 1.0  # one member is the reference itself


class TestAggregate:
    def test_single_record(self):
        table = MetricTable(
            records=(
                MetricRecord("m", "s", "baseline", "femoral_cartilage", "dice", 0.9),
            )
        )
        summary = run_aggregate(table)
        cell = summary["aggregates"][0]
        assert cell["value"] == 0.9 and cell["sd"] == 0.0 and cell["n"] == 1

    def test_mean_and_sd(self):
        table = MetricTable(
            records=(
                MetricRecord("m", "s1", "baseline", "femoral_cartilage", "dice", 0.8),
                MetricRecord("m", "s2", "baseline", "femoral_cartilage", "dice", 0.9),
            )
        )
        cell = run_aggregate(table)["aggregates"][0]
        assert cell["value"] == pytest.approx(0.85, abs=1e-12)
        assert cell["sd"] == pytest.approx(0.07071067812, abs=1e-9)

    def test_cv_aggregates_as_rms(self):
        table = MetricTable(
            records=(
                MetricRecord("m", "s1", "baseline", "femoral_cartilage", "cv", 0.3),
                MetricRecord("m", "s2", "baseline", "femoral_cartilage", "cv", 0.4),
            )
        )
        cell = run_aggregate(table)["aggregates"][0]
        assert cell["aggregation"] == "rms"
        assert cell["value"] == pytest.approx(math.sqrt(0.125 / 2 * 2), abs=1e-9)
        assert cell["value"] == pytest.approx(0.3535533906, abs=1e-9)

    def test_best_marking(self, dataset):
        _, _, table = dataset
        summary = run_aggregate(table)
        best: dict = {}
        for c in summary["aggregates"]:
            if c.get("best"):
                best.setdefault((c["tissue"], c["metric"]), set()).add(c["model"])
        # the identical model is never beaten; ties (e.g. the shifted model's
        # translation-invariant thickness) legitimately share the mark
        for models in best.values():
            assert "good" in models
        assert best[("femoral_cartilage", "dice")] == {"good"}
        assert best[("femoral_cartilage", "assd_mm")] == {"good"}
        assert best[("femoral_cartilage", "thickness_error_mm")] == {"good", "off"}

    def test_kl_stratification(self, dataset):
        manifest_path, _, table = dataset
        manifest = load_manifest(manifest_path)
        summary = run_aggregate(table, manifest=manifest, stratify_kl=True)
        kls = {c["kl_grade"] for c in summary["kl_stratified"]}
        assert kls == {1, 2}

    def test_kl_stratification_missing_metadata(self, tmp_path):
        manifest_path = build_dataset(tmp_path, subjects=("p1",), with_year1=False)
        text = manifest_path.read_text().replace(",1,25,60,male", ",,25,60,male")
        manifest_path.write_text(text)
        config = RunConfig(manifest=str(manifest_path), jobs=1)
        table = run_evaluate(config)
        with pytest.raises(ValueError, match="kl_grade"):
            run_aggregate(table, manifest=load_manifest(manifest_path), stratify_kl=True)

    def test_self_consistency_with_csv(self, dataset, tmp_path):
        _, _, table = dataset
        path = tmp_path / "metrics.csv"
        write_metrics_csv(table, path)
        again = run_aggregate(read_metrics_csv(path))
        original = run_aggregate(table)
        assert again["aggregates"] == original["aggregates"]


class TestCompare:
    def test_identical_models_p_one(self, dataset):
        _, _, table = dataset
        # add a clone of "good" so two models tie exactly
        clones = tuple(
            MetricRecord("good2", r.subject_id, r.timepoint, r.tissue, r.metric, r.value)
            for r in table.records
            if r.model == "good"
        )
        merged = MetricTable(records=table.records + clones, metadata=table.metadata)
        out = run_compare(merged, "dice", "femoral_cartilage")
        grp = [m for m in out["models"] if m in ("good", "good2")]
        assert len(grp) == 2
        pair = [
            d for d in out["dunn"]
            if {d["model_a"], d["model_b"]} == {"good", "good2"}
        ][0]
        assert pair["p_adjusted"] == 1.0
        assert not pair["significant"]

    def test_pair_count_for_six_models(self, dataset):
        _, _, table = dataset
        records = []
        for i in range(6):
            for r in table.records:
                if r.model == "off" and r.metric == "dice":
                    records.append(
                        MetricRecord(f"m{i}", r.subject_id, r.timepoint, r.tissue,
                                     "dice", r.value + 0.001 * i)
                    )
        table6 = MetricTable(records=tuple(records))
        out = run_compare(table6, "dice", "femoral_cartilage")
        assert len(out["dunn"]) == 15

    def test_compare_all_covers_tissues(self, dataset):
        _, _, table = dataset
        doc = compare_all(table)
        pairs = {(c["tissue"], c["metric"]) for c in doc["comparisons"]}
        assert ("meniscus", "dice") in pairs
        assert ("meniscus", "thickness_error_mm") not in pairs
        assert ("femoral_cartilage", "thickness_error_mm") in pairs

    def test_needs_two_models(self, dataset):
        _, _, table = dataset
        solo = MetricTable(records=tuple(r for r in table.records if r.model == "good"))
        with pytest.raises(ValueError):
            run_compare(solo, "dice", "femoral_cartilage")


class TestThicknessAgreement:
    def test_identical_model_zero_bias(self, dataset):
        _, _, table = dataset
        solo = MetricTable(
            records=tuple(r for r in table.records if r.model == "good"),
            metadata=table.metadata,
        )
        out = run_thickness_agreement(solo, "femoral_cartilage")
        assert out["per_scan"]["bias"] == 0.0
        assert out["per_scan"]["loa_low"] == 0.0 == out["per_scan"]["loa_high"]
        assert out["longitudinal"]["bias"] == 0.0

    def test_longitudinal_skips_unpaired(self, tmp_path):
        manifest_path = build_dataset(tmp_path, subjects=("p1", "p2"))
        lines = manifest_path.read_text().splitlines()
        # drop p2/year1 -> p2 unpaired
        lines = [l for l in lines if not l.startswith("p2,year1")]
        manifest_path.write_text("\n".join(lines) + "\n")
        table = run_evaluate(RunConfig(manifest=str(manifest_path), jobs=1))
        out = run_thickness_agreement(table, "femoral_cartilage")
        assert {s["subject_id"] for s in out["skipped"]} == {"p2"}

    def test_constructed_affine_correlation(self):
        records = []
        for i in range(10):
            d = 0.80 + 0.02 * i
            records.append(MetricRecord("m", f"s{i}", "baseline", "femoral_cartilage", "dice", d))
            records.append(
                MetricRecord("m", f"s{i}", "baseline", "femoral_cartilage",
                             "thickness_error_mm", 0.5 * (1 - d))
            )
            records.append(
                MetricRecord("m", f"s{i}", "baseline", "femoral_cartilage",
                             "thickness_diff_mm", 0.5 * (1 - d))
            )
            records.append(
                MetricRecord("m", f"s{i}", "baseline", "femoral_cartilage",
                             "thickness_pred_mm", 2.0)
            )
            records.append(
                MetricRecord("m", f"s{i}", "baseline", "femoral_cartilage",
                             "thickness_gt_mm", 2.0)
            )
        out = run_thickness_agreement(MetricTable(records=tuple(records)), "femoral_cartilage")
        corr = out["pearson_vs_thickness_error"]["dice"]
        assert corr["r"] == pytest.approx(-1.0, abs=1e-9)
        assert corr["category"] == "very strong"

    def test_oracle_models_excluded(self, dataset):
        _, _, table = dataset
        oracle_records = tuple(
            MetricRecord("oracle:tp", r.subject_id, r.timepoint, r.tissue, r.metric, 0.0)
            for r in table.records
            if r.model == "good" and r.metric.startswith("thickness")
        )
        merged = MetricTable(records=table.records + oracle_records, metadata=table.metadata)
        out = run_thickness_agreement(merged, "femoral_cartilage")
        assert "oracle:tp" not in out["models"]


class TestDroidAndCorrelate:
    def test_droid_profiles(self, dataset, tmp_path):
        manifest_path, config, _ = dataset
        profiles = run_droid(config)
        by_key = {(p.model, p.tissue): p for p in profiles}
        perfect = by_key[("good", "femoral_cartilage")]
        assert all(m in (None, 1.0) for m in perfect.means)
        csv_path = tmp_path / "droid.csv"
        write_droid_csv([perfect], csv_path)
        rows = list(csv.DictReader(csv_path.open()))
        assert len(rows) == config.droid_bins
        svg_path = tmp_path / "droid.svg"
        write_droid_svg(profiles[:2], svg_path, title="femoral_cartilage")
        svg = svg_path.read_text()
        assert svg.startswith("<svg") and "polyline" in svg

    def test_correlation_matrices(self, dataset):
        _, config, _ = dataset
        matrices = run_correlate(config)
        assert len(matrices) == 4
        for mat in matrices:
            assert mat.models == ("good", "off")
            assert mat.values[0, 0] == 1.0 and mat.values[1, 1] == 1.0
            assert mat.values[0, 1] == mat.values[1, 0]
            assert 0.0 <= mat.values[0, 1] < 1.0


class TestRunConfig:
    def test_from_json_round_trip(self, tmp_path):
        doc = {
            "manifest": "m.csv",
            "models": ["a", "b"],
            "ensembles": [{"spec": "vote:k=2", "members": ["a", "b"]}],
            "splits": ["test", "validation"],
            "droid_bins": 10,
            "cv_variant": "population",
            "assd_empty_policy": "max_penalty",
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        config = RunConfig.from_json(path)
        assert config.models == ("a", "b")
        assert config.ensembles[0].name == "vote:k=2"
        assert config.cv_variant == "population"
        echo = config.echo()
        assert "jobs" not in echo and "out" not in echo

    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(manifest="m.csv", cv_variant="weird")
        with pytest.raises(ValueError):
            RunConfig(manifest="m.csv", splits=("holdout",))
        with pytest.raises(ValueError):
            RunConfig(manifest="m.csv", droid_bins=1)
