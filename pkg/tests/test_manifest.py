import json

import numpy as np
import pytest

from voleval.manifest import ManifestError, ScanRecord, load_manifest
from voleval.volume import LabelVolume, VoxelSpacing, save_volume


def write_stub_volume(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    save_volume(LabelVolume(np.zeros((2, 2, 2), np.uint8), VoxelSpacing(1, 1, 1)), path)


def write_manifest(tmp_path, rows, header=None):
    header = header or "subject_id,timepoint,split,ground_truth_path,model:a,model:b,kl_grade,bmi,age,sex"
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


def stub_files(tmp_path, names):
    for name in names:
        write_stub_volume(tmp_path / name)


def test_two_timepoints_one_subject(tmp_path):
    stub_files(tmp_path, ["gt0.segv", "gt1.segv", "a0.segv", "a1.segv", "b0.segv", "b1.segv"])
    path = write_manifest(tmp_path, [
        "s1,baseline,test,gt0.segv,a0.segv,b0.segv,2,27.5,63,male",
        "s1,year1,test,gt1.segv,a1.segv,b1.segv,2,27.5,64,male",
    ])
    manifest = load_manifest(path)
    assert len(manifest.scans) == 2
    assert manifest.models == ("a", "b")
    assert manifest.scans[0].kl_grade == 2
    assert manifest.scans[1].timepoint == "year1"
    assert manifest.longitudinal_subjects() == ("s1",)


def test_unknown_split_names_row(tmp_path):
    stub_files(tmp_path, ["gt0.segv", "a0.segv", "b0.segv"])
    path = write_manifest(tmp_path, [
        "s1,baseline,holdout,gt0.segv,a0.segv,b0.segv,,,,",
    ])
    with pytest.raises(ManifestError, match="holdout"):
        load_manifest(path)


def test_missing_prediction_file_names_model_and_path(tmp_path):
    stub_files(tmp_path, ["gt0.segv", "a0.segv"])
    path = write_manifest(tmp_path, [
        "s1,baseline,test,gt0.segv,a0.segv,missing.segv,,,,",
    ])
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    assert "model b" in str(err.value)
    assert "missing.segv" in str(err.value)


def test_duplicate_scan_identity(tmp_path):
    stub_files(tmp_path, ["gt0.segv", "a0.segv", "b0.segv"])
    path = write_manifest(tmp_path, [
        "s1,baseline,test,gt0.segv,a0.segv,b0.segv,,,,",
        "s1,baseline,test,gt0.segv,a0.segv,b0.segv,,,,",
    ])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)


def test_optional_metadata_tolerated(tmp_path):
    stub_files(tmp_path, ["gt0.segv", "a0.segv", "b0.segv"])
    path = write_manifest(tmp_path, [
        "s1,baseline,train,gt0.segv,a0.segv,b0.segv,,,,",
    ])
    scan = load_manifest(path).scans[0]
    assert scan.kl_grade is None and scan.bmi is None and scan.age is None and scan.sex is None


def test_bad_kl_grade(tmp_path):
    stub_files(tmp_path, ["gt0.segv", "a0.segv", "b0.segv"])
    path = write_manifest(tmp_path, [
        "s1,baseline,test,gt0.segv,a0.segv,b0.segv,7,,,",
    ])
    with pytest.raises(ManifestError, match="kl_grade"):
        load_manifest(path)


def test_json_mirror(tmp_path):
    stub_files(tmp_path, ["gt0.segv", "a0.segv"])
    doc = {
        "through_plane_axis": 0,
        "scans": [
            {
                "subject_id": "s1",
                "timepoint": "baseline",
                "split": "validation",
                "ground_truth_path": "gt0.segv",
                "model:a": "a0.segv",
                "kl_grade": 3,
                "bmi": 31.2,
                "age": 58,
                "sex": "female",
            }
        ],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    manifest = load_manifest(path)
    assert manifest.through_plane_axis == 0
    assert manifest.models == ("a",)
    assert manifest.scans[0].bmi == pytest.approx(31.2)
    assert manifest.scans[0].sex == "female"


def test_validate_paths_off(tmp_path):
    path = write_manifest(tmp_path, [
        "s1,baseline,test,gt0.segv,a0.segv,b0.segv,,,,",
    ])
    manifest = load_manifest(path, validate_paths=False)
    assert manifest.scans[0].ground_truth_path == "gt0.segv"


def test_longitudinal_subjects_requires_both_timepoints(tmp_path):
    stub_files(tmp_path, ["g1.segv", "g2.segv", "g3.segv", "a.segv"])
    header = "subject_id,timepoint,split,ground_truth_path,model:a"
    path = write_manifest(tmp_path, [
        "s1,baseline,test,g1.segv,a.segv",
        "s1,year1,test,g2.segv,a.segv",
        "s2,year1,test,g3.segv,a.segv",
    ], header=header)
    manifest = load_manifest(path)
    assert manifest.longitudinal_subjects() == ("s1",)


def test_scan_record_validation():
    with pytest.raises(ManifestError, match="timepoint"):
        ScanRecord(subject_id="s", timepoint="month6", split="test", ground_truth_path="x")
    with pytest.raises(ManifestError, match="sex"):
        ScanRecord(subject_id="s", timepoint="baseline", split="test",
                   ground_truth_path="x", sex="other")


def test_scans_for_split_filter(tmp_path):
    stub_files(tmp_path, ["g1.segv", "g2.segv", "a.segv"])
    header = "subject_id,timepoint,split,ground_truth_path,model:a"
    path = write_manifest(tmp_path, [
        "s1,baseline,train,g1.segv,a.segv",
        "s2,baseline,test,g2.segv,a.segv",
    ], header=header)
    manifest = load_manifest(path)
    assert [s.subject_id for s in manifest.scans_for(("test",))] == ["s2"]
    assert len(manifest.scans_for(None)) == 2
