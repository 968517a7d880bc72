"""Dataset manifests: which scans exist, where the masks live.

A manifest is a CSV or JSON file listing one row per scan. CSV columns:

    subject_id, timepoint, split, ground_truth_path,
    model:<name> (one column per model),
    kl_grade, bmi, age, sex

The JSON mirror is ``{"through_plane_axis": ..., "scans": [{...}]}`` with
the same field names per scan (or a bare list of such objects). Relative
paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

__all__ = ["ManifestError", "ScanRecord", "DatasetManifest", "load_manifest"]

TIMEPOINTS = ("baseline", "year1")
SPLITS = ("train", "validation", "test")
SEXES = ("male", "female")
KL_GRADES = (1, 2, 3, 4)

MODEL_COLUMN_PREFIX = "model:"


class ManifestError(ValueError):
    """The manifest is malformed or references missing files."""


@dataclass(frozen=True)
class ScanRecord:
    """One scan: identity, split, mask paths, optional subject metadata."""

    subject_id: str
    timepoint: str
    split: str
    ground_truth_path: str
    prediction_paths: Mapping[str, str] = field(default_factory=dict)
    kl_grade: int | None = None
    bmi: float | None = None
    age: float | None = None
    sex: str | None = None

    def __post_init__(self):
        if not self.subject_id:
            raise ManifestError("subject_id must be nonempty")
        if self.timepoint not in TIMEPOINTS:
            raise ManifestError(
                f"scan {self.subject_id}: timepoint {self.timepoint!r} not in {TIMEPOINTS}"
            )
        if self.split not in SPLITS:
            raise ManifestError(
                f"scan {self.subject_id}/{self.timepoint}: split {self.split!r} not in {SPLITS}"
            )
        if self.kl_grade is not None and self.kl_grade not in KL_GRADES:
            raise ManifestError(
                f"scan {self.subject_id}/{self.timepoint}: kl_grade {self.kl_grade} not in {KL_GRADES}"
            )
        if self.sex is not None and self.sex not in SEXES:
            raise ManifestError(
                f"scan {self.subject_id}/{self.timepoint}: sex {self.sex!r} not in {SEXES}"
            )
        object.__setattr__(self, "prediction_paths", dict(self.prediction_paths))

    @property
    def scan_id(self) -> tuple[str, str]:
        return (self.subject_id, self.timepoint)


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered scan records plus dataset-level declarations."""

    scans: tuple[ScanRecord, ...]
    models: tuple[str, ...]
    through_plane_axis: int = 2
    base_dir: Path = Path(".")
    source_path: Path | None = None

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def scans_for(self, splits: tuple[str, ...] | None = None) -> tuple[ScanRecord, ...]:
        if splits is None:
            return self.scans
        return tuple(s for s in self.scans if s.split in splits)

    def longitudinal_subjects(self, splits: tuple[str, ...] | None = None) -> tuple[str, ...]:
        """Subjects with both timepoints present, in manifest order."""
        by_subject: dict[str, set[str]] = {}
        order: list[str] = []
        for s in self.scans_for(splits):
            if s.subject_id not in by_subject:
                by_subject[s.subject_id] = set()
                order.append(s.subject_id)
            by_subject[s.subject_id].add(s.timepoint)
        return tuple(s for s in order if by_subject[s] == set(TIMEPOINTS))


def _parse_optional_float(text: str | None, what: str, row: str) -> float | None:
    if text is None or text == "":
        return None
    try:
        return float(text)
    except ValueError as exc:
        raise ManifestError(f"{row}: {what} {text!r} is not a number") from exc


def _parse_optional_int(text, what: str, row: str) -> int | None:
    if text is None or text == "":
        return None
    try:
        return int(text)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{row}: {what} {text!r} is not an integer") from exc


def _record_from_fields(fields: Mapping[str, object], row: str) -> ScanRecord:
    predictions: dict[str, str] = {}
    for key, value in fields.items():
        if isinstance(key, str) and key.startswith(MODEL_COLUMN_PREFIX):
            name = key[len(MODEL_COLUMN_PREFIX):]
            if not name:
                raise ManifestError(f"{row}: empty model name in column {key!r}")
            if value not in (None, ""):
                predictions[name] = str(value)

    def get(name: str) -> str | None:
        v = fields.get(name)
        return None if v in (None, "") else str(v)

    subject = get("subject_id")
    gt = get("ground_truth_path")
    if subject is None:
        raise ManifestError(f"{row}: missing subject_id")
    if gt is None:
        raise ManifestError(f"{row}: missing ground_truth_path")
    try:
        return ScanRecord(
            subject_id=subject,
            timepoint=get("timepoint") or "",
            split=get("split") or "",
            ground_truth_path=gt,
            prediction_paths=predictions,
            kl_grade=_parse_optional_int(fields.get("kl_grade"), "kl_grade", row),
            bmi=_parse_optional_float(get("bmi"), "bmi", row),
            age=_parse_optional_float(get("age"), "age", row),
            sex=get("sex"),
        )
    except ManifestError as exc:
        raise ManifestError(f"{row}: {exc}") from exc


def load_manifest(path: str | Path, validate_paths: bool = True) -> DatasetManifest:
    """Load and validate a CSV or JSON manifest.

    Rejects duplicate (subject, timepoint) identities and, when
    ``validate_paths`` is set, any referenced mask file that does not
    exist on disk.
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such manifest: {p}")
    text = p.read_text(encoding="utf-8")
    axis = 2
    rows: list[ScanRecord] = []
    if text.lstrip().startswith(("{", "[")):
        doc = json.loads(text)
        if isinstance(doc, dict):
            axis = int(doc.get("through_plane_axis", 2))
            scan_objs = doc.get("scans", [])
        else:
            scan_objs = doc
        for i, obj in enumerate(scan_objs):
            rows.append(_record_from_fields(obj, f"{p} scan[{i}]"))
    else:
        reader = csv.DictReader(text.splitlines())
        if reader.fieldnames is None:
            raise ManifestError(f"{p}: empty manifest")
        for i, fields in enumerate(reader):
            rows.append(_record_from_fields(fields, f"{p} row {i + 2}"))
    if not rows:
        raise ManifestError(f"{p}: manifest lists no scans")
    if axis not in (0, 1, 2):
        raise ManifestError(f"{p}: through_plane_axis must be 0, 1 or 2, got {axis}")

    seen: set[tuple[str, str]] = set()
    for rec in rows:
        if rec.scan_id in seen:
            raise ManifestError(
                f"{p}: duplicate scan identity {rec.subject_id}/{rec.timepoint}"
            )
        seen.add(rec.scan_id)

    models: list[str] = []
    for rec in rows:
        for name in rec.prediction_paths:
            if name not in models:
                models.append(name)

    manifest = DatasetManifest(
        scans=tuple(rows),
        models=tuple(models),
        through_plane_axis=axis,
        base_dir=p.parent,
        source_path=p,
    )
    if validate_paths:
        missing: list[str] = []
        for rec in manifest.scans:
            if not manifest.resolve(rec.ground_truth_path).is_file():
                missing.append(
                    f"{rec.subject_id}/{rec.timepoint}: ground_truth {rec.ground_truth_path}"
                )
            for model, mpath in rec.prediction_paths.items():
                if not manifest.resolve(mpath).is_file():
                    missing.append(f"{rec.subject_id}/{rec.timepoint}: model {model} {mpath}")
        if missing:
            raise ManifestError(f"{p}: dangling mask paths:\n  " + "\n  ".join(missing))
    return manifest
