"""Volume-overlap metrics and the inter-model Dice-correlation matrix."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .volume import BinaryMask

__all__ = [
    "MetricRecord",
    "DiceCorrelationMatrix",
    "dice",
    "voe",
    "volume_mm3",
    "rms_cv",
    "dice_correlation_matrix",
]

CV_VARIANTS = ("sample", "population")


@dataclass(frozen=True)
class MetricRecord:
    """One long-format measurement: model x scan x tissue x metric."""

    model: str
    subject_id: str
    timepoint: str
    tissue: str
    metric: str
    value: float


@dataclass(frozen=True)
class DiceCorrelationMatrix:
    """Mean pairwise Dice between models over a common scan list."""

    models: tuple[str, ...]
    values: np.ndarray
    tissue: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        k = len(self.models)
        if v.shape != (k, k):
            raise ValueError(f"matrix shape {v.shape} does not match {k} models")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def entry(self, a: str, b: str) -> float:
        return float(self.values[self.models.index(a), self.models.index(b)])


def check_same_geometry(a: BinaryMask, b: BinaryMask) -> None:
    if a.dims != b.dims:
        raise ValueError(f"mask shape mismatch: {a.dims} vs {b.dims}")
    if not a.spacing.isclose(b.spacing):
        raise ValueError(
            f"mask spacing mismatch: {a.spacing.to_tuple()} vs {b.spacing.to_tuple()}"
        )


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice overlap 2|A^B| / (|A|+|B|); 1.0 when both masks are empty."""
    check_same_geometry(a, b)
    na, nb = a.voxel_count, b.voxel_count
    if na + nb == 0:
        warnings.warn("dice of two empty masks; returning 1.0 by convention", stacklevel=2)
        return 1.0
    inter = int(np.count_nonzero(a.voxels & b.voxels))
    return 2.0 * inter / (na + nb)


def voe(a: BinaryMask, b: BinaryMask) -> float:
    """Volumetric overlap error 1 - |A^B| / |AvB|; 0.0 when both empty."""
    check_same_geometry(a, b)
    union = int(np.count_nonzero(a.voxels | b.voxels))
    if union == 0:
        warnings.warn("voe of two empty masks; returning 0.0 by convention", stacklevel=2)
        return 0.0
    inter = int(np.count_nonzero(a.voxels & b.voxels))
    return 1.0 - inter / union


def volume_mm3(a: BinaryMask) -> float:
    """Physical tissue volume: true-voxel count times the voxel volume."""
    return a.voxel_count * a.spacing.voxel_volume_mm3


def pair_cv(v_pred: float, v_gt: float, variant: str = "sample") -> float:
    """Coefficient of variation of one (prediction, reference) volume pair.

    The "sample" variant divides the two-sample n-1 standard deviation
    |a-b|/sqrt(2) by the pair mean; "population" uses |a-b|/2 instead.
    """
    if variant not in CV_VARIANTS:
        raise ValueError(f"cv variant must be one of {CV_VARIANTS}, got {variant!r}")
    if v_pred < 0 or v_gt < 0:
        raise ValueError(f"volumes must be nonnegative, got {(v_pred, v_gt)}")
    mean = (v_pred + v_gt) / 2.0
    if mean == 0:
        raise ValueError("cv undefined: both volumes are zero")
    spread = abs(v_pred - v_gt)
    sd = spread / math.sqrt(2.0) if variant == "sample" else spread / 2.0
    return sd / mean


def rms_cv(
    pairs: Sequence[tuple[float, float]],
    variant: str = "sample",
    skip_undefined: bool = False,
) -> float:
    """Root-mean-square of per-pair volume CVs.

    A pair with both volumes zero has no defined CV; it raises unless
    ``skip_undefined`` is set, in which case it is dropped (with a
    warning naming how many were dropped).
    """
    if not pairs:
        raise ValueError("rms_cv needs at least one volume pair")
    cvs: list[float] = []
    dropped = 0
    for v_pred, v_gt in pairs:
        try:
            cvs.append(pair_cv(v_pred, v_gt, variant))
        except ValueError:
            if v_pred == 0 and v_gt == 0 and skip_undefined:
                dropped += 1
                continue
            raise
    if dropped:
        warnings.warn(f"rms_cv dropped {dropped} pair(s) with both volumes zero", stacklevel=2)
    if not cvs:
        raise ValueError("rms_cv: every pair had an undefined CV")
    return math.sqrt(math.fsum(c * c for c in cvs) / len(cvs))


def dice_correlation_matrix(
    masks: Mapping[str, Sequence[BinaryMask]], tissue: str = ""
) -> DiceCorrelationMatrix:
    """Mean pairwise Dice between every pair of models.

    Every model must supply masks for the same ordered scan list. The
    result is exactly symmetric with a unit diagonal.
    """
    models = tuple(masks)
    if not models:
        raise ValueError("no models given")
    lengths = {name: len(masks[name]) for name in models}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"scan-list mismatch across models: {lengths}")
    n_scans = lengths[models[0]]
    if n_scans == 0:
        raise ValueError("empty scan list")
    k = len(models)
    values = np.ones((k, k), dtype=np.float64)
    for i in range(k):
        for j in range(i + 1, k):
            per_scan = [dice(masks[models[i]][s], masks[models[j]][s]) for s in range(n_scans)]
            mean = math.fsum(per_scan) / n_scans
            values[i, j] = mean
            values[j, i] = mean
    return DiceCorrelationMatrix(models=models, values=values, tissue=tissue)
