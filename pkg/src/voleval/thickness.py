"""Cartilage thickness estimation and agreement statistics.

Thickness of a mask is estimated mesh-free as twice the inscribed-ball
radius sampled on the ridge of the inside distance transform: every
true voxel gets its anisotropic distance to the nearest background
(volume faces count as background), and voxels whose distance is >= all
26-neighbors (plateau maxima included) form the medial set. The mean of
2x distance over that set is the thickness in mm.

Meniscus thickness is deliberately not computed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .overlap import check_same_geometry
from .surface import distance_to_features_mm
from .volume import CARTILAGE_TISSUES, BinaryMask

__all__ = [
    "ThicknessResult",
    "BlandAltman",
    "mean_thickness_mm",
    "thickness_difference_mm",
    "thickness_error_mm",
    "longitudinal_change_mm",
    "bland_altman",
]


@dataclass(frozen=True)
class ThicknessResult:
    """Per-scan mean thickness of one cartilage tissue."""

    mean_thickness_mm: float
    medial_voxel_count: int
    tissue: int
    model: str = ""
    subject_id: str = ""
    timepoint: str = ""


@dataclass(frozen=True)
class BlandAltman:
    """Agreement summary: bias and 1.96-sd limits of agreement."""

    bias: float
    sd: float
    loa_low: float
    loa_high: float
    n: int


def _inside_distance_mm(mask: BinaryMask) -> np.ndarray:
    """Distance from each voxel center to the nearest background voxel
    center, with a one-voxel background shell beyond the volume faces."""
    padded_bg = np.pad(~mask.voxels, 1, mode="constant", constant_values=True)
    d = distance_to_features_mm(padded_bg, mask.spacing)
    return d[1:-1, 1:-1, 1:-1]


def _neighborhood_max(values: np.ndarray) -> np.ndarray:
    """Max over the 3x3x3 neighborhood (self included), zeros outside."""
    padded = np.pad(values, 1, mode="constant", constant_values=0.0)
    out = values.copy()
    nx, ny, nz = values.shape
    for ox in range(3):
        for oy in range(3):
            for oz in range(3):
                np.maximum(out, padded[ox:ox + nx, oy:oy + ny, oz:oz + nz], out=out)
    return out


def mean_thickness_mm(
    mask: BinaryMask, model: str = "", subject_id: str = "", timepoint: str = ""
) -> ThicknessResult:
    """Mean cartilage thickness (mm) of a mask; see module docstring.

    An empty mask yields thickness 0 with a warning rather than an
    error, so batch runs can flag and continue.
    """
    if mask.tissue not in CARTILAGE_TISSUES:
        raise ValueError(
            f"thickness is defined for cartilage tissues {CARTILAGE_TISSUES}, "
            f"not tissue {mask.tissue}"
        )
    if mask.is_empty():
        warnings.warn(
            f"thickness of an empty mask (tissue {mask.tissue}); reporting 0.0",
            stacklevel=2,
        )
        return ThicknessResult(0.0, 0, mask.tissue, model, subject_id, timepoint)
    inside = _inside_distance_mm(mask)
    ridge = mask.voxels & (inside >= _neighborhood_max(inside))
    samples = inside[ridge]
    thickness = math.fsum(2.0 * d for d in samples) / samples.size
    return ThicknessResult(
        float(thickness), int(samples.size), mask.tissue, model, subject_id, timepoint
    )


def thickness_difference_mm(pred: BinaryMask, gt: BinaryMask) -> float:
    """Signed thickness difference, prediction minus reference (mm)."""
    check_same_geometry(pred, gt)
    if pred.tissue != gt.tissue:
        raise ValueError(f"tissue mismatch: {pred.tissue} vs {gt.tissue}")
    return (
        mean_thickness_mm(pred).mean_thickness_mm - mean_thickness_mm(gt).mean_thickness_mm
    )


def thickness_error_mm(pred: BinaryMask, gt: BinaryMask) -> float:
    """Magnitude of the thickness difference (mm)."""
    return abs(thickness_difference_mm(pred, gt))


def longitudinal_change_mm(t0: ThicknessResult, t1: ThicknessResult) -> float:
    """Thickness change from baseline to year1 (signed mm)."""
    if t0.timepoint != "baseline" or t1.timepoint != "year1":
        raise ValueError(
            f"expected (baseline, year1) results, got ({t0.timepoint!r}, {t1.timepoint!r})"
        )
    if (t0.subject_id, t0.tissue, t0.model) != (t1.subject_id, t1.tissue, t1.model):
        raise ValueError(
            "longitudinal change needs matching subject/tissue/model, got "
            f"{(t0.subject_id, t0.tissue, t0.model)} vs {(t1.subject_id, t1.tissue, t1.model)}"
        )
    return t1.mean_thickness_mm - t0.mean_thickness_mm


def bland_altman(differences: Sequence[float]) -> BlandAltman:
    """Bias and 95% limits of agreement (bias +- 1.96 sd, n-1 sd)."""
    n = len(differences)
    if n < 2:
        raise ValueError(f"Bland-Altman needs at least 2 differences, got {n}")
    bias = math.fsum(differences) / n
    sd = math.sqrt(math.fsum((d - bias) ** 2 for d in differences) / (n - 1))
    half = 1.96 * sd
    return BlandAltman(bias=bias, sd=sd, loa_low=bias - half, loa_high=bias + half, n=n)
