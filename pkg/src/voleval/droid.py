"""Depth-wise slice profiles: 2D slice Dice vs normalized slice position.

For each scan the through-plane extent is normalized to 0-100% between
the first and last slice containing any reference foreground; slices
outside the reference extent are ignored (padding a volume with empty
slices cannot change the profile). Slice Dice samples are pooled into
equal-width bins across scans.

Binning rule: a slice whose normalized position falls exactly on an
interior bin boundary contributes half weight to each adjacent bin
(positions and boundaries are compared in exact integer arithmetic).
This keeps profiles exactly symmetric under axis reversal, which bare
floor-binning cannot be: a boundary sample mirrors onto a boundary. A
reference extent of a single slice sits at 50%.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .overlap import check_same_geometry
from .volume import BinaryMask

__all__ = ["DepthProfile", "depth_profile", "scan_bin_samples", "profile_from_samples"]

BinSample = tuple[int, float, float]  # (bin index, weight, slice dice)


@dataclass(frozen=True)
class DepthProfile:
    """Per-bin mean slice Dice over [0, 100]% normalized position.

    ``means[i]`` is None for bins that received no samples (absent, not
    zero); ``counts[i]`` is the pooled sample weight of bin i.
    """

    bin_edges: tuple[float, ...]
    means: tuple[float | None, ...]
    counts: tuple[float, ...]
    model: str = ""
    tissue: str = ""

    @property
    def bins(self) -> int:
        return len(self.counts)


def slice_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice of one 2D slice; 1.0 when both slices are empty."""
    n_pred = int(np.count_nonzero(pred))
    n_gt = int(np.count_nonzero(gt))
    if n_pred + n_gt == 0:
        return 1.0
    inter = int(np.count_nonzero(pred & gt))
    return 2.0 * inter / (n_pred + n_gt)


def _bin_weights(m: int, extent: int, bins: int) -> list[tuple[int, float]]:
    """Bins hit by slice offset ``m`` of ``extent``, as [(bin, weight)].

    Position in bin units is bins*m/extent (bins/2 for a single-slice
    extent); exact interior boundary hits split half/half.
    """
    if extent == 0:
        num, den = bins, 2
    else:
        num, den = bins * m, extent
    q, r = divmod(num, den)
    if r != 0:
        return [(q, 1.0)]
    if q <= 0:
        return [(0, 1.0)]
    if q >= bins:
        return [(bins - 1, 1.0)]
    return [(q - 1, 0.5), (q, 0.5)]


def scan_bin_samples(
    pred: BinaryMask, gt: BinaryMask, axis: int = 2, bins: int = 20
) -> list[BinSample]:
    """Binned slice-Dice samples of one scan, or [] for an empty reference."""
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    check_same_geometry(pred, gt)
    g = np.moveaxis(gt.voxels, axis, 0)
    p = np.moveaxis(pred.voxels, axis, 0)
    occupied = np.flatnonzero(g.reshape(g.shape[0], -1).any(axis=1))
    if occupied.size == 0:
        return []
    i0, i1 = int(occupied[0]), int(occupied[-1])
    samples: list[BinSample] = []
    for i in occupied:
        d = slice_dice(p[i], g[i])
        for b, w in _bin_weights(int(i) - i0, i1 - i0, bins):
            samples.append((b, w, d))
    return samples


def profile_from_samples(
    samples: Sequence[BinSample], bins: int, model: str = "", tissue: str = ""
) -> DepthProfile:
    """Reduce pooled bin samples to a profile (fsum, order-independent)."""
    buckets: list[list[tuple[float, float]]] = [[] for _ in range(bins)]
    for b, w, d in samples:
        buckets[b].append((w, d))
    width = 100.0 / bins
    edges = tuple(i * width for i in range(bins + 1))
    means: list[float | None] = []
    counts: list[float] = []
    for bucket in buckets:
        total = math.fsum(w for w, _ in bucket)
        counts.append(total)
        means.append(None if total == 0.0 else math.fsum(w * d for w, d in bucket) / total)
    return DepthProfile(
        bin_edges=edges, means=tuple(means), counts=tuple(counts), model=model, tissue=tissue
    )


def depth_profile(
    pred: Sequence[BinaryMask],
    gt: Sequence[BinaryMask],
    axis: int = 2,
    bins: int = 20,
    model: str = "",
    tissue: str = "",
) -> DepthProfile:
    """Pooled depth-wise Dice profile over paired (pred, gt) scans.

    Scans whose reference mask is entirely empty are skipped with a
    warning; slices with an empty reference but a nonempty prediction
    lie outside the normalized extent and do not enter the profile.
    """
    if len(pred) != len(gt):
        raise ValueError(f"paired scan lists differ in length: {len(pred)} vs {len(gt)}")
    pooled: list[BinSample] = []
    for scan_index, (pm, gm) in enumerate(zip(pred, gt)):
        samples = scan_bin_samples(pm, gm, axis=axis, bins=bins)
        if not samples and gm.is_empty():
            warnings.warn(
                f"scan {scan_index}: reference mask empty along axis {axis}; skipped",
                stacklevel=2,
            )
            continue
        pooled.extend(samples)
    return profile_from_samples(pooled, bins, model=model, tissue=tissue)
