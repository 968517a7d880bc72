"""Nonparametric comparison machinery.

Kruskal-Wallis omnibus test (tie-corrected, chi-square p), Dunn
post-hoc z tests with Bonferroni correction, and Pearson correlation
with the coarse strength bands used for reporting.

The chi-square survival function is evaluated through the regularized
upper incomplete gamma; the normal survival through erfc. p-values are
therefore the usual large-sample approximations, not exact small-sample
tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata

__all__ = [
    "KWResult",
    "DunnPair",
    "DunnResult",
    "PearsonResult",
    "kruskal_wallis",
    "dunn_posthoc",
    "pearson",
    "strength_category",
]

STRENGTH_BANDS = (
    (0.2, "very weak"),
    (0.4, "weak"),
    (0.6, "moderate"),
    (0.8, "strong"),
)


@dataclass(frozen=True)
class KWResult:
    """Tie-corrected Kruskal-Wallis statistic and chi-square p-value."""

    H: float
    df: int
    p: float
    group_sizes: tuple[int, ...]
    degenerate: bool = False


@dataclass(frozen=True)
class DunnPair:
    """One pairwise Dunn comparison between group indices a < b."""

    a: int
    b: int
    z: float
    p_raw: float
    p_adjusted: float


@dataclass(frozen=True)
class DunnResult:
    pairs: tuple[DunnPair, ...]
    group_sizes: tuple[int, ...]
    degenerate: bool = False

    @property
    def n_comparisons(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class PearsonResult:
    r: float
    n: int
    category: str


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function via the regularized incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _check_groups(groups: Sequence[Sequence[float]]) -> tuple[np.ndarray, tuple[int, ...]]:
    if len(groups) < 2:
        raise ValueError(f"need at least 2 groups, got {len(groups)}")
    sizes = tuple(len(g) for g in groups)
    if any(n == 0 for n in sizes):
        raise ValueError("every group must be nonempty")
    data = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
    if data.size < 3:
        raise ValueError(f"need at least 3 observations in total, got {data.size}")
    if not np.isfinite(data).all():
        raise ValueError("observations must be finite")
    return data, sizes


def _tie_term(data: np.ndarray) -> float:
    _, counts = np.unique(data, return_counts=True)
    return float(((counts.astype(np.float64) ** 3) - counts).sum())


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> KWResult:
    """Tie-corrected Kruskal-Wallis H and its chi-square p-value.

    When every observation is identical the tie correction degenerates;
    the result is then H=0, p=1 with the ``degenerate`` flag set.
    """
    data, sizes = _check_groups(groups)
    n_total = data.size
    df = len(sizes) - 1
    tie = _tie_term(data)
    correction = 1.0 - tie / (n_total**3 - n_total)
    if correction <= 0.0:
        return KWResult(H=0.0, df=df, p=1.0, group_sizes=sizes, degenerate=True)
    ranks = rankdata(data)
    h = 0.0
    start = 0
    for n in sizes:
        r_sum = math.fsum(ranks[start:start + n])
        h += r_sum * r_sum / n
        start += n
    h = 12.0 / (n_total * (n_total + 1)) * h - 3.0 * (n_total + 1)
    h /= correction
    return KWResult(H=h, df=df, p=chi2_sf(h, df), group_sizes=sizes)


def dunn_posthoc(groups: Sequence[Sequence[float]]) -> DunnResult:
    """All-pairs Dunn z tests with pooled tie correction and Bonferroni.

    z_ij divides the mean-rank difference by
    sqrt((N(N+1)/12 - T/(12(N-1))) * (1/n_i + 1/n_j)) with
    T = sum(t^3 - t) over tied value groups; raw two-sided normal
    p-values are multiplied by the number of pairs and clamped to 1.
    """
    data, sizes = _check_groups(groups)
    n_total = data.size
    tie = _tie_term(data)
    variance = n_total * (n_total + 1) / 12.0 - tie / (12.0 * (n_total - 1))
    degenerate = variance <= 0.0
    ranks = rankdata(data)
    mean_ranks = []
    start = 0
    for n in sizes:
        mean_ranks.append(math.fsum(ranks[start:start + n]) / n)
        start += n
    k = len(sizes)
    n_pairs = k * (k - 1) // 2
    pairs = []
    for i in range(k):
        for j in range(i + 1, k):
            if degenerate:
                z = 0.0
            else:
                z = (mean_ranks[i] - mean_ranks[j]) / math.sqrt(
                    variance * (1.0 / sizes[i] + 1.0 / sizes[j])
                )
            p_raw = 2.0 * normal_sf(abs(z))
            pairs.append(
                DunnPair(a=i, b=j, z=z, p_raw=p_raw, p_adjusted=min(1.0, p_raw * n_pairs))
            )
    return DunnResult(pairs=tuple(pairs), group_sizes=sizes, degenerate=degenerate)


def strength_category(r: float) -> str:
    """Correlation strength band of |r|; gap values fall to the lower band."""
    magnitude = abs(r)
    if magnitude > 1.0:
        raise ValueError(f"|r| must be <= 1, got {r}")
    for upper, name in STRENGTH_BANDS:
        if magnitude < upper:
            return name
    return "very strong"


def pearson(x: Sequence[float], y: Sequence[float]) -> PearsonResult:
    """Product-moment correlation with its strength category.

    Constant input has no defined correlation and raises rather than
    returning 0.
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"x and y must be equal-length 1D sequences, got {xs.shape} vs {ys.shape}")
    n = xs.size
    if n < 2:
        raise ValueError(f"need at least 2 points, got {n}")
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    dx = xs - mx
    dy = ys - my
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined for constant input")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    return PearsonResult(r=r, n=n, category=strength_category(r))
