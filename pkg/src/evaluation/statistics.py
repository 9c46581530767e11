"""Paired Wilcoxon signed-rank test with rank-biserial effect size."""

from dataclasses import asdict, dataclass
from typing import Dict, Sequence

import numpy as np
from scipy import stats

EXACT_MAX_N = 20


class StatisticsError(ValueError):
    """Raised when a statistic is undefined for its input."""
    pass


@dataclass(frozen=True)
class PairedTestResult:
    statistic: float
    p_value: float
    rank_biserial: float
    n: int
    w_plus: float
    w_minus: float
    method: str

    def to_dict(self) -> Dict:
        return asdict(self)


def signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """
    Number of sign assignments reaching each doubled positive rank sum.

    Entry s counts the subsets of ranks whose doubled sum is s.
    """
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[:counts.size - rank]
        counts = counts + shifted
    return counts


def exact_p_value(doubled_ranks: np.ndarray, doubled_w_plus: int) -> float:
    counts = signed_rank_counts(doubled_ranks)
    total = counts.sum()
    lower = counts[:doubled_w_plus + 1].sum() / total
    upper = counts[doubled_w_plus:].sum() / total
    return float(min(1.0, 2.0 * min(lower, upper)))


def normal_p_value(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided normal approximation with tie-corrected variance and continuity correction."""
    mean = ranks.sum() / 2.0
    sd = np.sqrt((ranks ** 2).sum() / 4.0)
    z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    """
    Two-sided paired Wilcoxon signed-rank test on a - b.

    Zero differences are dropped and tied |d| get midranks. The p-value is exact
    for n <= 20 and uses the normal approximation above.

    Raises:
        StatisticsError: On unequal lengths or when every difference is zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatisticsError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        raise StatisticsError("test undefined: no non-zero paired differences")

    ranks = stats.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p_value = exact_p_value(doubled, int(doubled[d > 0].sum()))
        method = "exact"
    else:
        p_value = normal_p_value(ranks, w_plus)
        method = "normal"
    return PairedTestResult(
        statistic=min(w_plus, w_minus),
        p_value=p_value,
        rank_biserial=(w_plus - w_minus) / (w_plus + w_minus),
        n=n,
        w_plus=w_plus,
        w_minus=w_minus,
        method=method,
    )
