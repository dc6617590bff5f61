"""Two-sided t-tests: Welch from summary statistics, paired over per-query scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from scipy.special import stdtr

ALPHA = 0.05


@dataclass(frozen=True)
class TTestResult:
    method_a: str
    method_b: str
    metric: str
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    test_kind: str
    degenerate: bool = False
    alpha: float = ALPHA

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha


def _two_sided_p(t: float, df: float) -> float:
    return float(min(1.0, 2.0 * stdtr(df, -abs(t))))


def _degenerate(diff: float) -> tuple[float, float, bool]:
    # zero variance on both sides: equal means are indistinguishable, unequal ones certain
    if diff == 0:
        return 0.0, 1.0, True
    return math.copysign(math.inf, diff), 0.0, True


def welch_from_summary(mean_a: float, std_a: float, n_a: int, mean_b: float, std_b: float, n_b: int,
                       *, method_a: str = "a", method_b: str = "b", metric: str = "") -> TTestResult:
    if n_a < 2 or n_b < 2:
        raise ValueError("Welch test needs at least two runs per method")
    va, vb = std_a ** 2 / n_a, std_b ** 2 / n_b
    se2 = va + vb
    diff = mean_a - mean_b
    if se2 == 0:
        t, p, degenerate = _degenerate(diff)
        return TTestResult(method_a, method_b, metric, t, float(n_a + n_b - 2), p, "summary_welch", degenerate)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / ((va ** 2 / (n_a - 1) if va else 0.0) + (vb ** 2 / (n_b - 1) if vb else 0.0))
    return TTestResult(method_a, method_b, metric, t, df, _two_sided_p(t, df), "summary_welch")


def paired(a: Sequence[float], b: Sequence[float], *, method_a: str = "a", method_b: str = "b",
           metric: str = "") -> TTestResult:
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired test needs at least two pairs")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    df = float(n - 1)
    if var == 0:
        t, p, degenerate = _degenerate(mean)
        return TTestResult(method_a, method_b, metric, t, df, p, "per_query_paired", degenerate)
    t = mean / math.sqrt(var / n)
    return TTestResult(method_a, method_b, metric, t, df, _two_sided_p(t, df), "per_query_paired")
