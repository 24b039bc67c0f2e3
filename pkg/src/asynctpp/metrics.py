"""Evaluation metrics: duration RMSE, type error rate, and the optimal
transport distance between event sequences.

The OTD aligns the type-k subsequences of two event sequences
independently for each k: every unmatched event costs ``del_cost`` and a
matched pair costs ``trans_cost`` times the absolute time difference. The
dynamic program and the exhaustive recursion explore the same
insert/delete/match decisions with the same float operations, so they
agree exactly on instances small enough for the recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "OtdConfig",
    "rmse",
    "error_rate",
    "otd",
    "otd_bruteforce",
    "events_to_times",
]


@dataclass(frozen=True)
class OtdConfig:
    del_cost: float = 1.0
    trans_cost: float = 1.0

    def __post_init__(self):
        if self.del_cost <= 0 or self.trans_cost <= 0:
            raise ValueError("del_cost and trans_cost must be positive")


def rmse(pred_taus, true_taus) -> float:
    pred = np.asarray(pred_taus, dtype=np.float64)
    true = np.asarray(true_taus, dtype=np.float64)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("inputs must be nonempty and of equal length")
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def error_rate(pred_types, true_types) -> float:
    pred = np.asarray(pred_types)
    true = np.asarray(true_types)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("inputs must be nonempty and of equal length")
    return float(np.mean(pred != true))


def events_to_times(taus) -> list[float]:
    """Cumulative absolute times measured from the window start."""
    return list(np.cumsum(np.asarray(taus, dtype=np.float64)))


def _split_by_type(seq) -> dict[int, list[float]]:
    out: dict[int, list[float]] = {}
    prev = -np.inf
    for t, k in seq:
        if t < prev:
            raise ValueError("event times must be sorted")
        prev = t
        out.setdefault(int(k), []).append(float(t))
    return out


def _align_dp(a: list[float], b: list[float], del_cost: float, trans_cost: float) -> float:
    m, n = len(a), len(b)
    d = [[0.0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        d[i][0] = i * del_cost
    for j in range(1, n + 1):
        d[0][j] = j * del_cost
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i][j] = min(d[i - 1][j] + del_cost,
                          d[i][j - 1] + del_cost,
                          d[i - 1][j - 1] + trans_cost * abs(a[i - 1] - b[j - 1]))
    return d[m][n]


def otd(pred_seq, true_seq, config: OtdConfig = OtdConfig()) -> float:
    """Alignment distance between two sequences of (absolute time, type) pairs."""
    pred = _split_by_type(pred_seq)
    true = _split_by_type(true_seq)
    total = 0.0
    for k in sorted(set(pred) | set(true)):
        total += _align_dp(pred.get(k, []), true.get(k, []),
                           config.del_cost, config.trans_cost)
    return total


def _align_exhaustive(a: list[float], b: list[float], i: int, j: int,
                      del_cost: float, trans_cost: float) -> float:
    # memoless recursion over every monotone insert/delete/match decision;
    # arithmetic per decision matches the DP cell exactly
    if i == 0:
        return j * del_cost
    if j == 0:
        return i * del_cost
    return min(_align_exhaustive(a, b, i - 1, j, del_cost, trans_cost) + del_cost,
               _align_exhaustive(a, b, i, j - 1, del_cost, trans_cost) + del_cost,
               _align_exhaustive(a, b, i - 1, j - 1, del_cost, trans_cost)
               + trans_cost * abs(a[i - 1] - b[j - 1]))


def otd_bruteforce(pred_seq, true_seq, config: OtdConfig = OtdConfig()) -> float:
    """Exhaustive minimum over all monotone partial matchings (test oracle).

    Guarded to at most 6 events per type in either sequence.
    """
    pred = _split_by_type(pred_seq)
    true = _split_by_type(true_seq)
    total = 0.0
    for k in sorted(set(pred) | set(true)):
        a, b = pred.get(k, []), true.get(k, [])
        if len(a) > 6 or len(b) > 6:
            raise ValueError("brute-force oracle limited to 6 events per type")
        total += _align_exhaustive(a, b, len(a), len(b),
                                   config.del_cost, config.trans_cost)
    return total
