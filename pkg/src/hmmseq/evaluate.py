"""Benchmark scoring: ROC/AUC, FDR calibration, call-set overlap, and a
goodness-of-fit test for spatial clustering of DE calls.

The spatial test compares the gaps between consecutive called genes along
each chromosome with the geometric law implied by independent calling at
the overall call rate; clustering inflates short gaps and rejects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .detect import PosteriorSummary, call_de


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise EvalError("AUC outside [0, 1]")
        if np.any(np.diff(self.fpr) < 0) or np.any(np.diff(self.tpr) < 0):
            raise EvalError("ROC coordinates must be nondecreasing")


def roc_curve(scores, truth) -> RocCurve:
    """Threshold sweep over scores with equal scores grouped into one step;
    AUC by the trapezoid rule (equivalently the normalized Mann-Whitney
    statistic with ties counted half)."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise EvalError("scores and truth must be aligned vectors")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("truth must contain both classes")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    group_end = np.append(np.nonzero(np.diff(s))[0], s.size - 1)
    tpr = np.concatenate([[0.0], tp[group_end] / n_pos])
    fpr = np.concatenate([[0.0], fp[group_end] / n_neg])
    return RocCurve(fpr, tpr, float(np.trapezoid(tpr, fpr)))


def fdr_calibration(p_hat, truth, grid) -> np.ndarray:
    """(nominal, observed) FDR pairs: calls at each nominal level, scored
    against truth; an empty call set counts as observed 0."""
    p_hat = np.asarray(p_hat, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    if p_hat.shape != truth.shape or p_hat.ndim != 1:
        raise EvalError("p_hat and truth must be aligned vectors")
    grid = [float(q) for q in grid]
    if any(not 0.0 < q < 1.0 for q in grid):
        raise EvalError("nominal levels must lie in (0, 1)")
    n = p_hat.size
    summary = PosteriorSummary(
        gene_ids=tuple(f"g{i}" for i in range(n)),
        chromosomes=("*",) * n,
        positions=np.arange(1, n + 1, dtype=np.int64),
        p_de=p_hat,
        p_under=np.zeros(n),
        p_over=p_hat,
        mean_delta=np.zeros(n),
        mean_beta=np.zeros(n),
    )
    out = np.empty((len(grid), 2))
    for row, q0 in enumerate(grid):
        called = call_de(summary, q0).called_mask()
        n_called = int(called.sum())
        observed = 0.0 if n_called == 0 else float((called & ~truth).sum()) / n_called
        out[row] = (q0, observed)
    return out


def overlap_counts(sets) -> dict:
    """Exclusive region counts of the Venn decomposition of 2-4 named
    sets, keyed by the tuple of member names (in input order)."""
    names = list(sets)
    if not 2 <= len(names) <= 4:
        raise EvalError("overlap requires between 2 and 4 sets")
    members = {name: set(sets[name]) for name in names}
    regions: dict = {}
    for mask in range(1, 2 ** len(names)):
        key = tuple(n for b, n in enumerate(names) if mask >> b & 1)
        regions[key] = 0
    universe = set().union(*members.values())
    for item in universe:
        key = tuple(n for n in names if item in members[n])
        regions[key] += 1
    return regions


@dataclass(frozen=True)
class SpatialTestResult:
    statistic: float
    df: int
    p_value: float
    n_gaps: int
    p_hat: float
    cells: tuple  # (k_lo, k_hi or None for the open tail, observed, expected)


def spatial_geometric_test(calls, chromosomes=None, min_gaps: int = 20) -> SpatialTestResult:
    """Chi-square fit of pooled inter-call gaps against Geometric(p_hat).

    Gaps count the non-called genes between consecutive called genes within
    a chromosome; runs before the first and after the last call are censored
    and excluded. Cells are merged right to left until every expected count
    is at least 5, and one degree of freedom is spent on the estimated
    p_hat = calls/genes.
    """
    calls = np.asarray(calls, dtype=bool)
    if calls.ndim != 1:
        raise EvalError("calls must be a vector")
    if chromosomes is None:
        chromosomes = ["*"] * calls.size
    if len(chromosomes) != calls.size:
        raise EvalError("chromosomes must align with calls")

    gaps: list = []
    seen: dict = {}
    for label, flag in zip(chromosomes, calls):
        seen.setdefault(label, []).append(bool(flag))
    for flags in seen.values():
        idx = np.flatnonzero(np.asarray(flags, dtype=bool))
        if idx.size >= 2:
            gaps.extend((np.diff(idx) - 1).tolist())
    n = len(gaps)
    if n < min_gaps:
        raise EvalError(f"insufficient gaps: {n} < {min_gaps}")
    p_hat = float(calls.sum()) / calls.size
    if not 0.0 < p_hat < 1.0:
        raise EvalError("degenerate call rate")

    gap_arr = np.asarray(gaps, dtype=np.int64)
    counts = np.bincount(gap_arr)
    q = 1.0 - p_hat

    # the open tail starts at the largest k whose tail expectation n*q^k
    # still reaches 5, so sparse data keep expected-only cells below it
    if n * q < 5.0:
        k_star = 0
    else:
        k_star = max(int(math.floor(math.log(5.0 / n) / math.log(q))), 0)
        while k_star > 0 and n * q**k_star < 5.0:
            k_star -= 1
        while n * q ** (k_star + 1) >= 5.0:
            k_star += 1

    def obs_at(k: int) -> float:
        return float(counts[k]) if k < counts.size else 0.0

    groups: list = []
    cur_obs = float((gap_arr >= k_star).sum())
    cur_exp = n * q**k_star
    cur_lo: int = k_star
    cur_hi: int | None = None
    for k in range(k_star - 1, -1, -1):
        if cur_exp >= 5.0:
            groups.append((cur_lo, cur_hi, cur_obs, cur_exp))
            cur_obs, cur_exp = 0.0, 0.0
            cur_hi = k
        cur_obs += obs_at(k)
        cur_exp += n * p_hat * q**k
        cur_lo = k
    if groups and cur_exp < 5.0:
        lo2, hi2, o2, e2 = groups.pop()
        groups.append((cur_lo, hi2, cur_obs + o2, cur_exp + e2))
    else:
        groups.append((cur_lo, cur_hi, cur_obs, cur_exp))
    groups.reverse()

    df = len(groups) - 2
    if df < 1:
        raise EvalError("insufficient gaps for goodness-of-fit after merging")
    statistic = float(sum((o - e) ** 2 / e for _, _, o, e in groups))
    p_value = float(chi2.sf(statistic, df))
    return SpatialTestResult(statistic, df, p_value, n, p_hat, tuple(groups))
