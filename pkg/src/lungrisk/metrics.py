"""Censoring-aware evaluation: per-year ROC/PR AUC, Harrell's C-index, bootstrap CIs.

Undefined metrics (single-class cohort, no comparable pairs) are reported as NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import HORIZON

UNDEFINED = math.nan


@dataclass
class EvalCohort:
    year: int
    scores: np.ndarray
    labels: np.ndarray
    included_ids: list = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return len(self.labels) > 0 and 0 < int(np.sum(self.labels)) < len(self.labels)


def _arrays(records):
    events = np.array([r.event for r in records], dtype=bool)
    times = np.array([r.time_years for r in records], dtype=float)
    return events, times


def year_cohort(cum_probs, records, year: int) -> EvalCohort:
    """Positives: event by ``year``. Negatives: event after ``year`` or follow-up >= ``year``.

    Subjects censored before ``year`` without an event are excluded.
    """
    if not 1 <= year <= HORIZON:
        raise ValueError(f"year must be in 1..{HORIZON}, got {year}")
    cum_probs = np.asarray(cum_probs, dtype=float)
    if len(cum_probs) != len(records):
        raise ValueError("predictions and records are not aligned")
    events, times = _arrays(records)
    pos = events & (times <= year)
    neg = (events & (times > year)) | (~events & (times >= year))
    keep = pos | neg
    ids = [r.sample_id for r, k in zip(records, keep) if k]
    return EvalCohort(year, cum_probs[keep, year - 1], pos[keep].astype(np.int64), ids)


def roc_auc(c: EvalCohort) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    y = np.asarray(c.labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(np.asarray(c.scores, dtype=float))
    # rank sums are exact multiples of 1/2, so the numerator is exact
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _tie_groups(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return tp, fp


def pr_auc(c: EvalCohort) -> float:
    """Average precision: sum over distinct thresholds of (recall step) x precision."""
    scores = np.asarray(c.scores, dtype=float)
    y = np.asarray(c.labels).astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0:
        return UNDEFINED
    tp, fp = _tie_groups(scores, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def roc_curve(c: EvalCohort):
    scores = np.asarray(c.scores, dtype=float)
    y = np.asarray(c.labels).astype(np.int64)
    tp, fp = _tie_groups(scores, y)
    n_pos, n_neg = max(int(y.sum()), 1), max(len(y) - int(y.sum()), 1)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def pr_curve(c: EvalCohort):
    scores = np.asarray(c.scores, dtype=float)
    y = np.asarray(c.labels).astype(np.int64)
    tp, fp = _tie_groups(scores, y)
    return tp / max(int(y.sum()), 1), tp / (tp + fp)


SCORE_RULES = {
    "year6": lambda p: p[:, HORIZON - 1],
    "year1": lambda p: p[:, 0],
    "mean": lambda p: p.mean(axis=1),
}


def risk_scores(cum_probs, score_rule="year6") -> np.ndarray:
    p = np.asarray(cum_probs, dtype=float)
    if callable(score_rule):
        return np.asarray(score_rule(p), dtype=float)
    if p.ndim == 1:
        return p
    return SCORE_RULES[score_rule](p)


def concordance(scores, events, times, block: int = 1024) -> tuple[float, float]:
    """(concordant + ties/2, comparable) over Harrell-comparable pairs."""
    scores = np.asarray(scores, dtype=float)
    events = np.asarray(events, dtype=bool)
    times = np.asarray(times, dtype=float)
    num = 0.0
    den = 0
    idx = np.flatnonzero(events)
    for start in range(0, len(idx), block):
        i = idx[start : start + block]
        ti = times[i][:, None]
        comparable = (ti < times[None, :]) | (~events[None, :] & (times[None, :] >= ti))
        comparable[np.arange(len(i)), i] = False
        si = scores[i][:, None]
        conc = comparable & (si > scores[None, :])
        ties = comparable & (si == scores[None, :])
        num += int(conc.sum()) + 0.5 * int(ties.sum())
        den += int(comparable.sum())
    return num, den


def c_index(predictions, records, score_rule="year6") -> float:
    """Harrell's C: earlier event should carry the higher risk score."""
    scores = risk_scores(predictions, score_rule)
    events, times = _arrays(records)
    num, den = concordance(scores, events, times)
    if den == 0:
        return UNDEFINED
    return float(num / den)


# ---------------------------------------------------------------- bootstrap


@dataclass
class BootstrapResult:
    stats: np.ndarray
    skipped: int


def bootstrap_distribution(metric_fn, data, n_boot: int = 1000, seed: int = 0, groups=None) -> BootstrapResult:
    """Resample rows of the aligned arrays in ``data`` (a tuple) with replacement.

    With ``groups`` (e.g. patient ids) whole groups are resampled. Resample b
    uses ``default_rng([seed, b])`` so resamples are independent of each other.
    """
    arrays = tuple(np.asarray(a) if not isinstance(a, list) else a for a in data)
    n = len(arrays[0])
    if n == 0:
        raise ValueError("bootstrap needs non-empty data")
    if any(len(a) != n for a in arrays):
        raise ValueError("bootstrap arrays are not aligned")
    if groups is not None:
        uniq, inverse = np.unique(np.asarray(groups), return_inverse=True)
        members = [np.flatnonzero(inverse == g) for g in range(len(uniq))]
    stats = []
    skipped = 0
    for b in range(n_boot):
        rng = np.random.default_rng([int(seed), b])
        if groups is None:
            idx = rng.integers(0, n, n)
        else:
            pick = rng.integers(0, len(members), len(members))
            idx = np.concatenate([members[g] for g in pick])
        sub = tuple([a[i] for i in idx] if isinstance(a, list) else a[idx] for a in arrays)
        v = metric_fn(*sub)
        if v is None or not np.isfinite(v):
            skipped += 1
            continue
        stats.append(float(v))
    if skipped > n_boot / 2:
        raise ValueError(f"{skipped} of {n_boot} bootstrap resamples gave an undefined metric")
    return BootstrapResult(np.asarray(stats), skipped)


def bootstrap_ci(metric_fn, data, n_boot: int = 1000, alpha: float = 0.05, seed: int = 0, groups=None):
    """Percentile interval (lo, hi) at level 1 - alpha."""
    res = bootstrap_distribution(metric_fn, data, n_boot, seed, groups)
    lo, hi = np.percentile(res.stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


# ---------------------------------------------------------------- report


@dataclass
class MetricRow:
    metric: str
    year: str
    point: float
    lo: float
    hi: float
    n: int

    def tsv(self) -> str:
        def f(x):
            return "nan" if not np.isfinite(x) else f"{x:.6f}"

        return f"{self.metric}\t{self.year}\t{f(self.point)}\t{f(self.lo)}\t{f(self.hi)}\t{self.n}"


TSV_HEADER = "metric\tyear\tpoint\tlo\thi\tn"


def aggregate_by_patient(cum_probs, records, patient_ids):
    """Max risk over each patient's series; keeps the first record per patient."""
    cum_probs = np.asarray(cum_probs, dtype=float)
    out_p, out_r = [], []
    seen = {}
    for k, pid in enumerate(patient_ids):
        if pid in seen:
            j = seen[pid]
            out_p[j] = np.maximum(out_p[j], cum_probs[k])
        else:
            seen[pid] = len(out_p)
            out_p.append(cum_probs[k].copy())
            out_r.append(records[k])
    return np.asarray(out_p), out_r


def evaluate_predictions(cum_probs, records, n_boot: int = 1000, alpha: float = 0.05, seed: int = 0,
                         score_rule="year6", groups=None) -> list[MetricRow]:
    """ROC-AUC and PR-AUC for years 1..6 plus the overall C-index, each with a bootstrap CI."""
    cum_probs = np.asarray(cum_probs, dtype=float)
    records = list(records)
    rows = []

    def ci(fn):
        try:
            return bootstrap_ci(fn, (cum_probs, records), n_boot, alpha, seed, groups)
        except ValueError:
            return UNDEFINED, UNDEFINED

    for year in range(1, HORIZON + 1):
        cohort = year_cohort(cum_probs, records, year)
        for name, fn in (("roc_auc", roc_auc), ("pr_auc", pr_auc)):
            point = fn(cohort)
            lo, hi = ci(lambda p, r, fn=fn, year=year: fn(year_cohort(p, r, year)))
            rows.append(MetricRow(name, str(year), point, lo, hi, len(cohort.labels)))
    point = c_index(cum_probs, records, score_rule)
    lo, hi = ci(lambda p, r: c_index(p, r, score_rule))
    rows.append(MetricRow("c_index", "all", point, lo, hi, len(records)))
    return rows
