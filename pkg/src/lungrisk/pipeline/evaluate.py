"""Held-out evaluation, attention-focus statistics and the regime report."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .. import HORIZON
from ..metrics import TSV_HEADER, MetricRow, aggregate_by_patient, evaluate_predictions, pr_curve, \
    roc_auc, roc_curve, year_cohort
from ..phantom import true_cumulative_risk
from .data import Dataset

log = logging.getLogger(__name__)


def metric_rows(cum_probs, ds: Dataset, eval_cfg, seed: int = 0) -> list[MetricRow]:
    records = ds.records
    groups = None
    if eval_cfg.patient_level:
        cum_probs, records = aggregate_by_patient(cum_probs, records, ds.patient_ids)
    elif len(set(ds.patient_ids)) < len(ds.patient_ids):
        groups = ds.patient_ids
    return evaluate_predictions(cum_probs, records, eval_cfg.n_boot, eval_cfg.alpha, seed,
                                eval_cfg.score_rule, groups)


def write_metrics(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join([TSV_HEADER] + [r.tsv() for r in rows]) + "\n")


def read_metrics(path) -> list[MetricRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TSV_HEADER:
        raise ValueError(f"{path}: not a metrics file")
    rows = []
    for line in lines[1:]:
        m, y, p, lo, hi, n = line.split("\t")
        rows.append(MetricRow(m, y, float(p), float(lo), float(hi), int(n)))
    return rows


def oracle_predictions(ds: Dataset) -> np.ndarray:
    """Bayes-optimal cumulative risks from the planted per-sample hazard."""
    if np.isnan(ds.hazards).any():
        raise ValueError("dataset carries no planted hazards")
    return np.stack([true_cumulative_risk(h) for h in ds.hazards])


def attention_focus(pooled: np.ndarray, ds: Dataset) -> np.ndarray:
    """Attention mass on annotated nodule patches, one value per annotated sample."""
    has = ds.has_mask.numpy()
    masks = ds.nodule_masks.numpy()
    return (pooled * masks).sum(axis=1)[has]


def sign_test(a: np.ndarray, b: np.ndarray) -> dict:
    """One-sided sign test that a > b in paired samples (ties dropped)."""
    d = np.asarray(a) - np.asarray(b)
    wins, losses = int((d > 0).sum()), int((d < 0).sum())
    p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return {"n": int(len(d)), "wins": wins, "losses": losses, "p_value": float(p),
            "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b))}


def save_plots(cum_probs, records, out_dir):
    """ROC and PR curves per year as SVG (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig_roc, ax_roc = plt.subplots(figsize=(5, 5))
    fig_pr, ax_pr = plt.subplots(figsize=(5, 5))
    for year in range(1, HORIZON + 1):
        c = year_cohort(cum_probs, records, year)
        if not c.defined:
            continue
        fpr, tpr = roc_curve(c)
        ax_roc.step(fpr, tpr, where="post", label=f"Y{year} AUC {roc_auc(c):.3f}")
        rec, prec = pr_curve(c)
        ax_pr.step(rec, prec, where="post", label=f"Y{year}")
    ax_roc.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax_roc.set(xlabel="false positive rate", ylabel="true positive rate")
    ax_pr.set(xlabel="recall", ylabel="precision")
    for ax in (ax_roc, ax_pr):
        ax.legend(fontsize=7)
    fig_roc.savefig(out / "roc.svg")
    fig_pr.savefig(out / "pr.svg")
    plt.close(fig_roc)
    plt.close(fig_pr)


REPORT_COLUMNS = ["regime", "expert_anno", "lung_seg"] + [f"auc_y{y}" for y in range(1, HORIZON + 1)] + ["c_index"]


def _cell(row: MetricRow) -> str:
    if not np.isfinite(row.point):
        return "nan"
    return f"{row.point:.3f} [{row.lo:.3f}, {row.hi:.3f}]"


def report_line(regime: str, expert: bool, lung_seg: bool, rows: list[MetricRow]) -> str:
    by_key = {(r.metric, r.year): r for r in rows}
    cells = [regime, "yes" if expert else "no", "yes" if lung_seg else "no"]
    cells += [_cell(by_key[("roc_auc", str(y))]) for y in range(1, HORIZON + 1)]
    cells.append(_cell(by_key[("c_index", "all")]))
    return "\t".join(cells)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
