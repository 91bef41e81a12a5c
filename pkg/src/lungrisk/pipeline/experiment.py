"""End-to-end phantom experiment over the supervision regimes."""

from __future__ import annotations

import logging
from pathlib import Path


from ..metrics import c_index, roc_auc, year_cohort
from .config import REGIMES, ExperimentConfig, dump_config
from .data import load_dataset, synth_data
from .evaluate import REPORT_COLUMNS, attention_focus, metric_rows, oracle_predictions, report_line, \
    save_plots, sign_test, write_json, write_metrics
from .train import finetune, model_from_checkpoint, predict_dataset, pretrain

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def make_datasets(cfg: ExperimentConfig, out: Path) -> dict:
    """Train, test and annotated AIAG-evaluation splits from disjoint phantom index ranges."""
    d = cfg.data
    spec = d.phantom
    dirs = {"train": out / "data" / "train", "test": out / "data" / "test"}
    synth_data(dirs["train"], spec, d.n_train, start=0)
    synth_data(dirs["test"], spec, d.n_test, start=d.n_train)
    if d.n_aiag_eval:
        from dataclasses import replace

        dirs["aiag_eval"] = out / "data" / "aiag_eval"
        synth_data(dirs["aiag_eval"], replace(spec, nodule_probability=1.0), d.n_aiag_eval,
                   start=d.n_train + d.n_test)
    return dirs


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:  # attach provenance, keep the original type reachable
        raise StageError(name, e) from e


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """synth-data -> pretrain -> finetune per regime -> evaluate; writes report.tsv and report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    dirs = _stage("synth-data", make_datasets, cfg, out)

    prep, ps = cfg.preprocess, cfg.model.patch_size
    train = _stage("load", load_dataset, dirs["train"], prep, ps, cfg.loss.censor_mode)
    test = _stage("load", load_dataset, dirs["test"], prep, ps, cfg.loss.censor_mode)
    aiag_eval = _stage("load", load_dataset, dirs["aiag_eval"], prep, ps) if "aiag_eval" in dirs else None

    pre_ck = _stage("pretrain", pretrain, dirs["train"], cfg, out / "pretrain", dataset=train)

    report = {"regimes": {}, "columns": REPORT_COLUMNS}
    oracle = oracle_predictions(test)
    report["oracle"] = {
        "auc_y1": roc_auc(year_cohort(oracle, test.records, 1)),
        "c_index": c_index(oracle, test.records),
    }
    lines = ["\t".join(REPORT_COLUMNS)]
    focus = {}
    for regime in cfg.regimes:
        rcfg = cfg.with_regime(regime)
        rdir = out / "finetune" / regime
        rdir.mkdir(parents=True, exist_ok=True)
        dump_config(rcfg, rdir / "config.yaml")
        ck = _stage(f"finetune[{regime}]", finetune, dirs["train"], pre_ck, rcfg, rdir / "checkpoints", dataset=train)
        model, _ = model_from_checkpoint(ck, rcfg)
        probs, pooled, _ = predict_dataset(model, test)
        rows = _stage(f"evaluate[{regime}]", metric_rows, probs, test, cfg.eval, cfg.seed)
        write_metrics(rows, rdir / "metrics.tsv")
        if cfg.eval.plots:
            save_plots(probs, test.records, rdir / "plots")
        entry = {"metrics": [vars(r) for r in rows]}
        if aiag_eval is not None:
            _, pooled_a, _ = predict_dataset(model, aiag_eval)
            focus[regime] = attention_focus(pooled_a, aiag_eval)
            entry["attention_on_nodules"] = float(focus[regime].mean())
        report["regimes"][regime] = entry
        use_kl, use_region = REGIMES[regime]
        lines.append(report_line(regime, use_kl, use_region, rows))
    if "expert" in focus and "none" in focus:
        report["aiag_effect"] = sign_test(focus["expert"], focus["none"])
    (out / "report.tsv").write_text("\n".join(lines) + "\n")
    write_json(out / "report.json", report)
    return report
