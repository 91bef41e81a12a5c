"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The learnability and attention-focus criteria share one full-scale experiment
(about 40 minutes on one CPU core). Set LUNGRISK_ACCEPTANCE_RUN to a directory
to keep its outputs; a completed run there with the same config is reused.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from gradcheck_util import max_rel_error, sample_indices
from lungrisk.encoder import EncoderConfig
from lungrisk.losses import aiag_kl, aiag_region_ce, build_labels, risk_loss
from lungrisk.metrics import EvalCohort, c_index, pr_auc, roc_auc
from lungrisk.mim import DecoderConfig, MaskedAutoencoder, mae_loss, random_mask
from lungrisk.pipeline import config_from_dict, finetune, pretrain
from lungrisk.pipeline.config import ExperimentConfig, dump_config
from lungrisk.pipeline.data import load_dataset, synth_data
from lungrisk.pipeline.experiment import run_experiment
from lungrisk.riskhead import CumulativeHazard, RiskModel, cumulative_from_raw, risk_forward
from lungrisk.tokenizer import apply_rope_3d, make_rope_tables, patch_coords
from lungrisk.types import RiskRecord


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------- shared runs

TINY = {
    "seed": 11,
    "data": {"phantom": {"grid_shape": [32, 32, 32], "nodule_radius_range": [3.0, 6.0],
                         "nodule_probability": 0.5, "seed": 11},
             "n_train": 12, "n_test": 10, "n_aiag_eval": 6},
    "preprocess": {"grid_shape": [32, 32, 32]},
    "model": {"encoder": {"embed_dim": 24, "depth": 1, "num_heads": 2},
              "decoder": {"embed_dim": 12, "depth": 1, "num_heads": 2}},
    "pretrain": {"epochs": 2, "batch_size": 4},
    "finetune": {"epochs": 3, "frozen_epochs": 1, "batch_size": 4, "peak_lr": 1e-3},
    "eval": {"n_boot": 30},
}


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    cfg = ExperimentConfig()
    env = os.environ.get("LUNGRISK_ACCEPTANCE_RUN")
    out = Path(env) if env else tmp_path_factory.mktemp("full_run")
    probe = tmp_path_factory.mktemp("cfg") / "config.yaml"
    dump_config(cfg, probe)
    t0 = time.perf_counter()
    if (out / "report.json").exists() and (out / "config.yaml").read_text() == probe.read_text():
        elapsed = None
    else:
        run_experiment(cfg, out)
        elapsed = time.perf_counter() - t0
    return out, json.loads((out / "report.json").read_text()), elapsed


def _metric(entry, metric, year):
    for r in entry["metrics"]:
        if r["metric"] == metric and str(r["year"]) == str(year):
            return r["point"]
    raise KeyError((metric, year))


# ---------------------------------------------------------------- criteria


def test_isotonicity(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = math.inf
    for increment in ("relu", "softplus"):
        head = CumulativeHazard(32, increment=increment).double()
        with torch.no_grad():
            for p in head.parameters():
                p.normal_(0, 1.0)
            feats = torch.tensor(rng.normal(0, 3, (5000, 32)))
            worst = min(worst, float(head(feats).cum_probs.diff(dim=-1).min()))
    raw = torch.tensor(rng.normal(0, 5, (10_000, 6)))
    base = torch.tensor(rng.normal(0, 5, (10_000,)))
    worst = min(worst, float(cumulative_from_raw(base, raw).cum_probs.diff(dim=-1).min()))

    root = tmp_path
    cfg = config_from_dict(json.loads(json.dumps(TINY)))
    synth_data(root / "data", cfg.data.phantom, cfg.data.n_train)
    ds = load_dataset(root / "data", cfg.preprocess, cfg.model.patch_size)
    ck = finetune(None, pretrain(None, cfg, root / "pre", dataset=ds), cfg, root / "ft", dataset=ds)
    probes = [h["probe_min_step"] for h in ck.history]
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-7 and min(probes) >= -1e-7
    record("isotonicity", ok, f"min step over 20,000 head inputs {worst:.3g}, "
           f"min over {len(probes)} epoch probes {min(probes):.3g} ({elapsed:.1f}s)")


def test_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errs = {}
    y = torch.tensor([0, 0, 1, 1, 1, 1.0], dtype=torch.float64)
    p = torch.tensor(np.sort(rng.uniform(0.05, 0.95, 6)))
    errs["risk_loss"] = max_rel_error(lambda q: risk_loss(q, y), p, range(6))
    mask = np.zeros(32, bool)
    mask[rng.choice(32, 5, replace=False)] = True
    labels = np.repeat(np.arange(0, 6), [2, 6, 6, 6, 6, 6])
    logits = torch.tensor(rng.normal(size=32))
    errs["aiag_kl"] = max_rel_error(lambda z: aiag_kl(z.softmax(-1), mask), logits, range(32))
    errs["aiag_region_ce"] = max_rel_error(lambda z: aiag_region_ce(z.softmax(-1), labels, lobe_label=2),
                                           logits, range(32))
    torch.manual_seed(2)
    mae = MaskedAutoencoder((2, 2, 2), (4, 4, 4), EncoderConfig(24, 1, 2), DecoderConfig(12, 1, 2)).double().eval()
    plans = [random_mask(8, 0.5, rng)]
    patches = torch.tensor(rng.uniform(-1, 1, (1, 8, 64)))
    recon = torch.tensor(rng.normal(size=(1, 8, 64)))
    errs["mae_loss"] = max_rel_error(lambda r: mae_loss(r, patches, plans), recon, sample_indices(recon, 40))
    errs["mae_loss(model)"] = max_rel_error(lambda x: mae_loss(mae(x, plans), x, plans), patches,
                                            sample_indices(patches, 20))
    model = RiskModel((2, 2, 2), (4, 4, 4), EncoderConfig(24, 2, 2)).double().eval()
    with torch.no_grad():
        for lin in (model.head.trunk[0], model.head.base, model.head.hazard):
            lin.weight.normal_(0, 0.5)
        model.head.hazard.bias.fill_(0.3)
    v = torch.tensor(rng.uniform(-1, 1, (8, 8, 8)))
    for year in (0, 5):
        errs[f"risk_forward[y{year + 1}]"] = max_rel_error(lambda x: risk_forward(x, model)[0].cum_probs[year], v,
                                                            sample_indices(v, 15, seed=year))
    scalar = ("risk_loss", "aiag_kl", "aiag_region_ce")
    ok = all(errs[k] < 1e-4 for k in scalar) and all(e < 1e-3 for k, e in errs.items() if k not in scalar)
    record("gradient suite", ok, ", ".join(f"{k} {e:.1e}" for k, e in errs.items())
           + f" ({time.perf_counter() - t0:.1f}s)")


def test_label_table():
    times = np.arange(0.25, 7.0, 0.5)
    bad = []
    for t in times:
        for event in (True, False):
            lab = build_labels(RiskRecord(event, float(t)))
            want = [int(event and t <= n) for n in range(1, 7)]
            if lab.y.tolist() != want:
                bad.append((t, event))
    record("label table", not bad, f"{2 * len(times)} cases, mismatches {bad}")


def _brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    d = pos[:, None] - neg[None, :]
    return ((d > 0).sum() + 0.5 * (d == 0).sum()) / (len(pos) * len(neg))


def _brute_ap(s, y):
    n_pos, prev, ap = y.sum(), 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        sel = s >= t
        tp = y[sel].sum()
        ap += (tp / n_pos - prev) * tp / sel.sum()
        prev = tp / n_pos
    return ap


def _brute_c(s, e, t):
    num = den = 0.0
    for i in range(len(s)):
        if not e[i]:
            continue
        for j in range(len(s)):
            if i != j and (t[i] < t[j] or (not e[j] and t[j] >= t[i])):
                den += 1
                num += 1.0 if s[i] > s[j] else 0.5 if s[i] == s[j] else 0.0
    return num / den


def test_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_roc = worst_pr = worst_c = 0.0
    for _ in range(200):
        n = int(rng.integers(5, 201))
        s = np.round(rng.random(n), int(rng.integers(1, 3)))
        y = (rng.random(n) < rng.uniform(0.1, 0.6)).astype(int)
        y[:2] = (1, 0)
        c = EvalCohort(1, s, y)
        worst_roc = max(worst_roc, abs(roc_auc(c) - _brute_auc(s, y)))
        worst_pr = max(worst_pr, abs(pr_auc(c) - _brute_ap(s, y)))
    for _ in range(100):
        n = int(rng.integers(5, 201))
        e = rng.random(n) < 0.6
        e[0] = True
        t = np.round(rng.uniform(0.1, 6.0, n), 1)
        s = np.round(rng.random(n), 2)
        worst_c = max(worst_c, abs(c_index(s, [RiskRecord(a, b) for a, b in zip(e, t)]) - _brute_c(s, e, t)))
    ok = max(worst_roc, worst_pr, worst_c) < 1e-12
    record("metric oracles", ok, f"max |diff| roc {worst_roc:.1e}, pr {worst_pr:.1e}, c-index {worst_c:.1e} "
           f"({time.perf_counter() - t0:.1f}s)")


def test_aiag_closed_forms():
    errs = []
    for n, m in [(64, 4), (512, 32), (100, 1), (30, 30)]:
        mask = np.zeros(n, bool)
        mask[np.random.default_rng(n).choice(n, m, replace=False)] = True
        errs.append(abs(float(aiag_kl(torch.full((n,), 1 / n, dtype=torch.float64), mask)) - math.log(n / m)))
    for per in (1, 4, 13):
        labels = np.repeat(np.arange(1, 6), per)
        u = torch.full((5 * per,), 1 / (5 * per), dtype=torch.float64)
        for lobe in range(1, 6):
            errs.append(abs(float(aiag_region_ce(u, labels, lobe_label=lobe)) + math.log(0.2)))
    record("AIAG closed forms", max(errs) < 1e-6, f"max deviation {max(errs):.1e} over {len(errs)} cases")


def test_mae_invariants():
    rng = np.random.default_rng(3)
    torch.manual_seed(3)
    mae = MaskedAutoencoder((4, 4, 4), (4, 4, 4), EncoderConfig(24, 2, 2), DecoderConfig(12, 1, 2)).eval()
    enc_same = loss_same = True
    for _ in range(20):
        plans = [random_mask(64, 0.75, rng) for _ in range(2)]
        x = torch.tensor(rng.uniform(-1, 1, (2, 64, 64)), dtype=torch.float32)
        x2 = x.clone()
        for b, pl in enumerate(plans):
            x2[b, pl.masked_indices] = torch.tensor(rng.normal(0, 5, (len(pl.masked_indices), 64)),
                                                    dtype=torch.float32)
        vis, _ = mae.plan_tensors(plans)
        with torch.no_grad():
            enc_same &= torch.equal(mae.forward_encoder(x, vis), mae.forward_encoder(x2, vis))
            recon = mae(x, plans)
        r2 = recon.clone()
        for b, pl in enumerate(plans):
            r2[b, pl.visible_indices] = torch.tensor(rng.normal(0, 5, (len(pl.visible_indices), 64)),
                                                     dtype=torch.float32)
        loss_same &= torch.equal(mae_loss(recon, x, plans), mae_loss(r2, x, plans))
    partition = 0
    for _ in range(10_000):
        pl = random_mask(512, 0.75, rng)
        both = np.concatenate([pl.masked_indices, pl.visible_indices])
        partition += len(pl.masked_indices) == 384 and np.array_equal(np.sort(both), np.arange(512))
    ok = enc_same and loss_same and partition == 10_000
    record("MAE invariants", ok, f"encoder invariant {enc_same}, loss invariant {loss_same}, "
           f"partitions {partition}/10000")


def test_rope_relative_position():
    rng = np.random.default_rng(4)
    tables = make_rope_tables(24)
    grid = torch.tensor(patch_coords((8, 8, 8)))
    worst = 0.0
    for _ in range(100):
        q = torch.tensor(rng.normal(size=(1, 24)), dtype=torch.float32)
        k = torch.tensor(rng.normal(size=(1, 24)), dtype=torch.float32)
        i, j = rng.integers(0, len(grid), 2)
        shift = torch.tensor(rng.integers(-8, 9, (1, 3)))
        a = (apply_rope_3d(q, grid[i:i + 1], tables) * apply_rope_3d(k, grid[j:j + 1], tables)).sum()
        b = (apply_rope_3d(q, grid[i:i + 1] + shift, tables) * apply_rope_3d(k, grid[j:j + 1] + shift, tables)).sum()
        worst = max(worst, abs(float(a - b)))
    record("RoPE relative position", worst < 1e-5, f"max abs deviation {worst:.2e} over 100 float32 draws")


@pytest.mark.slow
def test_end_to_end_learnability(full_run):
    out, rep, elapsed = full_run
    oracle = rep["oracle"]
    parts = [f"oracle auc_y1 {oracle['auc_y1']:.3f} c {oracle['c_index']:.3f}"]
    ok = True
    for regime, entry in rep["regimes"].items():
        auc, c = _metric(entry, "roc_auc", 1), _metric(entry, "c_index", "all")
        parts.append(f"{regime}: auc_y1 {auc:.3f} c {c:.3f}")
        ok &= auc >= 0.85 and c >= 0.75
    if elapsed is not None:
        parts.append(f"{elapsed / 60:.1f} min")
        ok &= elapsed < 4 * 3600
    record("end-to-end learnability", ok, "; ".join(parts))


@pytest.mark.slow
def test_aiag_effect(full_run):
    _, rep, _ = full_run
    eff = rep["aiag_effect"]
    ok = eff["n"] >= 100 and eff["mean_a"] > eff["mean_b"] and eff["p_value"] < 0.05
    record("AIAG attention effect", ok, f"n {eff['n']}, mean mass expert {eff['mean_a']:.3f} vs none "
           f"{eff['mean_b']:.3f}, wins {eff['wins']}/{eff['wins'] + eff['losses']}, p {eff['p_value']:.2e}")


def test_determinism_and_checkpointing(tmp_path):
    cfg = config_from_dict(json.loads(json.dumps(TINY)))
    reports = []
    for name in ("a", "b"):
        run_experiment(cfg, tmp_path / name)
        reports.append((tmp_path / name / "report.json").read_bytes())
    traces_equal = all(
        (tmp_path / "a" / sub / "LATEST").read_text() == (tmp_path / "b" / sub / "LATEST").read_text()
        and json.loads((tmp_path / "a" / sub / "epoch_002" / "manifest.json").read_text())["history"]
        == json.loads((tmp_path / "b" / sub / "epoch_002" / "manifest.json").read_text())["history"]
        for sub in ("pretrain", "finetune/expert/checkpoints", "finetune/none/checkpoints"))
    params_equal = ((tmp_path / "a/finetune/expert/checkpoints/epoch_003/params.bin").read_bytes()
                    == (tmp_path / "b/finetune/expert/checkpoints/epoch_003/params.bin").read_bytes())
    ds = load_dataset(tmp_path / "a" / "data" / "train", cfg.preprocess, cfg.model.patch_size)
    rcfg = cfg.with_regime("expert")
    pre = tmp_path / "a" / "pretrain"
    finetune(None, pre, rcfg, tmp_path / "resumed", dataset=ds, max_epochs=1)
    resumed = finetune(None, pre, rcfg, tmp_path / "resumed", dataset=ds)
    resume_equal = ((tmp_path / "resumed" / "epoch_003" / "params.bin").read_bytes()
                    == (tmp_path / "a/finetune/expert/checkpoints/epoch_003/params.bin").read_bytes()
                    and [h["step_losses"] for h in resumed.history]
                    == [h["step_losses"] for h in json.loads(
                        (tmp_path / "a/finetune/expert/checkpoints/epoch_003/manifest.json").read_text())["history"]])
    ok = reports[0] == reports[1] and traces_equal and params_equal and resume_equal
    record("determinism and checkpointing", ok, f"report identical {reports[0] == reports[1]}, "
           f"loss traces identical {traces_equal}, weights identical {params_equal}, resume matches {resume_equal}")
