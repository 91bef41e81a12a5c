"""Property tests for invariants that must hold for all valid inputs."""

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lungrisk.losses import aiag_kl, build_labels
from lungrisk.metrics import EvalCohort, c_index, pr_auc, roc_auc
from lungrisk.mim import random_mask
from lungrisk.riskhead import cumulative_from_raw
from lungrisk.tokenizer import patchify, unpatchify
from lungrisk.types import RiskRecord

finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (6,), elements=finite), finite, st.sampled_from(["relu", "softplus"]))
def test_cum_probs_isotone_and_bounded(raw, base, inc):
    p = cumulative_from_raw(torch.tensor(base), torch.tensor(raw), inc).cum_probs
    assert torch.all(p.diff() >= -1e-7) and torch.all((p >= 0) & (p <= 1))


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(1, 3)] * 3), st.tuples(*[st.integers(1, 4)] * 3), st.integers(0, 2**31))
def test_patchify_round_trip(grid, ps, seed):
    shape = tuple(g * p for g, p in zip(grid, ps))
    v = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    assert np.array_equal(unpatchify(patchify(v, ps)), v)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_mask_partition(n, ratio, seed):
    m = int(np.floor(ratio * n + 0.5))
    if m in (0, n):
        return
    pl = random_mask(n, ratio, np.random.default_rng(seed))
    assert len(pl.masked_indices) == m
    assert np.array_equal(np.sort(np.concatenate([pl.masked_indices, pl.visible_indices])), np.arange(n))


@settings(max_examples=200, deadline=None)
@given(st.booleans(), st.floats(0.01, 10.0))
def test_labels_monotone(event, t):
    y = build_labels(RiskRecord(event, t)).y
    assert np.all(np.diff(y) >= 0)
    if not event:
        assert y.sum() == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 60))
def test_auc_rank_invariance_and_flip(seed, n):
    rng = np.random.default_rng(seed)
    s = np.round(rng.random(n), 1)
    y = (rng.random(n) < 0.5).astype(int)
    y[:2] = (1, 0)
    c = EvalCohort(1, s, y)
    assert roc_auc(c) == roc_auc(EvalCohort(1, 3 * s**3 + 1, y))
    assert pr_auc(c) == pr_auc(EvalCohort(1, np.exp(s), y))
    assert abs(roc_auc(c) + roc_auc(EvalCohort(1, -s, y)) - 1) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 50))
def test_cindex_bounds_and_flip(seed, n):
    rng = np.random.default_rng(seed)
    recs = [RiskRecord(bool(e), float(t)) for e, t in zip(rng.random(n) < 0.7, rng.uniform(0.1, 6, n))]
    recs[0] = RiskRecord(True, 0.05)
    s = rng.random(n)
    c = c_index(s, recs)
    assert 0 <= c <= 1 and abs(c + c_index(-s, recs) - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 64))
def test_kl_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(n))
    mask = rng.random(n) < 0.3
    mask[0] = True
    assert float(aiag_kl(torch.tensor(w), mask)) >= -1e-12
