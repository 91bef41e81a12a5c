"""Survival labels, risk loss, and the attention-guidance (AIAG) terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import HORIZON
from .types import LEFT_LOBES, RIGHT_LOBES, RegionAnnotation, RiskRecord

PROB_EPS = 1e-7
ATTN_EPS = 1e-8


@dataclass
class RiskLabels:
    y: np.ndarray  # [horizon] of {0, 1}
    censored: bool
    source_record: RiskRecord
    valid: np.ndarray  # [horizon] bool; all True unless follow-up masking is on


@dataclass
class LossWeights:
    lambda_kl: float = 1.0
    lambda_region: float = 1.0

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_region"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"LossWeights.{name} must be finite and nonnegative, got {v}")
            setattr(self, name, v)


def build_labels(r: RiskRecord, horizon: int = HORIZON, censor_mode: str = "zero") -> RiskLabels:
    """Year-n label is 1 iff the event happened at or before year n.

    Censored records get all zeros. With ``censor_mode="followup"`` years beyond
    the censoring time are additionally marked invalid (excluded from the loss).
    """
    if not r.time_years > 0:
        raise ValueError(f"time_years must be positive, got {r.time_years}")
    years = np.arange(1, horizon + 1)
    if r.event:
        y = (r.time_years <= years).astype(np.int64)
        valid = np.ones(horizon, dtype=bool)
    else:
        y = np.zeros(horizon, dtype=np.int64)
        if censor_mode == "zero":
            valid = np.ones(horizon, dtype=bool)
        elif censor_mode == "followup":
            valid = years <= r.time_years
        else:
            raise ValueError(f"unknown censor_mode {censor_mode!r}")
    return RiskLabels(y, not r.event, r, valid)


def risk_loss(cum_probs: torch.Tensor, y, valid=None) -> torch.Tensor:
    """Mean binary cross-entropy over the yearly risks (and over the batch)."""
    y = torch.as_tensor(y, dtype=cum_probs.dtype, device=cum_probs.device)
    p = cum_probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    ce = -(y * p.log() + (1.0 - y) * (1.0 - p).log())
    if valid is None:
        return ce.mean()
    w = torch.as_tensor(valid, dtype=cum_probs.dtype, device=cum_probs.device)
    per_sample = (ce * w).sum(-1) / w.sum(-1).clamp_min(1.0)
    return per_sample.mean()


def _renorm(p: torch.Tensor) -> torch.Tensor:
    p = p.clamp_min(ATTN_EPS)
    return p / p.sum(-1, keepdim=True)


def aiag_kl(pooled_weights: torch.Tensor, nodule_mask) -> torch.Tensor:
    """KL(target || attention), target uniform over annotated nodule patches.

    Works on [N] or batched [..., N]; returns a value per leading index.
    """
    if nodule_mask is None:
        raise ValueError("aiag_kl needs a nodule patch mask")
    m = torch.as_tensor(nodule_mask, device=pooled_weights.device).to(pooled_weights.dtype)
    total = m.sum(-1, keepdim=True)
    if (total == 0).any():
        raise ValueError("nodule patch mask has no positive patch")
    q = m / total
    p = _renorm(pooled_weights)
    # 0 * log 0 = 0 on patches outside the mask
    safe_q = torch.where(q > 0, q, torch.ones_like(q))
    return (q * (safe_q.log() - p.log())).sum(-1)


def region_masses(pooled_weights: torch.Tensor, patch_labels, regions) -> torch.Tensor:
    """Attention mass per region after dropping non-lung (label 0) patches and renormalising.

    ``regions`` is a list of label tuples; returns [..., len(regions)].
    """
    labels = torch.as_tensor(patch_labels, device=pooled_weights.device)
    inside = (labels > 0).to(pooled_weights.dtype)
    denom = (pooled_weights * inside).sum(-1, keepdim=True)
    masses = []
    for labs in regions:
        sel = torch.zeros_like(labels, dtype=torch.bool)
        for lab in labs:
            sel |= labels == lab
        masses.append((pooled_weights * sel.to(pooled_weights.dtype)).sum(-1))
    return torch.stack(masses, dim=-1) / denom


LOBE_REGIONS = [(1,), (2,), (3,), (4,), (5,)]
SIDE_REGIONS = {"right": RIGHT_LOBES, "left": LEFT_LOBES}


def aiag_region_ce(pooled_weights: torch.Tensor, patch_labels, lobe_label=None, side_label=None) -> torch.Tensor:
    """-log of the (renormalised) attention mass on the annotated lobe, or side as fallback."""
    labels = torch.as_tensor(patch_labels, device=pooled_weights.device)
    if lobe_label is not None:
        lobe_label = int(lobe_label)
        if not (labels == lobe_label).any():
            raise ValueError(f"annotated lobe {lobe_label} has no patch in the lobe mask")
        a = region_masses(pooled_weights, labels, [(lobe_label,)])[..., 0]
    elif side_label is not None:
        labs = SIDE_REGIONS[side_label]
        if not sum((labels == lab).sum() for lab in labs):
            raise ValueError(f"annotated side {side_label!r} has no patch in the lobe mask")
        a = region_masses(pooled_weights, labels, [labs])[..., 0]
    else:
        raise ValueError("aiag_region_ce needs a lobe or side label")
    return -a.clamp_min(ATTN_EPS).log()


def aiag_terms(attn_weights: torch.Tensor, annotation: RegionAnnotation, patch_labels, per_head: bool = False):
    """Both AIAG terms for one sample; each is None when its supervision is absent."""
    w = attn_weights if per_head else (attn_weights.mean(-2) if attn_weights.dim() > 1 else attn_weights)
    kl = region = None
    if annotation.nodule_patch_mask is not None:
        kl = aiag_kl(w, annotation.nodule_patch_mask).mean()
    if annotation.lobe_label is not None or annotation.side_label is not None:
        region = aiag_region_ce(w, patch_labels, annotation.lobe_label, annotation.side_label).mean()
    return kl, region


def _present_mean(values, present):
    if values is None:
        return None
    if present is None:
        return values.mean() if values.dim() else values
    present = torch.as_tensor(present, dtype=torch.bool, device=values.device)
    if not present.any():
        return None
    return values[present].mean()


def combine_losses(risk: torch.Tensor, kl=None, region=None, w: LossWeights = LossWeights(),
                   kl_present=None, region_present=None) -> torch.Tensor:
    """risk + lambda_kl * kl + lambda_region * region; absent terms contribute nothing.

    ``kl``/``region`` may be scalars or per-sample vectors with presence masks
    (averaged over the samples that carry the term).
    """
    total = risk
    kl = _present_mean(kl, kl_present)
    region = _present_mean(region, region_present)
    if kl is not None and w.lambda_kl:
        total = total + w.lambda_kl * kl
    if region is not None and w.lambda_region:
        total = total + w.lambda_region * region
    return total


def region_target(annotation: RegionAnnotation) -> int:
    """Index into the 7 regions (5 lobes, then right/left side); -1 when unannotated."""
    if annotation.lobe_label is not None:
        return annotation.lobe_label - 1
    if annotation.side_label is not None:
        return 5 if annotation.side_label == "right" else 6
    return -1


def aiag_batch(pooled_weights: torch.Tensor, nodule_masks: torch.Tensor, has_mask: torch.Tensor,
               patch_labels: torch.Tensor, targets: torch.Tensor):
    """Per-sample AIAG terms for a batch.

    pooled_weights [B, N] (or [B, H, N] for per-head use), nodule_masks [B, N] bool,
    has_mask [B] bool, patch_labels [B, N], targets [B] from region_target.
    Returns (kl [B], region [B]) with arbitrary finite values where absent.
    """
    masks = torch.where(has_mask[:, None], nodule_masks, torch.ones_like(nodule_masks))
    if pooled_weights.dim() == 3:
        kl = aiag_kl(pooled_weights, masks[:, None]).mean(-1)
    else:
        kl = aiag_kl(pooled_weights, masks)
    w = pooled_weights
    lab = patch_labels if w.dim() == 2 else patch_labels[:, None]
    masses = region_masses(w, lab, LOBE_REGIONS + [RIGHT_LOBES, LEFT_LOBES])  # [B, (H,) 7]
    idx = targets.clamp_min(0)
    if masses.dim() == 3:
        picked = masses.gather(-1, idx[:, None, None].expand(-1, masses.shape[1], 1))[..., 0]
        region = -picked.clamp_min(ATTN_EPS).log().mean(-1)
    else:
        picked = masses.gather(-1, idx[:, None])[:, 0]
        region = -picked.clamp_min(ATTN_EPS).log()
    return kl, region
