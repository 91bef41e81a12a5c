"""MAE pretraining and risk fine-tuning loops."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch

from ..losses import aiag_batch, combine_losses, risk_loss
from ..mim import MaskedAutoencoder, random_mask
from ..riskhead import RiskModel
from ..tokenizer import patchify_tensor
from .config import ExperimentConfig, TrainConfig
from .data import Dataset, load_dataset
from .formats import Checkpoint, DataError, load_checkpoint, mark_latest, optimizer_state, restore_optimizer, \
    rng_state_b64, save_checkpoint, set_rng_state_b64

log = logging.getLogger(__name__)

ISOTONE_SLACK = 1e-7


class NumericError(RuntimeError):
    pass


def lr_schedule(step: int, total_steps_phase1: int, total_steps_phase2: int, cfg: TrainConfig) -> float:
    """Learning rate at ``step`` (0-based) over two warmup/cosine-anneal cycles.

    Each cycle ramps linearly 0 -> peak over its first ``warmup_fraction`` of
    steps, then anneals with a half cosine to ``floor_lr`` at its last step.
    """
    total = total_steps_phase1 + total_steps_phase2
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside schedule of {total} steps")
    if cfg.schedule == "constant":
        return cfg.peak_lr
    if step < total_steps_phase1:
        local, length = step, total_steps_phase1
    else:
        local, length = step - total_steps_phase1, total_steps_phase2
    warm = cfg.warmup_fraction * length
    if local <= warm and warm > 0:
        return cfg.peak_lr * local / warm
    span = (length - 1) - warm
    if span <= 0:
        return cfg.floor_lr
    progress = min((local - warm) / span, 1.0)
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _param_names(model: torch.nn.Module) -> dict:
    return {p: n for n, p in model.named_parameters()}


def _make_optimizer(model, tc: TrainConfig):
    decay, no_decay = [], []
    for n, p in model.named_parameters():
        (no_decay if p.dim() < 2 or n.endswith("pos_embed") or n.endswith("decoder_pos") else decay).append(p)
    groups = [{"params": decay, "weight_decay": tc.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=tc.peak_lr, betas=tc.betas)


def _state_params(model) -> dict:
    return {k: v for k, v in model.state_dict().items()}


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.random.default_rng([int(seed), 7919, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _resume(run_dir: Path, model, opt, names):
    """Return (start_epoch, history) from the latest checkpoint in run_dir, if any."""
    if not (run_dir / "LATEST").exists():
        return 0, []
    ck = load_checkpoint(run_dir)
    model.load_state_dict(ck.params)
    if ck.optim is not None:
        restore_optimizer(opt, names, ck.optim)
    if "torch_rng" in ck.manifest:
        set_rng_state_b64(ck.manifest["torch_rng"])
    log.info("resuming %s from epoch %d", run_dir, ck.manifest["epoch"])
    return ck.manifest["epoch"], ck.manifest.get("history", [])


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at {where}")


def build_mae(cfg: ExperimentConfig) -> MaskedAutoencoder:
    return MaskedAutoencoder(cfg.grid_dims, cfg.model.patch_size, cfg.model.encoder, cfg.model.decoder)


def build_risk_model(cfg: ExperimentConfig) -> RiskModel:
    return RiskModel(cfg.grid_dims, cfg.model.patch_size, cfg.model.encoder, cfg.model.pool_heads,
                     cfg.model.increment)


def pretrain(dataset_dir, cfg: ExperimentConfig, out_dir, dataset: Dataset | None = None,
             max_epochs: int | None = None) -> Checkpoint:
    """Masked-autoencoder pretraining with AdamW; checkpoints after every epoch.

    Re-running on an ``out_dir`` holding checkpoints resumes from the latest one.
    ``max_epochs`` stops early (after that many total epochs) without changing the schedule.
    """
    tc = cfg.pretrain
    out = Path(out_dir)
    ds = dataset if dataset is not None else load_dataset(dataset_dir, cfg.preprocess, cfg.model.patch_size)
    torch.manual_seed(tc.seed)
    model = build_mae(cfg)
    opt = _make_optimizer(model, tc)
    names = _param_names(model)
    start, history = _resume(out, model, opt, names)

    steps_per_epoch = math.ceil(len(ds) / tc.batch_size)
    n_patches = int(np.prod(cfg.grid_dims))
    ps = cfg.model.patch_size
    ck = None
    stop = tc.epochs if max_epochs is None else min(tc.epochs, max_epochs)
    for epoch in range(start, stop):
        model.train()
        step_losses = []
        for b, idx in enumerate(_batches(len(ds), tc.batch_size, tc.seed, epoch)):
            step = epoch * steps_per_epoch + b
            for g in opt.param_groups:
                g["lr"] = lr_schedule(step, tc.epochs * steps_per_epoch, 0, tc)
            patches = patchify_tensor(ds.volumes[idx], ps)
            plans = [random_mask(n_patches, tc.mask_ratio, np.random.default_rng([int(tc.seed), int(i), epoch]))
                     for i in idx]
            recon = model(patches, plans)
            loss = _mae_batch_loss(recon, patches, plans, tc)
            _check_finite(loss, f"pretrain epoch {epoch} step {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step_losses.append(loss.item())
        history.append({"epoch": epoch + 1, "loss": float(np.mean(step_losses)), "step_losses": step_losses})
        log.info("pretrain epoch %d/%d loss %.5f", epoch + 1, tc.epochs, history[-1]["loss"])
        ck = _save(out, model, opt, names, cfg, "pretrain", epoch + 1, history)
    return ck if ck is not None else load_checkpoint(out)


def _mae_batch_loss(recon, patches, plans, tc):
    from ..mim import mae_loss

    return mae_loss(recon, patches, plans, masked_only=tc.masked_only, norm_pix=tc.norm_pix)


def _save(out: Path, model, opt, names, cfg, phase, epoch, history) -> Checkpoint:
    name = f"epoch_{epoch:03d}"
    manifest = {
        "phase": phase,
        "epoch": epoch,
        "step": sum(len(h.get("step_losses", [])) for h in history),
        "config": cfg.to_dict(),
        "history": history,
        "torch_rng": rng_state_b64(),
    }
    ck = save_checkpoint(out / name, _state_params(model), manifest, optimizer_state(opt, names))
    mark_latest(out, name)
    return ck


def _config_mismatch(saved: dict, current: dict, prefix="model") -> list:
    diffs = []
    if isinstance(saved, dict) and isinstance(current, dict):
        for k in sorted(set(saved) | set(current)):
            diffs += _config_mismatch(saved.get(k), current.get(k), f"{prefix}.{k}")
    elif saved != current:
        diffs.append(f"{prefix}: checkpoint={saved!r} config={current!r}")
    return diffs


def load_pretrained_backbone(model: RiskModel, ck: Checkpoint, cfg: ExperimentConfig):
    saved = ck.config.get("model", {})
    cur = cfg.to_dict()["model"]
    diffs = _config_mismatch({k: saved.get(k) for k in ("patch_size", "encoder")},
                             {k: cur[k] for k in ("patch_size", "encoder")})
    if ck.config.get("preprocess", {}).get("grid_shape") != cfg.to_dict()["preprocess"]["grid_shape"]:
        diffs.append("preprocess.grid_shape differs")
    if diffs:
        raise DataError("pretrained checkpoint does not match config: " + "; ".join(diffs))
    backbone = {k: v for k, v in ck.params.items() if k.startswith(("patch_embed.", "encoder."))}
    missing, unexpected = model.load_state_dict(backbone, strict=False)
    if unexpected or any(k.startswith(("patch_embed.", "encoder.")) for k in missing):
        raise DataError(f"backbone weights incomplete: missing={missing} unexpected={unexpected}")


def probe_isotonicity(model: RiskModel, volumes: torch.Tensor) -> float:
    """Smallest year-over-year step of cum_probs on the probe batch (>= -slack when isotone)."""
    model.eval()
    with torch.no_grad():
        pred, _ = model(volumes)
    return float(pred.cum_probs.diff(dim=-1).min())


def finetune(dataset_dir, pretrained, cfg: ExperimentConfig, out_dir, dataset: Dataset | None = None,
             max_epochs: int | None = None) -> Checkpoint:
    """Risk fine-tuning: backbone frozen for ``frozen_epochs``, then trained end to end.

    ``pretrained`` is a Checkpoint, a checkpoint path, or None (random init).
    The AIAG terms are active according to ``cfg.loss`` weights.
    """
    tc = cfg.finetune
    out = Path(out_dir)
    ds = dataset if dataset is not None else load_dataset(dataset_dir, cfg.preprocess, cfg.model.patch_size,
                                                          cfg.loss.censor_mode)
    torch.manual_seed(tc.seed)
    model = build_risk_model(cfg)
    if pretrained is not None:
        ck = pretrained if isinstance(pretrained, Checkpoint) else load_checkpoint(pretrained)
        load_pretrained_backbone(model, ck, cfg)
    opt = _make_optimizer(model, tc)
    names = _param_names(model)
    start, history = _resume(out, model, opt, names)

    weights = cfg.loss.weights()
    use_aiag = weights.lambda_kl > 0 or weights.lambda_region > 0
    steps_per_epoch = math.ceil(len(ds) / tc.batch_size)
    t1 = tc.frozen_epochs * steps_per_epoch
    t2 = (tc.epochs - tc.frozen_epochs) * steps_per_epoch
    probe = ds.volumes[: min(tc.probe_size, len(ds))]
    censor_valid = cfg.loss.censor_mode == "followup"
    ck = None
    stop = tc.epochs if max_epochs is None else min(tc.epochs, max_epochs)
    for epoch in range(start, stop):
        frozen = epoch < tc.frozen_epochs
        model.set_backbone_frozen(frozen)
        model.train()
        step_losses = []
        for b, idx in enumerate(_batches(len(ds), tc.batch_size, tc.seed, epoch)):
            step = epoch * steps_per_epoch + b
            for g in opt.param_groups:
                g["lr"] = lr_schedule(step, t1, t2, tc)
            pred, amap = model(ds.volumes[idx])
            risk = risk_loss(pred.cum_probs, ds.y[idx], ds.valid[idx] if censor_valid else None)
            if use_aiag:
                w = amap.weights if cfg.loss.aiag_per_head else amap.pooled_weights
                kl, region = aiag_batch(w, ds.nodule_masks[idx], ds.has_mask[idx], ds.patch_labels[idx],
                                        ds.region_targets[idx])
                loss = combine_losses(risk, kl, region, weights, ds.has_mask[idx], ds.region_targets[idx] >= 0)
            else:
                loss = risk
            _check_finite(loss, f"finetune epoch {epoch} step {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step_losses.append(loss.item())
        min_step = probe_isotonicity(model, probe)
        if min_step < -ISOTONE_SLACK:
            raise NumericError(f"isotonicity violated after epoch {epoch + 1}: min step {min_step}")
        history.append({"epoch": epoch + 1, "loss": float(np.mean(step_losses)), "frozen": frozen,
                        "probe_min_step": min_step, "step_losses": step_losses})
        log.info("finetune epoch %d/%d loss %.5f%s", epoch + 1, tc.epochs, history[-1]["loss"],
                 " (backbone frozen)" if frozen else "")
        ck = _save(out, model, opt, names, cfg, "finetune", epoch + 1, history)
    model.set_backbone_frozen(False)
    return ck if ck is not None else load_checkpoint(out)


def model_from_checkpoint(ck, cfg: ExperimentConfig | None = None) -> tuple[RiskModel, ExperimentConfig]:
    from .config import config_from_dict

    ck = ck if isinstance(ck, Checkpoint) else load_checkpoint(ck)
    if ck.manifest.get("phase") != "finetune":
        raise DataError(f"{ck.path} is not a fine-tuned risk checkpoint")
    cfg = cfg or config_from_dict(ck.config)
    model = build_risk_model(cfg)
    model.load_state_dict(ck.params)
    model.eval()
    return model, cfg


@torch.no_grad()
def predict_dataset(model: RiskModel, ds: Dataset, batch_size: int = 16):
    """(cum_probs [n, 6], pooled attention [n, N], per-head attention [n, H, N]) as numpy."""
    model.eval()
    probs, pooled, heads = [], [], []
    for i in range(0, len(ds), batch_size):
        pred, amap = model(ds.volumes[i : i + batch_size])
        probs.append(pred.cum_probs)
        pooled.append(amap.pooled_weights)
        heads.append(amap.weights)
    return torch.cat(probs).numpy(), torch.cat(pooled).numpy(), torch.cat(heads).numpy()
