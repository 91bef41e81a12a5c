"""Two-token risk head: learned-query attention pooling + cumulative hazard layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import HORIZON
from .encoder import Encoder, EncoderConfig
from .tokenizer import PatchEmbed, patchify_tensor
from .types import Volume


@dataclass
class AttentionMap:
    weights: torch.Tensor  # [..., H, N]
    pooled_weights: torch.Tensor  # [..., N]

    @property
    def head_count(self) -> int:
        return self.weights.shape[-2]


@dataclass
class RiskPrediction:
    cum_probs: torch.Tensor  # [..., 6]
    base_logit: torch.Tensor  # [...]
    hazard_increments: torch.Tensor  # [..., 6]

    @property
    def cum_logits(self) -> torch.Tensor:
        return self.base_logit[..., None] + self.hazard_increments.cumsum(-1)


class AttentionPool(nn.Module):
    """A single learned query attends over patch tokens with multi-head attention."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = nn.Parameter(torch.zeros(dim))
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.query, std=0.02)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, tokens: torch.Tensor):
        """tokens [B, N, D] (patch tokens only) -> pooled [B, D], AttentionMap."""
        B, N, D = tokens.shape
        if N == 0:
            raise ValueError("attention pooling needs at least one patch token")
        H, hd = self.num_heads, self.head_dim
        q = self.q_proj(self.query).reshape(H, hd)
        k = self.k_proj(tokens).reshape(B, N, H, hd).transpose(1, 2)  # [B, H, N, hd]
        v = self.v_proj(tokens).reshape(B, N, H, hd).transpose(1, 2)
        logits = torch.einsum("hd,bhnd->bhn", q, k) / math.sqrt(hd)
        w = logits.softmax(dim=-1)
        heads = torch.einsum("bhn,bhnd->bhd", w, v).reshape(B, D)
        return self.out_proj(heads), AttentionMap(w, w.mean(dim=1))


def attention_pool(embeddings: torch.Tensor, pool: AttentionPool):
    """[N+1, D] encoder output (CLS first) -> pooled [D], AttentionMap over the N patches."""
    pooled, amap = pool(embeddings[None, 1:])
    return pooled[0], AttentionMap(amap.weights[0], amap.pooled_weights[0])


def cumulative_from_raw(base_logit: torch.Tensor, raw: torch.Tensor, increment: str = "relu") -> RiskPrediction:
    if increment == "relu":
        inc = F.relu(raw)
    elif increment == "softplus":
        inc = F.softplus(raw)
    else:
        raise ValueError(f"unknown increment nonlinearity {increment!r}")
    logits = base_logit[..., None] + inc.cumsum(-1)
    return RiskPrediction(torch.sigmoid(logits), base_logit, inc)


class CumulativeHazard(nn.Module):
    def __init__(self, in_dim: int, hidden: int | None = None, horizon: int = HORIZON, increment: str = "relu"):
        super().__init__()
        hidden = hidden or in_dim
        self.trunk = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU())
        self.base = nn.Linear(hidden, 1)
        self.hazard = nn.Linear(hidden, horizon)
        self.increment = increment
        for lin in (self.trunk[0], self.base, self.hazard):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, features: torch.Tensor) -> RiskPrediction:
        if not torch.isfinite(features).all():
            raise ValueError("cumulative hazard received non-finite features")
        h = self.trunk(features)
        return cumulative_from_raw(self.base(h)[..., 0], self.hazard(h), self.increment)


def cumulative_hazard(features: torch.Tensor, layer: CumulativeHazard) -> RiskPrediction:
    return layer(features)


class RiskModel(nn.Module):
    """Patch embedding -> encoder -> (CLS, attention-pooled) -> cumulative hazard."""

    def __init__(self, grid_dims, patch_size, enc_cfg: EncoderConfig, pool_heads: int | None = None,
                 increment: str = "relu"):
        super().__init__()
        self.grid_dims = tuple(grid_dims)
        self.patch_size = tuple(patch_size)
        d = enc_cfg.embed_dim
        self.patch_embed = PatchEmbed(self.grid_dims, self.patch_size, d)
        self.encoder = Encoder(enc_cfg)
        self.pool = AttentionPool(d, pool_heads or enc_cfg.num_heads)
        self.head = CumulativeHazard(2 * d, 2 * d, HORIZON, increment)

    def backbone_parameters(self):
        yield from self.patch_embed.parameters()
        yield from self.encoder.parameters()

    def head_parameters(self):
        yield from self.pool.parameters()
        yield from self.head.parameters()

    def set_backbone_frozen(self, frozen: bool):
        for p in self.backbone_parameters():
            p.requires_grad_(not frozen)

    def forward(self, volumes: torch.Tensor):
        """volumes [B, D, H, W] normalised -> (RiskPrediction, AttentionMap)."""
        patches = patchify_tensor(volumes, self.patch_size)
        x = self.patch_embed(patches)
        x = self.encoder(x, self.patch_embed.token_coords())
        pooled, amap = self.pool(x[:, 1:])
        feats = torch.cat([x[:, 0], pooled], dim=-1)
        return self.head(feats), amap


def risk_forward(volume, model: RiskModel):
    """Single preprocessed volume ([D, H, W] array or Volume) -> (RiskPrediction, AttentionMap)."""
    data = volume.data if isinstance(volume, Volume) else volume
    x = torch.as_tensor(data, dtype=model.head.base.weight.dtype)[None]
    pred, amap = model(x)
    return (
        RiskPrediction(pred.cum_probs[0], pred.base_logit[0], pred.hazard_increments[0]),
        AttentionMap(amap.weights[0], amap.pooled_weights[0]),
    )
