"""EVA-02 style pre-norm transformer with 3D rotary attention and SwiGLU MLPs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import RopeTables, make_rope_tables, rope_angles, rotate_pairs


@dataclass
class EncoderConfig:
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 8 / 3
    dropout: float = 0.0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(embed_dim=792, depth=12, num_heads=12)

    @classmethod
    def desk_scale(cls) -> "EncoderConfig":
        return cls(embed_dim=96, depth=4, num_heads=4)

    def to_dict(self):
        return asdict(self)


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class RopeAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x, cos, sin, need_weights: bool = False):
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # [B, H, L, hd]
        q = rotate_pairs(q, cos, sin)
        k = rotate_pairs(k, cos, sin)
        drop = self.dropout if self.training else 0.0
        if need_weights:
            attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
            attn = attn.softmax(dim=-1)
            out = F.dropout(attn, drop, self.training) @ v
        else:
            attn = None
            out = F.scaled_dot_product_attention(q, k, v, dropout_p=drop)
        out = out.transpose(1, 2).reshape(B, L, D)
        return F.dropout(self.proj(out), drop, self.training), attn


class SwiGLU(nn.Module):
    """Gated MLP with a LayerNorm before the output projection (EVA-02 sub-LN)."""

    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.w12 = nn.Linear(dim, 2 * hidden)
        self.norm = nn.LayerNorm(hidden)
        self.w3 = nn.Linear(hidden, dim)
        self.dropout = dropout

    def forward(self, x):
        a, b = self.w12(x).chunk(2, dim=-1)
        h = self.norm(F.silu(a) * b)
        return F.dropout(self.w3(h), self.dropout, self.training)


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = RopeAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = SwiGLU(dim, int(round(dim * mlp_ratio)), dropout)

    def forward(self, x, cos, sin, need_weights=False):
        a, w = self.attn(self.norm1(x), cos, sin, need_weights)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, w


class Encoder(nn.Module):
    """Stack of rotary pre-norm blocks followed by a final LayerNorm.

    Also used (at decoder scale) as the MAE decoder.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.rope: RopeTables = make_rope_tables(cfg.head_dim, cfg.rope_base)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        init_weights(self)

    def forward(self, x: torch.Tensor, coords: torch.Tensor, return_attn: bool = False):
        """x [B, L, D]; coords [L, 3] or [B, L, 3] integer positions (zero row for CLS)."""
        if x.dim() != 3 or x.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"expected [B, L, {self.cfg.embed_dim}] input, got {tuple(x.shape)}")
        if coords.shape[-2] != x.shape[1] or coords.shape[-1] != 3:
            raise ValueError(f"coords shape {tuple(coords.shape)} does not match sequence length {x.shape[1]}")
        ang = rope_angles(coords, self.rope, dtype=x.dtype)
        if ang.dim() == 3:
            ang = ang[:, None]
        cos, sin = ang.cos(), ang.sin()
        maps = []
        for blk in self.blocks:
            x, w = blk(x, cos, sin, return_attn)
            maps.append(w)
        x = self.norm(x)
        return (x, maps) if return_attn else x


def encoder_forward(embeddings, coords, encoder: Encoder, train_mode: bool = False):
    """Functional wrapper: [N+1, D] or [B, N+1, D] embeddings -> same shape."""
    encoder.train(train_mode)
    squeeze = embeddings.dim() == 2
    x = embeddings[None] if squeeze else embeddings
    out = encoder(x, torch.as_tensor(coords))
    return out[0] if squeeze else out
