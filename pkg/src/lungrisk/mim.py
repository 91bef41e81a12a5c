"""Masked-autoencoder pretraining: masking, asymmetric encoder/decoder, masked MSE."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .encoder import Encoder, EncoderConfig
from .tokenizer import PatchEmbed, patch_coords


@dataclass
class MaskPlan:
    visible_indices: np.ndarray
    masked_indices: np.ndarray
    mask_ratio: float

    @property
    def num_patches(self) -> int:
        return len(self.visible_indices) + len(self.masked_indices)

    def mask_vector(self) -> np.ndarray:
        m = np.zeros(self.num_patches, dtype=bool)
        m[self.masked_indices] = True
        return m


@dataclass
class DecoderConfig:
    embed_dim: int = 48
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 8 / 3

    @classmethod
    def full_scale(cls) -> "DecoderConfig":
        return cls(embed_dim=396, depth=4, num_heads=6)

    @classmethod
    def desk_scale(cls) -> "DecoderConfig":
        return cls()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.embed_dim, self.depth, self.num_heads, self.mlp_ratio)

    def to_dict(self):
        return asdict(self)


def num_masked(n: int, mask_ratio: float) -> int:
    return int(np.floor(mask_ratio * n + 0.5))


def random_mask(n: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    if n < 2:
        raise ValueError(f"need at least 2 patches, got {n}")
    m = num_masked(n, mask_ratio)
    if m == 0 or m == n:
        raise ValueError(f"mask_ratio {mask_ratio} with {n} patches leaves no {'masked' if m == 0 else 'visible'} patch")
    perm = rng.permutation(n)
    return MaskPlan(np.sort(perm[m:]), np.sort(perm[:m]), float(mask_ratio))


class MaskedAutoencoder(nn.Module):
    def __init__(self, grid_dims, patch_size, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig):
        super().__init__()
        self.grid_dims = tuple(grid_dims)
        self.patch_size = tuple(patch_size)
        n = int(np.prod(self.grid_dims))
        p = int(np.prod(self.patch_size))
        self.patch_embed = PatchEmbed(self.grid_dims, self.patch_size, enc_cfg.embed_dim)
        self.encoder = Encoder(enc_cfg)

        self.decoder_embed = nn.Linear(enc_cfg.embed_dim, dec_cfg.embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(dec_cfg.embed_dim))
        self.decoder_pos = nn.Parameter(torch.zeros(n, dec_cfg.embed_dim))
        self.decoder = Encoder(dec_cfg.encoder_config())
        self.decoder_pred = nn.Linear(dec_cfg.embed_dim, p)
        for t in (self.mask_token, self.decoder_pos):
            nn.init.trunc_normal_(t, std=0.02)
        for lin in (self.decoder_embed, self.decoder_pred):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)
        coords = torch.from_numpy(patch_coords(self.grid_dims))
        self.register_buffer("all_coords", torch.cat([torch.zeros(1, 3, dtype=coords.dtype), coords]), persistent=False)

    @staticmethod
    def plan_tensors(plans, device=None):
        vis = torch.as_tensor(np.stack([p.visible_indices for p in plans]), dtype=torch.long, device=device)
        mask = torch.as_tensor(np.stack([p.mask_vector() for p in plans]), device=device)
        return vis, mask

    def forward_encoder(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Encode visible patches only. patches [B, N, P], visible [B, V] -> [B, V+1, D]."""
        B = patches.shape[0]
        gathered = torch.gather(patches, 1, visible[..., None].expand(-1, -1, patches.shape[-1]))
        x = self.patch_embed(gathered, visible)
        coords = self.patch_embed.token_coords(visible, B)
        return self.encoder(x, coords)

    def forward_decoder(self, latent: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        B = latent.shape[0]
        n = self.decoder_pos.shape[0]
        y = self.decoder_embed(latent)
        tokens = self.mask_token.expand(B, n, -1).clone()
        tokens = tokens.scatter(1, visible[..., None].expand(-1, -1, y.shape[-1]), y[:, 1:])
        tokens = tokens + self.decoder_pos
        seq = torch.cat([y[:, :1], tokens], dim=1)
        out = self.decoder(seq, self.all_coords)
        return self.decoder_pred(out[:, 1:])

    def forward(self, patches: torch.Tensor, plans) -> torch.Tensor:
        """patches [B, N, P] + one MaskPlan per sample -> reconstruction [B, N, P]."""
        if patches.dim() != 3 or patches.shape[1] != self.decoder_pos.shape[0]:
            raise ValueError(f"expected [B, {self.decoder_pos.shape[0]}, P] patches, got {tuple(patches.shape)}")
        if len(plans) != patches.shape[0] or any(p.num_patches != patches.shape[1] for p in plans):
            raise ValueError("mask plans do not match the patch batch")
        visible, _ = self.plan_tensors(plans, patches.device)
        latent = self.forward_encoder(patches, visible)
        return self.forward_decoder(latent, visible)


def mae_forward(g, plan: MaskPlan, model: MaskedAutoencoder) -> torch.Tensor:
    """Single PatchGrid -> reconstructed patches [N, P]."""
    t = torch.as_tensor(g.tokens, dtype=model.decoder_pred.weight.dtype)[None]
    return model(t, [plan])[0]


def mae_loss(recon: torch.Tensor, target: torch.Tensor, mask, masked_only: bool = True,
             norm_pix: bool = False) -> torch.Tensor:
    """Mean squared error over masked patches (or all patches).

    recon/target are [N, P] or [B, N, P]; ``mask`` is a MaskPlan, a list of
    plans, or a boolean tensor [N] / [B, N] marking masked patches.
    """
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: recon {tuple(recon.shape)} vs target {tuple(target.shape)}")
    if isinstance(mask, MaskPlan):
        mask = torch.as_tensor(mask.mask_vector())
    elif isinstance(mask, (list, tuple)):
        mask = torch.as_tensor(np.stack([p.mask_vector() for p in mask]))
    mask = torch.as_tensor(mask, device=recon.device).to(recon.dtype)
    if mask.shape != recon.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tuple(recon.shape[:-1])}")
    if norm_pix:
        mu = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mu) / (var + 1e-6).sqrt()
    if not masked_only:
        mask = torch.ones_like(mask)
    count = mask.sum()
    if count == 0:
        raise ValueError("no masked patches to score")
    per_patch = ((recon - target) ** 2).sum(dim=-1)
    return (per_patch * mask).sum() / (count * recon.shape[-1])
