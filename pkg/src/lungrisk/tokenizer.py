"""Patch tokenisation, absolute position table and 3D rotary embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .types import Volume


@dataclass
class PatchGrid:
    tokens: np.ndarray  # [N, P]
    grid_dims: tuple
    patch_size: tuple
    patch_coords: np.ndarray  # [N, 3]

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.grid_dims))


def grid_dims_for(shape, patch_size) -> tuple:
    dims = []
    for axis, (s, p) in enumerate(zip(shape, patch_size)):
        if s % p:
            raise ValueError(f"axis {axis}: size {s} is not divisible by patch size {p}")
        dims.append(s // p)
    return tuple(dims)


def patch_coords(grid_dims) -> np.ndarray:
    """Row-major enumeration of patch indices, shape [N, 3]."""
    return np.stack(np.meshgrid(*[np.arange(g) for g in grid_dims], indexing="ij"), axis=-1).reshape(-1, 3)


def patchify_tensor(x: torch.Tensor, patch_size) -> torch.Tensor:
    """[B, D, H, W] -> [B, N, P] with patches and in-patch voxels both row-major."""
    B = x.shape[0]
    g = grid_dims_for(x.shape[1:], patch_size)
    pz, py, px = patch_size
    x = x.reshape(B, g[0], pz, g[1], py, g[2], px)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B, g[0] * g[1] * g[2], pz * py * px)


def unpatchify_tensor(t: torch.Tensor, grid_dims, patch_size) -> torch.Tensor:
    B = t.shape[0]
    g = tuple(grid_dims)
    pz, py, px = patch_size
    x = t.reshape(B, g[0], g[1], g[2], pz, py, px)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(B, g[0] * pz, g[1] * py, g[2] * px)


def patchify(v, patch_size=(8, 8, 8)) -> PatchGrid:
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    patch_size = tuple(int(p) for p in patch_size)
    g = grid_dims_for(data.shape, patch_size)
    tokens = patchify_tensor(torch.from_numpy(np.ascontiguousarray(data))[None], patch_size)[0].numpy()
    return PatchGrid(tokens, g, patch_size, patch_coords(g))


def unpatchify(g: PatchGrid) -> np.ndarray:
    return unpatchify_tensor(torch.from_numpy(np.ascontiguousarray(g.tokens))[None], g.grid_dims, g.patch_size)[0].numpy()


# ---------------------------------------------------------------- rotary


@dataclass
class RopeTables:
    freqs: list  # three 1D arrays, one per axis, length axis_dim / 2
    head_dim: int
    axis_dims: tuple


def split_head_dim(head_dim: int) -> tuple:
    if head_dim % 2 or head_dim < 6:
        raise ValueError(f"head_dim must be even and >= 6 for 3D rotary embeddings, got {head_dim}")
    a = 2 * round(head_dim / 6)
    last = head_dim - 2 * a
    if a < 2 or last < 2:
        raise ValueError(f"cannot split head_dim {head_dim} across 3 axes")
    return (a, a, last)


def make_rope_tables(head_dim: int, base: float = 10000.0) -> RopeTables:
    dims = split_head_dim(head_dim)
    freqs = [base ** (-np.arange(0, d, 2, dtype=np.float64) / d) for d in dims]
    return RopeTables(freqs, head_dim, dims)


def rope_angles(coords: torch.Tensor, tables: RopeTables, dtype=torch.float32) -> torch.Tensor:
    """Rotation angles [..., L, head_dim/2] for integer coords [..., L, 3]."""
    coords = torch.as_tensor(coords)
    parts = []
    for axis, f in enumerate(tables.freqs):
        f = torch.as_tensor(f, dtype=torch.float64, device=coords.device)
        parts.append(coords[..., axis : axis + 1].to(torch.float64) * f)
    return torch.cat(parts, dim=-1).to(dtype)


def rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs (x[2j], x[2j+1]) by the given angle tables."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def apply_rope_3d(x: torch.Tensor, coords, tables: RopeTables) -> torch.Tensor:
    """Apply 3D rotary embedding to x of shape [..., heads, L, head_dim].

    ``coords`` is [L, 3] or [B, L, 3]; a zero row leaves the token unrotated
    (used for the CLS token).
    """
    if x.shape[-1] != tables.head_dim:
        raise ValueError(f"head_dim mismatch: tensor has {x.shape[-1]}, tables expect {tables.head_dim}")
    ang = rope_angles(coords, tables, dtype=x.dtype)
    if ang.dim() == 3:  # per-sample coords -> broadcast over heads
        ang = ang[:, None]
    return rotate_pairs(x, ang.cos(), ang.sin())


# ---------------------------------------------------------------- embedding


class PatchEmbed(nn.Module):
    """Linear patch projection + learned absolute position table + CLS token."""

    def __init__(self, grid_dims, patch_size, embed_dim: int):
        super().__init__()
        self.grid_dims = tuple(grid_dims)
        self.patch_size = tuple(patch_size)
        n = int(np.prod(self.grid_dims))
        p = int(np.prod(self.patch_size))
        self.proj = nn.Linear(p, embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(n, embed_dim))
        self.cls_token = nn.Parameter(torch.zeros(embed_dim))
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.register_buffer("coords", torch.from_numpy(patch_coords(self.grid_dims)), persistent=False)

    def check_grid(self, grid_dims):
        if any(g > t for g, t in zip(grid_dims, self.grid_dims)) or len(grid_dims) != 3:
            raise ValueError(f"patch grid {tuple(grid_dims)} exceeds the position table {self.grid_dims}")

    def forward(self, patches: torch.Tensor, index: torch.Tensor | None = None) -> torch.Tensor:
        """patches [B, M, P] -> tokens [B, M+1, D] (CLS first).

        ``index`` [B, M] gives the patch position of each row; defaults to all N patches in order.
        """
        B = patches.shape[0]
        x = self.proj(patches)
        if index is None:
            if patches.shape[1] != self.pos_embed.shape[0]:
                raise ValueError(f"expected {self.pos_embed.shape[0]} patches, got {patches.shape[1]}")
            x = x + self.pos_embed
        else:
            x = x + self.pos_embed[index]
        cls = self.cls_token.expand(B, 1, -1)
        return torch.cat([cls, x], dim=1)

    def token_coords(self, index: torch.Tensor | None = None, batch: int = 1) -> torch.Tensor:
        """Rotary coords for [CLS] + tokens; CLS gets the zero sentinel."""
        if index is None:
            c = self.coords
            return torch.cat([torch.zeros(1, 3, dtype=c.dtype, device=c.device), c])
        c = self.coords[index]
        return torch.cat([torch.zeros(c.shape[0], 1, 3, dtype=c.dtype, device=c.device), c], dim=1)


def embed_patches(g: PatchGrid, embed: PatchEmbed) -> torch.Tensor:
    """Embed one PatchGrid -> [N+1, D]."""
    embed.check_grid(g.grid_dims)
    if tuple(g.grid_dims) != embed.grid_dims:
        flat = np.ravel_multi_index(g.patch_coords.T, embed.grid_dims)
        index = torch.from_numpy(flat)[None]
    else:
        index = None
    t = torch.as_tensor(g.tokens, dtype=embed.proj.weight.dtype)[None]
    return embed(t, index)[0]
