"""Central finite differences used as the independent gradient oracle."""

import numpy as np
import torch


def central_diff(fn, x: torch.Tensor, index, h: float = 1e-5) -> float:
    xp = x.detach().clone()
    xm = x.detach().clone()
    xp.view(-1)[index] += h
    xm.view(-1)[index] -= h
    with torch.no_grad():
        return float((fn(xp) - fn(xm)) / (2 * h))


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    (g,) = torch.autograd.grad(out, x)
    return g


def max_rel_error(fn, x: torch.Tensor, indices, h: float = 1e-5, floor: float = 1e-6) -> float:
    g = analytic_grad(fn, x).reshape(-1)
    worst = 0.0
    for i in indices:
        num = central_diff(fn, x, i, h)
        ana = float(g[i])
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst


def sample_indices(x: torch.Tensor, k: int, seed: int = 0):
    return np.random.default_rng(seed).choice(x.numel(), size=min(k, x.numel()), replace=False)
