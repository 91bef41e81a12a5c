"""Intensity windowing, resampling and lung-driven cropping of CT volumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .types import Volume


@dataclass(frozen=True)
class WindowSpec:
    low: float = -1350.0
    high: float = 150.0

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"window low must be < high, got ({self.low}, {self.high})")


def window_and_normalize(v: Volume, w: WindowSpec = WindowSpec()) -> Volume:
    """Clamp to the HU window and map it linearly onto [-1, 1]."""
    data = v.data
    dt = data.dtype if np.issubdtype(data.dtype, np.floating) else np.float32
    x = np.clip(data.astype(np.float64), w.low, w.high)
    out = 2.0 * (x - w.low) / (w.high - w.low) - 1.0
    return Volume(out.astype(dt), v.spacing, v.origin_offset)


def resample_trilinear(v: Volume, target_spacing) -> Volume:
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(not t > 0 for t in target):
        raise ValueError(f"target_spacing must be 3 positive values, got {target_spacing}")
    if target == v.spacing:
        return Volume(v.data.copy(), v.spacing, v.origin_offset)

    in_shape = np.asarray(v.shape, dtype=float)
    ratio = np.asarray(v.spacing) / np.asarray(target)
    out_shape = tuple(int(s) for s in np.round(in_shape * ratio))
    if any(s < 1 for s in out_shape):
        raise ValueError(f"resampling to {target} mm gives a degenerate grid {out_shape}")

    # output voxel centre i sits at (i + 0.5) * target in mm, i.e. source index (i + 0.5) / ratio - 0.5
    coords = [(np.arange(n) + 0.5) / r - 0.5 for n, r in zip(out_shape, ratio)]
    grid = np.meshgrid(*coords, indexing="ij")
    out = ndimage.map_coordinates(v.data, grid, order=1, mode="nearest", output=v.data.dtype)
    return Volume(out, target, v.origin_offset)


def crop_to_lung(v: Volume, lobe_mask: Volume, pad_voxels=(2, 2, 2)) -> tuple[Volume, Volume]:
    if v.shape != lobe_mask.shape:
        raise ValueError(f"mask shape {lobe_mask.shape} does not match volume shape {v.shape}")
    nz = np.argwhere(lobe_mask.data != 0)
    if nz.size == 0:
        raise ValueError("no lung region found")
    pad = np.asarray(pad_voxels, dtype=int)
    if pad.shape != (3,) or (pad < 0).any():
        raise ValueError(f"pad_voxels must be 3 nonnegative ints, got {pad_voxels}")
    lo = np.maximum(nz.min(axis=0) - pad, 0)
    hi = np.minimum(nz.max(axis=0) + pad + 1, v.shape)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    offset = tuple(int(o + a) for o, a in zip(v.origin_offset, lo))
    return (
        Volume(v.data[sl].copy(), v.spacing, offset),
        Volume(lobe_mask.data[sl].copy(), lobe_mask.spacing, offset),
    )


def _fit_array(a: np.ndarray, target_shape, fill) -> tuple[np.ndarray, tuple]:
    """Centre-pad/centre-crop ``a`` to target_shape; returns the shift applied to indices."""
    out = np.full(target_shape, fill, dtype=a.dtype)
    src, dst, shift = [], [], []
    for n, t in zip(a.shape, target_shape):
        if n <= t:
            before = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(before, before + n))
            shift.append(before)
        else:
            start = (n - t) // 2
            src.append(slice(start, start + t))
            dst.append(slice(0, t))
            shift.append(-start)
    out[tuple(dst)] = a[tuple(src)]
    return out, tuple(shift)


def fit_to_grid(v: Volume, lobe_mask: Volume | None, target_shape, fill_value: float = -1.0):
    """Centre-pad (with ``fill_value``; 0 for the mask) or centre-crop to ``target_shape``.

    ``origin_offset`` of the outputs is updated so that parent index =
    local index + origin_offset still holds (it may become negative after padding).
    """
    target_shape = tuple(int(t) for t in target_shape)
    data, shift = _fit_array(v.data, target_shape, fill_value)
    offset = tuple(o - s for o, s in zip(v.origin_offset, shift))
    out_v = Volume(data, v.spacing, offset)
    if lobe_mask is None:
        return out_v, None
    mdata, _ = _fit_array(lobe_mask.data, target_shape, 0)
    return out_v, Volume(mdata, lobe_mask.spacing, offset)


def fit_shift(in_shape, target_shape) -> tuple:
    """Index shift that fit_to_grid applies along each axis."""
    return tuple((t - n) // 2 if n <= t else -((n - t) // 2) for n, t in zip(in_shape, target_shape))


@dataclass
class PreprocessConfig:
    window: WindowSpec = WindowSpec()
    target_spacing: tuple | None = None
    crop_pad: tuple = (2, 2, 2)
    grid_shape: tuple = (64, 64, 64)

    def __post_init__(self):
        if self.target_spacing is not None:
            self.target_spacing = tuple(float(t) for t in self.target_spacing)
        self.crop_pad = tuple(int(p) for p in self.crop_pad)
        self.grid_shape = tuple(int(g) for g in self.grid_shape)


def preprocess(v: Volume, lobe_mask: Volume, cfg: PreprocessConfig = PreprocessConfig()):
    """Full chain: resample -> window/normalise -> crop to lung -> fit to canonical grid.

    Returns (volume, mask, transform) where ``transform(point)`` maps voxel
    coordinates of the input grid onto the output grid.
    """
    scale = np.ones(3)
    if cfg.target_spacing is not None and tuple(cfg.target_spacing) != v.spacing:
        scale = np.asarray(v.spacing) / np.asarray(cfg.target_spacing, dtype=float)
        v = resample_trilinear(v, cfg.target_spacing)
        # nearest-neighbour for labels
        coords = [np.clip(np.round((np.arange(n) + 0.5) / r - 0.5), 0, s - 1)
                  for n, r, s in zip(v.shape, scale, lobe_mask.shape)]
        grid = np.meshgrid(*coords, indexing="ij")
        labels = ndimage.map_coordinates(lobe_mask.data, grid, order=0, mode="nearest", output=lobe_mask.data.dtype)
        lobe_mask = Volume(labels, v.spacing)
    v = window_and_normalize(v, cfg.window)
    v, lobe_mask = crop_to_lung(v, lobe_mask, cfg.crop_pad)
    crop_offset = np.asarray(v.origin_offset, dtype=float)
    shift = np.asarray(fit_shift(v.shape, cfg.grid_shape), dtype=float)
    v, lobe_mask = fit_to_grid(v, lobe_mask, cfg.grid_shape, fill_value=-1.0)

    def transform(point):
        p = (np.asarray(point, dtype=float) + 0.5) * scale - 0.5
        return tuple(p - crop_offset + shift)

    return v, lobe_mask, transform
