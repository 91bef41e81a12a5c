"""Plain data containers shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

RIGHT_LOBES = (1, 2, 3)
LEFT_LOBES = (4, 5)


def side_of_lobe(lobe: int) -> str:
    if lobe in RIGHT_LOBES:
        return "right"
    if lobe in LEFT_LOBES:
        return "left"
    raise ValueError(f"lobe label must be in 1..5, got {lobe}")


@dataclass
class Volume:
    """3D scalar grid with voxel spacing (mm) and its offset into a parent grid."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin_offset: tuple = (0, 0, 0)

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.size == 0:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        self.origin_offset = tuple(int(o) for o in self.origin_offset)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)


@dataclass
class RiskRecord:
    event: bool
    time_years: float
    sample_id: str = ""

    def __post_init__(self):
        self.event = bool(self.event)
        self.time_years = float(self.time_years)
        if not self.time_years > 0:
            raise ValueError(f"time_years must be positive, got {self.time_years}")


@dataclass
class RegionAnnotation:
    """Optional AIAG supervision for one sample.

    ``nodule_patch_mask`` is a boolean vector over patch tokens (row-major patch
    order); ``lobe_label`` is 1..5 and ``side_label`` is "left"/"right".
    """

    nodule_patch_mask: Optional[np.ndarray] = None
    lobe_label: Optional[int] = None
    side_label: Optional[str] = None

    def __post_init__(self):
        if self.nodule_patch_mask is not None:
            self.nodule_patch_mask = np.asarray(self.nodule_patch_mask, dtype=bool)
            if not self.nodule_patch_mask.any():
                raise ValueError("nodule_patch_mask must contain at least one positive patch")
        if self.lobe_label is not None:
            self.lobe_label = int(self.lobe_label)
            side = side_of_lobe(self.lobe_label)
            if self.side_label is None:
                self.side_label = side
            elif self.side_label != side:
                raise ValueError(f"lobe {self.lobe_label} lies on the {side} side, not {self.side_label}")
        if self.side_label is not None and self.side_label not in ("left", "right"):
            raise ValueError(f"side_label must be 'left' or 'right', got {self.side_label!r}")

    @property
    def empty(self) -> bool:
        return self.nodule_patch_mask is None and self.lobe_label is None and self.side_label is None


@dataclass
class Nodule:
    center: tuple
    radius: float
    lobe: int
    intensity_delta: float = 0.0

    def to_dict(self) -> dict:
        return {
            "center": [float(c) for c in self.center],
            "radius": float(self.radius),
            "lobe": int(self.lobe),
            "intensity_delta": float(self.intensity_delta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Nodule":
        return cls(tuple(d["center"]), d["radius"], d["lobe"], d.get("intensity_delta", 0.0))


@dataclass
class Sample:
    """One generated or loaded case: image, lobe labels, nodules, outcome, supervision."""

    volume: Volume
    lobe_mask: Volume
    nodules: list = field(default_factory=list)
    record: Optional[RiskRecord] = None
    annotation: RegionAnnotation = field(default_factory=RegionAnnotation)
