"""Synthetic lung phantoms with planted nodules and a known discrete hazard.

Every output is a pure function of ``(spec.seed, index)``: the geometry,
noise and outcome draws come from independent child streams of
``SeedSequence([seed, index])``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import HORIZON
from .types import Nodule, RegionAnnotation, RiskRecord, Sample, Volume, side_of_lobe


@dataclass
class PhantomSpec:
    grid_shape: tuple = (64, 64, 64)
    voxel_spacing: tuple = (2.0, 2.0, 2.0)
    nodule_probability: float = 0.3
    nodule_radius_range: tuple = (4.0, 10.0)
    background_noise_sd: float = 20.0
    base_yearly_hazard: float = 0.01
    radius_hazard_slope: float = 0.1
    censor_rate: float = 0.1
    seed: int = 0
    max_nodules: int = 1
    nodule_intensity_hu: float = 800.0
    lung_hu: float = -850.0
    tissue_hu: float = 40.0
    patch_size: tuple = (8, 8, 8)

    def __post_init__(self):
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        self.voxel_spacing = tuple(float(s) for s in self.voxel_spacing)
        self.nodule_radius_range = tuple(float(r) for r in self.nodule_radius_range)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.validate()

    def validate(self):
        def bad(name, why):
            raise ValueError(f"PhantomSpec.{name}: {why}")

        if len(self.grid_shape) != 3 or any(s < 8 for s in self.grid_shape):
            bad("grid_shape", f"need 3 dims >= 8, got {self.grid_shape}")
        if len(self.voxel_spacing) != 3 or any(not s > 0 for s in self.voxel_spacing):
            bad("voxel_spacing", f"need 3 positive values, got {self.voxel_spacing}")
        if not 0.0 <= self.nodule_probability <= 1.0:
            bad("nodule_probability", f"must be in [0, 1], got {self.nodule_probability}")
        lo, hi = self.nodule_radius_range
        if not 0 < lo <= hi:
            bad("nodule_radius_range", f"need 0 < min <= max, got {self.nodule_radius_range}")
        if self.background_noise_sd < 0:
            bad("background_noise_sd", "must be nonnegative")
        if not 0.0 <= self.base_yearly_hazard < 1.0:
            bad("base_yearly_hazard", f"must be in [0, 1), got {self.base_yearly_hazard}")
        if self.radius_hazard_slope < 0:
            bad("radius_hazard_slope", "must be nonnegative")
        if not 0.0 <= self.censor_rate <= 1.0:
            bad("censor_rate", f"must be in [0, 1], got {self.censor_rate}")
        if self.max_nodules < 1:
            bad("max_nodules", "must be >= 1")
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            bad("patch_size", f"need 3 positive ints, got {self.patch_size}")
        if not -(2**63) <= int(self.seed) < 2**64:
            bad("seed", "must fit in 64 bits")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"PhantomSpec: unknown fields {sorted(unknown)}")
        return cls(**d)


def yearly_hazard(nodules, spec: PhantomSpec) -> float:
    max_r = max((n.radius for n in nodules), default=0.0)
    return float(min(max(spec.base_yearly_hazard + spec.radius_hazard_slope * max_r, 0.0), 1.0))


def true_cumulative_risk(h: float, horizon: int = HORIZON) -> np.ndarray:
    """P(event by year n) = 1 - (1 - h)^n under the planted geometric law."""
    n = np.arange(1, horizon + 1)
    return 1.0 - (1.0 - h) ** n


def sample_time_to_event(nodules, spec: PhantomSpec, rng: np.random.Generator, sample_id: str = "") -> RiskRecord:
    # Fixed draw order (6 yearly uniforms, within-year, censor flag, censor time)
    # so that two hazards sharing one stream are coupled.
    h = yearly_hazard(nodules, spec)
    u_year = rng.random(HORIZON)
    u_within = rng.random()
    u_flag = rng.random()
    u_censor = rng.random()

    hits = np.flatnonzero(u_year < h)
    if hits.size:
        year = int(hits[0]) + 1
        t_event = year - u_within  # in (year - 1, year]
        event = True
    else:
        t_event = float(HORIZON)
        event = False

    if u_flag < spec.censor_rate:
        # censored strictly before the event (or end of follow-up)
        return RiskRecord(False, t_event * (1.0 - u_censor), sample_id)
    return RiskRecord(event, t_event, sample_id)


def lung_geometry(grid_shape) -> tuple[np.ndarray, np.ndarray]:
    """Ellipsoidal lung field split into 5 lobes.

    Axis order is (z, y, x). The x < midline half is the right lung (lobes
    1-3, split in z at thirds of the ellipsoid); the other half is the left
    lung (lobes 4-5, split at the z midline).
    Returns (lobe label array uint8, boolean lung field).
    """
    shape = np.asarray(grid_shape, dtype=float)
    center = (shape - 1) / 2.0
    semi = 0.44 * shape
    zz, yy, xx = np.meshgrid(*[np.arange(s) for s in grid_shape], indexing="ij")
    r2 = ((zz - center[0]) / semi[0]) ** 2 + ((yy - center[1]) / semi[1]) ** 2 + ((xx - center[2]) / semi[2]) ** 2
    lung = r2 <= 1.0

    labels = np.zeros(grid_shape, dtype=np.uint8)
    zrel = (zz - center[0]) / semi[0]  # [-1, 1] over the ellipsoid
    right = xx < center[2]
    labels[lung & right & (zrel < -1 / 3)] = 1
    labels[lung & right & (zrel >= -1 / 3) & (zrel < 1 / 3)] = 2
    labels[lung & right & (zrel >= 1 / 3)] = 3
    labels[lung & ~right & (zrel < 0)] = 4
    labels[lung & ~right & (zrel >= 0)] = 5
    return labels, lung


def nodule_voxel_mask(nodules, grid_shape, spacing) -> np.ndarray:
    mask = np.zeros(grid_shape, dtype=bool)
    if not nodules:
        return mask
    axes = [np.arange(s, dtype=float) for s in grid_shape]
    for n in nodules:
        d2 = 0.0
        for ax, (c, sp) in enumerate(zip(n.center, spacing)):
            shp = [1, 1, 1]
            shp[ax] = -1
            d2 = d2 + (((axes[ax] - c) * sp) ** 2).reshape(shp)
        mask |= d2 <= n.radius**2
    return mask


def nodule_patch_mask(nodules, grid_shape, spacing, patch_size) -> np.ndarray:
    """Boolean mask over row-major patches that contain any nodule voxel."""
    vox = nodule_voxel_mask(nodules, grid_shape, spacing)
    g = [s // p for s, p in zip(grid_shape, patch_size)]
    if any(s % p for s, p in zip(grid_shape, patch_size)):
        raise ValueError(f"grid {tuple(grid_shape)} not divisible by patch size {tuple(patch_size)}")
    blocks = vox.reshape(g[0], patch_size[0], g[1], patch_size[1], g[2], patch_size[2])
    return blocks.any(axis=(1, 3, 5)).reshape(-1)


def annotation_for(nodules, grid_shape, spacing, patch_size) -> RegionAnnotation:
    if not nodules:
        return RegionAnnotation()
    largest = max(nodules, key=lambda n: n.radius)
    pm = nodule_patch_mask(nodules, grid_shape, spacing, patch_size)
    if not pm.any():
        return RegionAnnotation(lobe_label=largest.lobe, side_label=side_of_lobe(largest.lobe))
    return RegionAnnotation(pm, largest.lobe, side_of_lobe(largest.lobe))


def _place_nodules(rng, spec, labels, lung):
    if rng.random() >= spec.nodule_probability:
        return []
    count = int(rng.integers(1, spec.max_nodules + 1))
    depth = ndimage.distance_transform_edt(lung, sampling=spec.voxel_spacing)
    nodules = []
    for _ in range(count):
        radius = float(rng.uniform(*spec.nodule_radius_range))
        lobe = int(rng.integers(1, 6))
        # sphere must sit entirely inside the lung field
        ok = (labels == lobe) & (depth > radius + max(spec.voxel_spacing))
        if not ok.any():
            ok = (labels > 0) & (depth > radius + max(spec.voxel_spacing))
            if not ok.any():
                raise ValueError(
                    f"PhantomSpec.nodule_radius_range: radius {radius:.2f} mm does not fit in the lung field"
                )
        candidates = np.argwhere(ok)
        center = candidates[int(rng.integers(len(candidates)))]
        lobe = int(labels[tuple(center)])
        nodules.append(Nodule(tuple(float(c) for c in center), radius, lobe, spec.nodule_intensity_hu))
    return nodules


def generate_phantom(spec: PhantomSpec, index: int) -> Sample:
    spec.validate()
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    geo_ss, noise_ss, outcome_ss = np.random.SeedSequence([int(spec.seed) % 2**64, int(index)]).spawn(3)
    geo_rng = np.random.default_rng(geo_ss)

    labels, lung = lung_geometry(spec.grid_shape)
    nodules = _place_nodules(geo_rng, spec, labels, lung)

    hu = np.full(spec.grid_shape, spec.tissue_hu, dtype=np.float32)
    hu[lung] = spec.lung_hu
    if nodules:
        hu[nodule_voxel_mask(nodules, spec.grid_shape, spec.voxel_spacing)] = spec.lung_hu + spec.nodule_intensity_hu
    if spec.background_noise_sd > 0:
        hu += np.random.default_rng(noise_ss).normal(0.0, spec.background_noise_sd, spec.grid_shape).astype(np.float32)

    sample_id = f"s{index:06d}"
    record = sample_time_to_event(nodules, spec, np.random.default_rng(outcome_ss), sample_id)
    ann = annotation_for(nodules, spec.grid_shape, spec.voxel_spacing, spec.patch_size)
    return Sample(
        volume=Volume(hu, spec.voxel_spacing),
        lobe_mask=Volume(labels, spec.voxel_spacing),
        nodules=nodules,
        record=record,
        annotation=ann,
    )
