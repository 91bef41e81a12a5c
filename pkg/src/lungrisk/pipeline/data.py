"""Synthetic dataset generation and loading into training tensors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..losses import build_labels, region_target
from ..phantom import PhantomSpec, generate_phantom, nodule_patch_mask, yearly_hazard
from ..preproc import PreprocessConfig, preprocess
from ..tokenizer import grid_dims_for, patchify_tensor
from ..types import Nodule, RegionAnnotation
from .formats import DataError, Manifest, ManifestEntry, read_annotation, read_manifest, read_volume, \
    write_annotation, write_manifest, write_volume

log = logging.getLogger(__name__)


def synth_data(out_dir, spec: PhantomSpec, n: int, start: int = 0) -> Manifest:
    """Write phantoms ``start .. start+n-1`` (HU volumes, lobe masks, annotations) plus a manifest."""
    out = Path(out_dir)
    for sub in ("volumes", "masks", "annotations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    grid_dims = tuple(g // p for g, p in zip(spec.grid_shape, spec.patch_size))
    entries = []
    for index in range(start, start + n):
        s = generate_phantom(spec, index)
        sid = s.record.sample_id
        write_volume(out / "volumes" / sid, s.volume, "float32")
        write_volume(out / "masks" / sid, s.lobe_mask, "uint8")
        write_annotation(out / "annotations" / f"{sid}.json", s.nodules, s.annotation, spec.patch_size, grid_dims)
        entries.append(ManifestEntry(sid, f"volumes/{sid}.raw", f"masks/{sid}.raw", f"annotations/{sid}.json",
                                     s.record.event, s.record.time_years, patient_id=sid))
    manifest = Manifest(entries, spec.to_dict())
    write_manifest(out, manifest)
    log.info("wrote %d samples to %s", n, out)
    return manifest


def patch_labels(mask: np.ndarray, patch_size) -> np.ndarray:
    """Majority label (0 = outside lung) of every patch, row-major."""
    t = patchify_tensor(torch.from_numpy(mask.astype(np.int64))[None], patch_size)[0]
    counts = torch.stack([(t == lab).sum(-1) for lab in range(6)], dim=-1)
    return counts.argmax(-1).numpy().astype(np.uint8)


@dataclass
class PreparedSample:
    volume: np.ndarray  # canonical grid, normalised
    lobe_mask: np.ndarray
    nodules: list  # in canonical-grid voxel coordinates
    annotation: RegionAnnotation
    patch_labels: np.ndarray


def prepare_sample(volume, lobe_mask, nodules, annotation, prep: PreprocessConfig, patch_size) -> PreparedSample:
    """Preprocess one case and re-derive the patch-level annotation on the canonical grid."""
    v, m, transform = preprocess(volume, lobe_mask, prep)
    moved = [Nodule(transform(n.center), n.radius, n.lobe, n.intensity_delta) for n in nodules]
    pmask = None
    if moved:
        pmask = nodule_patch_mask(moved, v.shape, v.spacing, patch_size)
        if not pmask.any():
            pmask = None
    ann = RegionAnnotation(pmask, annotation.lobe_label, annotation.side_label)
    return PreparedSample(v.data.astype(np.float32), m.data, moved, ann, patch_labels(m.data, patch_size))


@dataclass
class Dataset:
    """Dense tensors for one dataset directory on the canonical grid."""

    sample_ids: list
    records: list
    volumes: torch.Tensor  # [n, D, H, W] float32
    y: torch.Tensor  # [n, 6]
    valid: torch.Tensor  # [n, 6] bool
    nodule_masks: torch.Tensor  # [n, N] bool
    has_mask: torch.Tensor  # [n] bool
    patch_labels: torch.Tensor  # [n, N] uint8
    region_targets: torch.Tensor  # [n] long, -1 = none
    hazards: np.ndarray  # planted yearly hazard per sample (NaN when unknown)
    patient_ids: list

    def __len__(self):
        return len(self.sample_ids)


def load_dataset(dataset_dir, prep: PreprocessConfig, patch_size, censor_mode: str = "zero") -> Dataset:
    root = Path(dataset_dir)
    manifest = read_manifest(root)
    if not manifest.samples:
        raise DataError(f"{root}: manifest lists no samples")
    grid_dims_for(prep.grid_shape, patch_size)
    spec = PhantomSpec.from_dict(manifest.phantom_spec) if manifest.phantom_spec else None

    vols, ys, valids, masks, has, labs, targets, records, hazards = [], [], [], [], [], [], [], [], []
    n_patches = int(np.prod([g // p for g, p in zip(prep.grid_shape, patch_size)]))
    for e in manifest.samples:
        v = read_volume(root / e.volume)
        m = read_volume(root / e.lobe_mask)
        if v.shape != m.shape:
            raise DataError(f"{e.sample_id}: volume {v.shape} and mask {m.shape} differ in shape")
        nodules, ann = read_annotation(root / e.annotation)
        prepared = prepare_sample(v, m, nodules, ann, prep, patch_size)
        rec = e.record()
        lab = build_labels(rec, censor_mode=censor_mode)
        vols.append(torch.from_numpy(prepared.volume))
        ys.append(lab.y)
        valids.append(lab.valid)
        pm = prepared.annotation.nodule_patch_mask
        masks.append(pm if pm is not None else np.zeros(n_patches, dtype=bool))
        has.append(pm is not None)
        labs.append(prepared.patch_labels)
        targets.append(region_target(prepared.annotation))
        records.append(rec)
        hazards.append(yearly_hazard(nodules, spec) if spec is not None else np.nan)
    return Dataset(
        sample_ids=[e.sample_id for e in manifest.samples],
        records=records,
        volumes=torch.stack(vols),
        y=torch.as_tensor(np.stack(ys), dtype=torch.float32),
        valid=torch.as_tensor(np.stack(valids)),
        nodule_masks=torch.as_tensor(np.stack(masks)),
        has_mask=torch.as_tensor(np.array(has)),
        patch_labels=torch.as_tensor(np.stack(labs)),
        region_targets=torch.as_tensor(np.array(targets), dtype=torch.long),
        hazards=np.asarray(hazards, dtype=float),
        patient_ids=[e.patient_id or e.sample_id for e in manifest.samples],
    )
