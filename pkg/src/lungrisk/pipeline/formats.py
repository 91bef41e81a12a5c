"""On-disk formats: raw volumes with text headers, dataset manifests, checkpoints.

Volume file: ``<stem>.raw`` holds little-endian C-order voxels; ``<stem>.hdr``
is ``key: value`` text (shape, spacing, dtype, order, endianness, origin_offset).
Checkpoint: directory with ``manifest.json`` plus ``params.bin`` / ``optim.bin``
blobs indexed by module path.
"""

from __future__ import annotations

import base64
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..types import Nodule, RegionAnnotation, RiskRecord, Volume

FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "uint8": np.dtype("u1"), "int16": np.dtype("<i2")}


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------- volumes


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".raw", ".hdr") else p


def write_volume(path, v: Volume, dtype: str = "float32") -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(v.data, dtype=_DTYPES[dtype])
    stem.with_suffix(".raw").write_bytes(arr.tobytes(order="C"))
    header = [
        f"shape: {' '.join(str(s) for s in arr.shape)}",
        f"spacing: {' '.join(repr(float(s)) for s in v.spacing)}",
        f"dtype: {dtype}",
        "order: C",
        "endianness: little",
        f"origin_offset: {' '.join(str(o) for o in v.origin_offset)}",
    ]
    stem.with_suffix(".hdr").write_text("\n".join(header) + "\n")
    return stem.with_suffix(".raw")


def read_header(path) -> dict:
    hdr = _stem(path).with_suffix(".hdr")
    try:
        lines = hdr.read_text().splitlines()
    except OSError as e:
        raise DataError(f"missing volume header {hdr}") from e
    out = {}
    for line in lines:
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition(":")
        out[key.strip()] = value.strip()
    for key in ("shape", "spacing", "dtype"):
        if key not in out:
            raise DataError(f"{hdr}: header lacks '{key}'")
    if out.get("order", "C") != "C" or out.get("endianness", "little") != "little":
        raise DataError(f"{hdr}: only C-order little-endian volumes are supported")
    return out


def read_volume(path) -> Volume:
    h = read_header(path)
    shape = tuple(int(s) for s in h["shape"].split())
    spacing = tuple(float(s) for s in h["spacing"].split())
    offset = tuple(int(o) for o in h.get("origin_offset", "0 0 0").split())
    if h["dtype"] not in _DTYPES:
        raise DataError(f"unsupported dtype {h['dtype']}")
    raw = _stem(path).with_suffix(".raw")
    try:
        buf = raw.read_bytes()
    except OSError as e:
        raise DataError(f"missing volume data {raw}") from e
    dt = _DTYPES[h["dtype"]]
    if len(buf) != int(np.prod(shape)) * dt.itemsize:
        raise DataError(f"{raw}: size {len(buf)} bytes does not match header shape {shape} / {h['dtype']}")
    data = np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return Volume(data, spacing, offset)


# ---------------------------------------------------------------- dataset manifest


@dataclass
class ManifestEntry:
    sample_id: str
    volume: str
    lobe_mask: str
    annotation: str
    event: bool
    time_years: float
    patient_id: str = ""

    def record(self) -> RiskRecord:
        return RiskRecord(self.event, self.time_years, self.sample_id)


@dataclass
class Manifest:
    samples: list
    phantom_spec: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "phantom_spec": self.phantom_spec,
            "samples": [vars(s) for s in self.samples],
        }


def write_annotation(path, nodules, ann: RegionAnnotation, patch_size, grid_dims):
    d = {
        "nodules": [n.to_dict() for n in nodules],
        "lobe_label": ann.lobe_label,
        "side_label": ann.side_label,
        "patch_size": list(patch_size),
        "grid_dims": list(grid_dims),
        "nodule_patches": [] if ann.nodule_patch_mask is None else np.flatnonzero(ann.nodule_patch_mask).tolist(),
    }
    Path(path).write_text(json.dumps(d, indent=1))


def read_annotation(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read annotation {path}: {e}") from e
    nodules = [Nodule.from_dict(n) for n in d.get("nodules", [])]
    mask = None
    if d.get("nodule_patches"):
        mask = np.zeros(int(np.prod(d["grid_dims"])), dtype=bool)
        mask[d["nodule_patches"]] = True
    return nodules, RegionAnnotation(mask, d.get("lobe_label"), d.get("side_label"))


def write_manifest(dataset_dir, manifest: Manifest):
    p = Path(dataset_dir) / "manifest.json"
    _atomic_write_bytes(p, json.dumps(manifest.to_dict(), indent=1).encode())


def read_manifest(dataset_dir) -> Manifest:
    p = Path(dataset_dir) / "manifest.json"
    try:
        d = json.loads(p.read_text())
    except FileNotFoundError as e:
        raise DataError(f"no manifest.json in {dataset_dir}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{p}: invalid JSON ({e})") from e
    if d.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{p}: unsupported format_version {d.get('format_version')}")
    try:
        samples = [ManifestEntry(**s) for s in d["samples"]]
    except (KeyError, TypeError) as e:
        raise DataError(f"{p}: malformed sample entry ({e})") from e
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError(f"{p}: duplicate sample ids")
    root = Path(dataset_dir)
    for s in samples:
        for rel in (s.volume, s.lobe_mask, s.annotation):
            if not (root / rel).exists() and not (root / rel).with_suffix(".raw").exists():
                raise DataError(f"{p}: sample {s.sample_id} references missing file {rel}")
        if not s.time_years > 0:
            raise DataError(f"{p}: sample {s.sample_id} has nonpositive time_years")
    return Manifest(samples, d.get("phantom_spec", {}), d["format_version"])


# ---------------------------------------------------------------- checkpoints


def _atomic_write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def pack_tensors(tensors: dict) -> tuple[bytes, list]:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        arr = t.numpy()
        b = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": str(t.dtype).replace("torch.", ""), "shape": list(t.shape),
                      "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    return b"".join(chunks), index


def unpack_tensors(blob: bytes, index: list) -> dict:
    out = {}
    for e in index:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"])), offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("=")).reshape(e["shape"]).copy())
    return out


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    params: dict
    optim: dict | None = None

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def history(self) -> list:
        return self.manifest.get("history", [])


def save_checkpoint(path, params: dict, manifest: dict, optim: dict | None = None) -> Checkpoint:
    """Write a checkpoint directory atomically (temp dir then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=path.name + ".tmp"))
    blob, index = pack_tensors(params)
    (tmp / "params.bin").write_bytes(blob)
    man = dict(manifest)
    man["format_version"] = FORMAT_VERSION
    man["params"] = index
    if optim is not None:
        oblob, oindex = pack_tensors(optim["tensors"])
        (tmp / "optim.bin").write_bytes(oblob)
        man["optim"] = {"index": oindex, "meta": optim["meta"]}
    (tmp / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return Checkpoint(path, man, params, optim)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if (path / "LATEST").exists() and not (path / "manifest.json").exists():
        path = path / (path / "LATEST").read_text().strip()
    try:
        man = json.loads((path / "manifest.json").read_text())
        params = unpack_tensors((path / "params.bin").read_bytes(), man["params"])
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e
    if man.get("format_version") != FORMAT_VERSION:
        raise DataError(f"checkpoint {path}: unsupported format_version")
    optim = None
    if "optim" in man:
        optim = {"tensors": unpack_tensors((path / "optim.bin").read_bytes(), man["optim"]["index"]),
                 "meta": man["optim"]["meta"]}
    return Checkpoint(path, man, params, optim)


def mark_latest(run_dir, name: str):
    _atomic_write_bytes(Path(run_dir) / "LATEST", (name + "\n").encode())


def optimizer_state(opt: torch.optim.Optimizer, names: dict) -> dict:
    """Flatten AdamW state into named tensors + JSON metadata. ``names`` maps param -> name."""
    sd = opt.state_dict()
    params = [p for g in opt.param_groups for p in g["params"]]
    tensors = {}
    for i, p in enumerate(params):
        st = sd["state"].get(i)
        if not st:
            continue
        n = names[p]
        for k, v in st.items():
            if torch.is_tensor(v):
                tensors[f"{n}/{k}"] = v
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items() if k != "params"}
              for g in sd["param_groups"]]
    order = [names[p] for p in params]
    return {"tensors": tensors, "meta": {"param_groups": groups, "order": order,
                                         "group_sizes": [len(g["params"]) for g in sd["param_groups"]]}}


def restore_optimizer(opt: torch.optim.Optimizer, names: dict, saved: dict):
    params = [p for g in opt.param_groups for p in g["params"]]
    order = [names[p] for p in params]
    if order != saved["meta"]["order"]:
        raise DataError("optimizer parameter order differs from checkpoint")
    state = {}
    for i, n in enumerate(order):
        entry = {k.split("/", 1)[1]: v for k, v in saved["tensors"].items() if k.split("/", 1)[0] == n}
        if entry:
            state[i] = entry
    sd = opt.state_dict()
    groups = []
    for g, meta in zip(sd["param_groups"], saved["meta"]["param_groups"]):
        ng = dict(g)
        ng.update({k: (tuple(v) if k == "betas" else v) for k, v in meta.items()})
        groups.append(ng)
    opt.load_state_dict({"state": state, "param_groups": groups})


def rng_state_b64() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()


def set_rng_state_b64(s: str):
    torch.set_rng_state(torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy()))
