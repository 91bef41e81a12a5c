"""Hierarchical YAML configuration."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from ..encoder import EncoderConfig
from ..losses import LossWeights
from ..mim import DecoderConfig
from ..phantom import PhantomSpec
from ..preproc import PreprocessConfig, WindowSpec


class ConfigError(ValueError):
    pass


REGIMES = {
    # regime -> (KL term on nodule masks, region term on lobe/side labels)
    "expert": (True, True),
    "lobes": (False, True),
    "none": (False, False),
}


@dataclass
class TrainConfig:
    phase: str = "finetune"
    epochs: int = 10
    batch_size: int = 8
    peak_lr: float = 5.0e-5
    floor_lr: float = 5.0e-10
    warmup_fraction: float = 0.1
    frozen_epochs: int = 2
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    mask_ratio: float = 0.75
    masked_only: bool = True
    norm_pix: bool = False
    probe_size: int = 16
    schedule: str = "cycles"  # "cycles" (two warmup/cosine cycles) or "constant"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.frozen_epochs <= self.epochs:
            raise ConfigError("frozen_epochs must be within [0, epochs]")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.schedule not in ("cycles", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        base = dict(phase="pretrain", epochs=120, peak_lr=3.0e-4, floor_lr=3.0e-4, warmup_fraction=0.0,
                    frozen_epochs=0, schedule="constant")
        base.update(kw)
        return cls(**base)

    @classmethod
    def finetune_defaults(cls, **kw) -> "TrainConfig":
        return cls(**kw)


@dataclass
class ModelConfig:
    patch_size: tuple = (8, 8, 8)
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk_scale)
    decoder: DecoderConfig = field(default_factory=DecoderConfig.desk_scale)
    pool_heads: int | None = None
    increment: str = "relu"

    def __post_init__(self):
        self.patch_size = tuple(self.patch_size)


@dataclass
class LossConfig:
    lambda_kl: float = 1.0
    lambda_region: float = 1.0
    censor_mode: str = "zero"
    aiag_per_head: bool = False

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_kl, self.lambda_region)


@dataclass
class DataConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_train: int = 512
    n_test: int = 128
    n_aiag_eval: int = 128


@dataclass
class EvalConfig:
    n_boot: int = 1000
    alpha: float = 0.05
    score_rule: str = "year6"
    patient_level: bool = False
    plots: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig.pretrain_defaults(epochs=20))
    finetune: TrainConfig = field(default_factory=TrainConfig.finetune_defaults)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    regimes: list = field(default_factory=lambda: ["expert", "lobes", "none"])

    def __post_init__(self):
        unknown = [r for r in self.regimes if r not in REGIMES]
        if unknown:
            raise ConfigError(f"unknown regimes {unknown}; choose from {sorted(REGIMES)}")
        grid = tuple(self.preprocess.grid_shape)
        for ax, (g, p) in enumerate(zip(grid, self.model.patch_size)):
            if g % p:
                raise ConfigError(f"preprocess.grid_shape axis {ax} ({g}) not divisible by patch size {p}")

    @property
    def grid_dims(self) -> tuple:
        return tuple(g // p for g, p in zip(self.preprocess.grid_shape, self.model.patch_size))

    def with_regime(self, regime: str) -> "ExperimentConfig":
        """Copy whose loss weights switch AIAG terms on/off for the given supervision regime."""
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}")
        use_kl, use_region = REGIMES[regime]
        cfg = copy.deepcopy(self)
        base = self.loss
        cfg.loss.lambda_kl = base.lambda_kl if use_kl else 0.0
        cfg.loss.lambda_region = base.lambda_region if use_region else 0.0
        return cfg

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    ExperimentConfig: {
        "data": DataConfig, "preprocess": PreprocessConfig, "model": ModelConfig,
        "pretrain": TrainConfig, "finetune": TrainConfig, "loss": LossConfig, "eval": EvalConfig,
    },
    DataConfig: {"phantom": PhantomSpec},
    PreprocessConfig: {"window": WindowSpec},
    ModelConfig: {"encoder": EncoderConfig, "decoder": DecoderConfig},
}


def _build(cls, d, path, defaults=None):
    if isinstance(d, cls):
        return d
    if d is None:
        return defaults if defaults is not None else cls()
    if isinstance(d, (list, tuple)) and cls is WindowSpec:
        d = {"low": d[0], "high": d[1]}
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    base = asdict(defaults) if defaults is not None else {}
    for k, v in d.items():
        sub = _NESTED.get(cls, {}).get(k)
        if sub is not None:
            kwargs[k] = _build(sub, v, f"{path}.{k}" if path else k, getattr(defaults, k, None) if defaults else None)
        else:
            kwargs[k] = v
    if cls is TrainConfig and defaults is not None:
        merged = {**base, **kwargs}
        kwargs = merged
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    defaults = ExperimentConfig()
    # phase-specific defaults survive partial overrides
    for phase in ("pretrain", "finetune"):
        if phase in d and isinstance(d[phase], dict):
            d[phase] = _build(TrainConfig, d[phase], phase, getattr(defaults, phase))
    return _build(ExperimentConfig, d, "")


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e
    return config_from_dict(raw or {})


def dump_config(cfg: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
