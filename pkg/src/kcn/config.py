"""Experiment configuration: a YAML file with a fixed schema.

Every section and key is optional; omitted values take the defaults below.
Unknown keys are rejected so typos cannot silently fall back to defaults.

.. code-block:: yaml

    seed: 0
    dtype: float32              # float32 | float64
    dataset:
      name: mnist               # mnist | cifar10 | svhn
      root: data/mnist          # directory holding the dataset files
      subset_per_class: 200     # null for the full dataset
      subset_seed: 0
      augment_shift: 2          # max random shift in pixels, training only
    model:
      kind: kcn                 # capsnet | kcn | kcn-gp | surrogate
      routing_iterations: 3
      unrolled_routing: false
      init: he                  # he | normal
      init_std: 0.01            # used when init is normal
      recon_weight: 100         # not allowed for kcn-gp
    gp:
      num_inducing: 70
      mc_train: 10
      mc_eval: 64
      inducing_init: data       # data | random
      gamma_init: median        # median | inverse-dim
      warmup_epochs: 1
    optim:
      lr: 0.01
      lr_final: null            # anneal geometrically to this value; null keeps lr constant
      epochs: 30
      batch_size: 32
      patience: 5               # early stop on test accuracy; null disables
    attack:
      grid: [0.0, 0.05, ..., 1.0]     # must start at 0 and increase strictly
      loss_variant: classification   # classification | classification+reconstruction
      surrogate_checkpoint: null
      max_examples: null
    detection:
      epsilon: 0.3
      far: 0.05
      bins: 30
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .data import DATASETS


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str = "mnist"
    root: str = "data/mnist"
    subset_per_class: Optional[int] = 200
    subset_seed: int = 0
    augment_shift: int = 2


@dataclass
class ModelConfig:
    kind: str = "kcn"
    routing_iterations: int = 3
    unrolled_routing: bool = False
    init: str = "he"
    init_std: float = 0.01
    recon_weight: Optional[float] = None  # None means 100 where a decoder exists


@dataclass
class GPConfig:
    num_inducing: int = 70
    mc_train: int = 10
    mc_eval: int = 64
    inducing_init: str = "data"
    gamma_init: str = "median"
    warmup_epochs: int = 1


@dataclass
class OptimConfig:
    lr: float = 1e-2
    lr_final: Optional[float] = None  # None keeps lr constant
    epochs: int = 30
    batch_size: int = 32
    patience: Optional[int] = 5


@dataclass
class AttackConfig:
    grid: List[float] = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(21)])
    loss_variant: str = "classification"
    surrogate_checkpoint: Optional[str] = None
    max_examples: Optional[int] = None


@dataclass
class DetectionConfig:
    epsilon: float = 0.3
    far: float = 0.05
    bins: int = 30


@dataclass
class ExperimentConfig:
    seed: int = 0
    dtype: str = "float32"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    gp: GPConfig = field(default_factory=GPConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)

    @property
    def recon_weight(self) -> float:
        return 100.0 if self.model.recon_weight is None else float(self.model.recon_weight)

    @property
    def has_decoder(self) -> bool:
        return self.model.kind in ("kcn", "capsnet")

    def validate(self) -> "ExperimentConfig":
        m, o, g = self.model, self.optim, self.gp
        _choice("dtype", self.dtype, ("float32", "float64"))
        _choice("dataset.name", self.dataset.name, tuple(DATASETS))
        _choice("model.kind", m.kind, ("capsnet", "kcn", "kcn-gp", "surrogate"))
        _choice("model.init", m.init, ("he", "normal"))
        _choice("gp.inducing_init", g.inducing_init, ("data", "random"))
        _choice("gp.gamma_init", g.gamma_init, ("median", "inverse-dim"))
        _choice("attack.loss_variant", self.attack.loss_variant,
                ("classification", "classification+reconstruction"))
        if not o.lr > 0:
            raise ConfigError(f"optim.lr must be > 0, got {o.lr}")
        if o.lr_final is not None and not o.lr_final > 0:
            raise ConfigError(f"optim.lr_final must be > 0, got {o.lr_final}")
        if o.batch_size < 1:
            raise ConfigError(f"optim.batch_size must be >= 1, got {o.batch_size}")
        if o.epochs < 0:
            raise ConfigError(f"optim.epochs must be >= 0, got {o.epochs}")
        if o.patience is not None and o.patience < 1:
            raise ConfigError(f"optim.patience must be >= 1 or null, got {o.patience}")
        if m.recon_weight is not None:
            if m.kind == "kcn-gp":
                raise ConfigError("kcn-gp has no decoder; remove model.recon_weight")
            if m.recon_weight < 0:
                raise ConfigError(f"model.recon_weight must be >= 0, got {m.recon_weight}")
        if m.routing_iterations < 1:
            raise ConfigError("model.routing_iterations must be >= 1")
        if min(g.num_inducing, g.mc_train, g.mc_eval) < 1:
            raise ConfigError("gp.num_inducing, gp.mc_train and gp.mc_eval must be >= 1")
        if g.warmup_epochs < 0:
            raise ConfigError("gp.warmup_epochs must be >= 0")
        if self.dataset.subset_per_class is not None and self.dataset.subset_per_class < 1:
            raise ConfigError("dataset.subset_per_class must be >= 1 or null")
        if self.dataset.augment_shift < 0:
            raise ConfigError("dataset.augment_shift must be >= 0")
        grid = self.attack.grid
        if not grid or grid[0] != 0 or any(b <= a for a, b in zip(grid, grid[1:])) or grid[-1] > 1:
            raise ConfigError(f"attack.grid must increase strictly from 0 and stay within [0, 1], got {grid}")
        if not 0 < self.detection.far <= 1:
            raise ConfigError("detection.far must lie in (0, 1]")
        if self.detection.bins < 1:
            raise ConfigError("detection.bins must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of every setting that affects results (the dataset location is excluded)."""
        d = self.to_dict()
        d["dataset"].pop("root")
        d["attack"].pop("surrogate_checkpoint")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _choice(name: str, value, allowed) -> None:
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {list(allowed)}, got {value!r}")


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "gp": GPConfig, "optim": OptimConfig,
             "attack": AttackConfig, "detection": DetectionConfig}


def _build(cls, values, where: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    return cls(**values)


def from_dict(values: Optional[dict]) -> ExperimentConfig:
    values = dict(values or {})
    unknown = sorted(set(values) - {"seed", "dtype"} - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    sections = {name: _build(cls, values.pop(name, None), name) for name, cls in _SECTIONS.items()}
    try:
        cfg = ExperimentConfig(**values, **sections)
        cfg.attack.grid = [float(e) for e in cfg.attack.grid]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        values = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(values)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
