"""Experiment configuration (a single JSON file)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..core.trainer import TrainConfig
from ..errors import ConfigError

OUTPUT_ROOT_ENV = "QNN_OUTPUT_ROOT"


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "digits"
    dataset_path: str | None = None
    dataset_options: dict = field(default_factory=dict)
    # model
    model: str = "toy_resnet"
    model_options: dict = field(default_factory=lambda: {"base": 4})
    weight_bits: int = 1
    act_bits: int = 1
    width: float = 2.0
    # sweeps
    widths: list = field(default_factory=lambda: [1, 2])
    bits: list = field(default_factory=lambda: [1, 4])
    lambdas: list = field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    # slimming
    lam: float = 1e-3
    threshold: float = 0.01
    gamma_init: float = 0.5
    # distillation; teacher is "baseline" (the full-precision baseline stage) or a model file
    distill: bool = True
    teacher: str = "baseline"
    tau: float = 10.0
    mu: float = 0.2
    # training
    seeds: list = field(default_factory=lambda: [0])
    epochs: int = 15
    retrain_epochs: int | None = None
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-5
    schedule: str = "cosine"
    bn_finetune_epochs: int = 0
    dtype: str = "float32"
    # output
    output_dir: str = "runs/default"
    bench_repeats: int = 3
    features: str | None = None  # feature matrix for the embed subcommand
    embed_m: int | None = None
    embed_gamma: float = 1.0
    embed_beta: float = 1e-2
    embed_rounds: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("weight_bits", "act_bits"):
            if not 1 <= int(getattr(self, name)) <= 32:
                raise ConfigError(f"{name} must be in 1..32")
        if any(float(w) <= 0 for w in self.widths) or self.width <= 0:
            raise ConfigError("widths must be positive")
        if self.threshold < 0 or self.lam < 0 or any(v < 0 for v in self.lambdas):
            raise ConfigError("threshold and sparsity weights must be >= 0")
        if not self.tau > 0 or self.mu < 0:
            raise ConfigError("distillation needs tau > 0 and mu >= 0")
        if self.schedule not in ("cosine", "constant", "step"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.epochs < 0 or (self.retrain_epochs is not None and self.retrain_epochs < 0):
            raise ConfigError("epochs must be >= 0")
        for label, p in (("dataset_path", self.dataset_path), ("features", self.features)):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{label} {p!r} does not exist")
        if self.distill and self.teacher != "baseline" and not Path(self.teacher).exists():
            raise ConfigError(f"teacher model {self.teacher!r} does not exist")

    # -- derived -----------------------------------------------------------
    def train_config(self, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
                           lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           schedule=self.schedule, seed=int(seed))

    @property
    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            return Path(root) / p
        return p

    # -- io ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d)
