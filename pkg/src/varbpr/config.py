"""Experiment configuration: a single JSON file drives every CLI command.

The schema is documented in the README; every field has a default except the
dataset path, and every hyperparameter of the method is overridable. Config
validation failures raise ConfigError, which the CLI maps to exit code 2.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .dataio import FORMATS
from .evaluation import EvalSettings
from .inference import InferenceConfig
from .learning import LOSS_KINDS, TrainConfig

SPLITS = ("clean_test", "implicit_80_20")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass
class DatasetSection:
    path: str = ""
    format: str = "ml100k_tab"
    split: str = "clean_test"
    test_fraction: float = 0.2


@dataclass
class ModelSection:
    d: int = 64
    lr: float = 1e-3
    l2: float = 1e-4
    epochs: int = 100
    seed: int = 0
    batch_size: int = 512


@dataclass
class LossSection:
    kind: str = "varbpr"
    m: int = 4
    n: int = 4
    c_pos: float = 1.0
    c_neg: float = 1.0
    tau: float = 1.0
    lambda_pos: tuple[float, float, float] = (0.0, 0.5, 0.5)
    lambda_neg: tuple[float, float, float] = (0.0, 0.25, 0.5)


@dataclass
class EvalSection:
    k: int = 20
    eval_every: int = 1
    probe_bags: int = 2048
    likelihood_samples: int = 100


@dataclass
class NoiseSection:
    rate: float = 0.0


@dataclass
class OutputSection:
    directory: str = "runs/out"


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalSection = field(default_factory=EvalSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> "ExperimentConfig":
        if not self.dataset.path:
            raise ConfigError("dataset.path is required")
        if not os.path.exists(self.dataset.path):
            raise ConfigError(f"dataset.path does not exist: {self.dataset.path}")
        if self.dataset.format not in FORMATS:
            raise ConfigError(f"dataset.format must be one of {FORMATS}, got {self.dataset.format!r}")
        if self.dataset.split not in SPLITS:
            raise ConfigError(f"dataset.split must be one of {SPLITS}, got {self.dataset.split!r}")
        if not (0.0 < self.dataset.test_fraction < 1.0):
            raise ConfigError(f"dataset.test_fraction must be in (0, 1), got {self.dataset.test_fraction}")
        if self.loss.kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}, got {self.loss.kind!r}")
        if not (0.0 <= self.noise.rate < 1.0):
            raise ConfigError(f"noise.rate must be in [0, 1), got {self.noise.rate}")
        try:
            self.to_train_config().validate()
            self.to_eval_settings().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_train_config(self) -> TrainConfig:
        m, n = (1, 1) if self.loss.kind == "bpr" else (self.loss.m, self.loss.n)
        return TrainConfig(
            loss=self.loss.kind,
            d=self.model.d,
            lr=self.model.lr,
            l2=self.model.l2,
            epochs=self.model.epochs,
            m=m,
            n=n,
            seed=self.model.seed,
            batch_size=self.model.batch_size,
            inference=InferenceConfig(
                c_pos=self.loss.c_pos,
                c_neg=self.loss.c_neg,
                tau=self.loss.tau,
                lambda_pos=tuple(self.loss.lambda_pos),
                lambda_neg=tuple(self.loss.lambda_neg),
            ),
        )

    def to_eval_settings(self) -> EvalSettings:
        return EvalSettings(
            k=self.eval.k,
            eval_every=self.eval.eval_every,
            probe_bags=self.eval.probe_bags,
            likelihood_samples=self.eval.likelihood_samples,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Shallow-copy with replaced sections (each a fresh dataclass)."""
        current = {
            "dataset": self.dataset,
            "model": self.model,
            "loss": self.loss,
            "eval": self.eval,
            "noise": self.noise,
            "output": self.output,
        }
        current.update(sections)
        return ExperimentConfig(**current)


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "loss": LossSection,
    "eval": EvalSection,
    "noise": NoiseSection,
    "output": OutputSection,
}


def _build_section(name: str, cls, data: dict):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("lambda_pos", "lambda_neg"):
        if key in kwargs:
            val = kwargs[key]
            if not isinstance(val, (list, tuple)) or len(val) != 3:
                raise ConfigError(f"{name}.{key} must be a list of three numbers")
            kwargs[key] = tuple(float(v) for v in val)
    return cls(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment config."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        payload = data.get(name, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"config section '{name}' must be an object")
        sections[name] = _build_section(name, cls, payload)
    return ExperimentConfig(**sections).validate()
