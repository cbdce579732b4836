"""Experiment configuration: a strict JSON document with documented defaults.

Unknown keys are rejected at every nesting level. See ``README.md`` for the
full key reference.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .attacks import AttackConfig
from .data import ToyConfig
from .errors import ConfigError, SpecError
from .model import MlpSpec
from .objectives import LossConfig
from .training import LambdaSchedule, PiatConfig, TrainConfig

SEED_ENV = "ADVLAB_SEED"
TEST_SEED_OFFSET = 1000


@dataclass(frozen=True)
class DataSection:
    n_per_class: int = 500
    sigma: float = 0.2
    rho1: float = 0.35
    rho2: float = 1.0
    alpha1: float = 0.80
    beta1: float = 0.85
    alpha2: float = 0.80
    beta2: float = 0.85
    # None: derived from the experiment seed (train: seed, test: seed + 1000)
    train_seed: Optional[int] = None
    test_seed: Optional[int] = None
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 50
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    attack_name: str = "pgd"
    lr_schedule: tuple = ()
    record_wall_time: bool = False


@dataclass(frozen=True)
class AnalysisSection:
    track_boundary: bool = True
    boundary_resolution: int = 100
    boundary_x1_range: tuple = (-1.5, 1.5)
    boundary_x2_range: tuple = (-1.5, 1.5)
    boundary_x3: float = 0.825
    landscape_grid_n: int = 21
    landscape_variants: tuple = ("clean", "pgd")
    landscape_eval_size: int = 256
    eval_attacks: tuple = ("fgsm", "ifgsm", "mifgsm", "pgd")
    theorem_lambdas: tuple = (0.5, 0.9, 0.99)
    theorem_shrinks: tuple = (1e-2, 1e-3, 1e-4)
    theorem_probes: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: MlpSpec = field(default_factory=MlpSpec)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    piat: PiatConfig = field(default_factory=PiatConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    # --- derived domain objects ---

    def toy_config(self, split: str = "train") -> ToyConfig:
        d = self.data
        if split == "train":
            seed = self.seed if d.train_seed is None else d.train_seed
        else:
            seed = self.seed + TEST_SEED_OFFSET if d.test_seed is None else d.test_seed
        cfg = ToyConfig(d.n_per_class, d.sigma, d.rho1, d.rho2, d.alpha1, d.beta1, d.alpha2, d.beta2, seed)
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        t = self.train
        cfg = TrainConfig(
            epochs=t.epochs, lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay,
            batch_size=t.batch_size, attack_name=t.attack_name, attack=self.attack, loss=self.loss,
            piat=self.piat, seed=self.seed, lr_schedule=tuple(tuple(x) for x in t.lr_schedule),
            record_wall_time=t.record_wall_time,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.toy_config("train")
        self.train_config()
        a = self.analysis
        if a.boundary_resolution < 2 or a.landscape_grid_n < 3 or a.theorem_probes < 1:
            raise ConfigError("analysis: boundary_resolution >= 2, landscape_grid_n >= 3 and theorem_probes >= 1 required")
        for v in a.landscape_variants:
            if v not in ("clean", "pgd"):
                raise ConfigError(f"analysis.landscape_variants: unknown variant {v!r}")

    def to_dict(self) -> dict:
        return _to_jsonable(self)


def _to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _check_scalar(hint, value, path: str) -> None:
    args = typing.get_args(hint)
    if typing.get_origin(hint) is typing.Union and type(None) in args:
        if value is None:
            return
        hint = next(a for a in args if a is not type(None))
    ok = {
        bool: lambda v: isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
    }.get(hint)
    if ok is not None and not ok(value):
        raise ConfigError(f"{path}: expected {hint.__name__}, got {value!r}")


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            _check_scalar(hint, value, sub)
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, SpecError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(raw: dict, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Build a config; seed precedence is flag, then file, then ADVLAB_SEED, then 0."""
    raw = dict(raw)
    if seed_override is not None:
        raw["seed"] = seed_override
    elif "seed" not in raw and os.environ.get(SEED_ENV):
        try:
            raw["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    cfg = _build(ExperimentConfig, raw, "")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError(f"seed must be an integer, got {cfg.seed!r}")
    try:
        cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"config value has the wrong type: {exc}") from None
    return cfg


def read_config_file(path) -> dict:
    """Load a JSON config, or the ``config`` block of a run manifest."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(raw, dict) and raw.get("tool") == "advlab" and "config" in raw:
        return raw["config"]
    return raw


def override(cfg: ExperimentConfig, section: Optional[str], **values) -> ExperimentConfig:
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section is None:
        return dataclasses.replace(cfg, **values)
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})


__all__ = [
    "AnalysisSection", "DataSection", "ExperimentConfig", "TrainSection", "LambdaSchedule",
    "config_from_dict", "read_config_file", "override", "SEED_ENV",
]
