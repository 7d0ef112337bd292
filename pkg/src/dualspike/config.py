"""Experiment configuration: flat INI sections, strict keys, full defaults.

Every key has a default, so an empty file parses to a complete config.
Unknown sections or keys are rejected with their path, and serializing then
parsing a config reproduces it exactly (floats are written with repr).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class DatasetCfg:
    kind: str = "blobs"  # blobs | bars | events | idx
    path: str = ""
    classes: int = 5
    per_class: int = 200
    test_per_class: int = 60
    size: int = 16
    density: float = 0.5
    seed: int = 7


@dataclass
class ModelCfg:
    arch: str = "conv8,spike,pool,conv16,spike,pool,fc"
    timesteps: int = 4
    neuron: str = "lif"  # lif | plif


@dataclass
class TrainCfg:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 1.0
    seed: int = 1


@dataclass
class AttackCfg:
    target_label: int = 0
    poison_ratio: float = 0.03
    poison_weight: float = 1.0
    vthr_nominal: float = 1.0
    tau_nominal: float = 0.5
    vthr_malicious: float = 1.5
    tau_malicious: float = 0.5
    surrogate_slope: float = 2.0
    q: float = 2.0
    beta: float = 0.03
    magnitude_cap: float = 0.3
    baseline_ratio: float = 0.05
    lambda_sim: float = 1.0
    lambda_adv: float = 0.1
    lambda_wmse: float = 1.0
    weight_mode: str = "magnitude"
    alpha_grid: str = "0.1:0.9:9"
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02
    generator_samples: int = 300
    generator_epochs: int = 15
    generator_lr: float = 0.05
    generator_width: int = 8
    generator_seed: int = 2


@dataclass
class EvalCfg:
    vthr_axis: str = "1.0:1.5:11"
    tau_axis: str = "0.3:0.8:6"
    selection: str = "geomean"  # geomean | constrained
    ca_floor: float = 0.0
    probe_q: str = "1,2"
    ratio_axis: str = "0.01,0.02,0.03,0.04,0.05"
    magnitude_axis: str = "0.05,0.1,0.2,0.3,0.4,0.5"
    finetune_fraction: float = 0.05
    finetune_epochs: int = 3
    finetune_lr: float = 0.02
    seed: int = 123
    experiment: str = "desk"


@dataclass
class OutputCfg:
    dir: str = "runs/out"


@dataclass
class ExperimentConfig:
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    attack: AttackCfg = field(default_factory=AttackCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    output: OutputCfg = field(default_factory=OutputCfg)

    def validate(self):
        d, a, e, m = self.dataset, self.attack, self.eval, self.model
        checks = [
            (d.kind in ("blobs", "bars", "events", "idx"), "dataset.kind",
             "must be one of blobs, bars, events, idx"),
            (d.classes >= 2, "dataset.classes", "need at least 2 classes"),
            (0.0 < d.density < 1.0, "dataset.density", "must be in (0, 1)"),
            (m.timesteps >= 1, "model.timesteps", "must be at least 1"),
            (m.neuron in ("lif", "plif"), "model.neuron", "must be lif or plif"),
            (self.train.epochs >= 0, "train.epochs", "must be non-negative"),
            (self.train.batch_size >= 1, "train.batch_size", "must be positive"),
            (0.0 <= a.poison_ratio <= 1.0, "attack.poison_ratio", "must be in [0, 1]"),
            (0.0 < a.tau_nominal <= 1.0, "attack.tau_nominal", "decay factor must be in (0, 1]"),
            (0.0 < a.tau_malicious <= 1.0, "attack.tau_malicious", "decay factor must be in (0, 1]"),
            (a.q > 0.0, "attack.q", "power ratio must be positive"),
            (a.beta >= 0.0, "attack.beta", "noise bound must be non-negative"),
            (a.magnitude_cap >= 0.0, "attack.magnitude_cap", "must be non-negative"),
            (a.surrogate_slope > 0.0, "attack.surrogate_slope", "must be positive"),
            (0 <= a.target_label < d.classes, "attack.target_label", "must be a valid class"),
            (e.selection in ("geomean", "constrained"), "eval.selection",
             "must be geomean or constrained"),
            (0.0 < e.finetune_fraction <= 1.0, "eval.finetune_fraction", "must be in (0, 1]"),
        ]
        for ok, path, msg in checks:
            if not ok:
                raise ConfigError(f"{path}: {msg}")
        for path, text in [("attack.alpha_grid", a.alpha_grid),
                           ("eval.vthr_axis", e.vthr_axis),
                           ("eval.tau_axis", e.tau_axis),
                           ("eval.probe_q", e.probe_q),
                           ("eval.ratio_axis", e.ratio_axis),
                           ("eval.magnitude_axis", e.magnitude_axis)]:
            try:
                parse_axis(text)
            except ValueError as err:
                raise ConfigError(f"{path}: {err}") from None
        return self


_SECTIONS = {
    "dataset": DatasetCfg,
    "model": ModelCfg,
    "train": TrainCfg,
    "attack": AttackCfg,
    "eval": EvalCfg,
    "output": OutputCfg,
}


def parse_axis(text: str) -> list[float]:
    """Parse "start:stop:count" (inclusive linspace) or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected start:stop:count, got {text!r}")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ValueError("count must be at least 1")
        return [float(v) for v in np.linspace(start, stop, count)]
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ValueError(f"empty axis {text!r}")
    return values


def _coerce(section: str, key: str, raw: str, target_type):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {target_type.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        target = getattr(cfg, section)
        known = {f.name: f.type for f in fields(target)}
        types = {f.name: type(getattr(target, f.name)) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{section}.{key}: unknown key")
            setattr(target, key, _coerce(section, key, raw, types[key]))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, _ in _SECTIONS.items():
        target = getattr(cfg, section)
        parser[section] = {}
        for f in fields(target):
            value = getattr(target, f.name)
            parser[section][f.name] = repr(value) if isinstance(value, float) else str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply "section.key=value" strings on top of a parsed config."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        section, key = path.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown key")
        setattr(target, key, _coerce(section, key, raw, type(getattr(target, key))))
    cfg.validate()
    return cfg
