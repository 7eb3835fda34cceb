"""Experiment configuration: presets, strict parsing, fingerprints.

Configs are human-readable nested YAML documents layered over a scale
preset (``toy`` or ``full``); unknown keys anywhere in the document are
rejected. The ``full`` preset pins the full-scale protocol (lr 1e-4,
betas 0.5/0.999, no weight decay, 1e6 iterations at batch 4, loss
weights 20/10/10/1, mask radius 21); the ``toy`` preset is sized so the
whole verification matrix runs on a desk machine.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from freqreg.adversarial import LossWeights, TrainingMode
from freqreg.data import AugmentationRanges


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 0.0


@dataclass(frozen=True)
class ScheduleConfig:
    iterations: int = 5000
    batch_size: int = 8
    val_interval: int = 200
    checkpoint_interval: int = 2500
    log_interval: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    generator_blocks: int = 3
    generator_base: int = 8
    discriminator_layers: int = 3
    discriminator_base: int = 16
    registration_widths: tuple[int, ...] = (8, 16, 16, 16)


@dataclass(frozen=True)
class AugmentationConfig:
    rotation: float = 10.0
    translation: float = 26.0
    scale: float = 0.1
    noise_scale: float = 1.0

    def ranges(self) -> AugmentationRanges:
        return AugmentationRanges(
            rotation=self.rotation, translation=self.translation, scale=self.scale
        )

    def noise_ranges(self) -> AugmentationRanges:
        return self.ranges().scaled(self.noise_scale)


@dataclass(frozen=True)
class DataConfig:
    synthetic: bool = True
    image_size: int = 64
    train_pairs: int = 384
    val_pairs: int = 16
    test_pairs: int = 48
    root: Optional[str] = None
    source_modality: str = "t1"
    target_modality: str = "t2"
    split_counts: Optional[tuple[int, int, int]] = None
    split_fractions: tuple[float, float, float] = (0.8, 0.04, 0.16)
    blank_max_intensity: float = 0.0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: TrainingMode = field(default_factory=TrainingMode)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    preset: str = "toy"
    deterministic: bool = True
    cycle_literal: bool = False
    threads: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = self.mode.token()
        return d

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


PRESETS: dict[str, dict[str, Any]] = {
    "toy": {
        "mode": "gan",
        "seed": 0,
        "deterministic": True,
        "cycle_literal": False,
        "threads": None,
        "weights": {
            "correction": 20.0,
            "smoothness": 10.0,
            "cycle": 10.0,
            "identity": 1.0,
            "frequency": None,
            "w_freq": None,
            "mask_radius": 6,
        },
        # 5000 toy iterations are too few for the registration network to
        # engage at the full-scale rate; 1e-3 lets the correction mechanism
        # converge on the synthetic task.
        "optimizer": {"lr": 1e-3, "beta1": 0.5, "beta2": 0.999, "weight_decay": 0.0},
        "schedule": {
            "iterations": 5000,
            "batch_size": 8,
            "val_interval": 200,
            "checkpoint_interval": 2500,
            "log_interval": 1,
        },
        "model": {
            "generator_blocks": 3,
            "generator_base": 8,
            "discriminator_layers": 3,
            "discriminator_base": 16,
            "registration_widths": [8, 16, 16, 16],
        },
        "data": {
            "synthetic": True,
            "image_size": 64,
            "train_pairs": 384,
            "val_pairs": 16,
            "test_pairs": 48,
            "root": None,
            "source_modality": "t1",
            "target_modality": "t2",
            "split_counts": None,
            "split_fractions": [0.8, 0.04, 0.16],
            "blank_max_intensity": 0.0,
            "augmentation": {
                "rotation": 10.0,
                "translation": 7.0,
                "scale": 0.1,
                "noise_scale": 1.0,
            },
        },
    },
    "full": {
        "mode": "gan",
        "seed": 0,
        "deterministic": True,
        "cycle_literal": False,
        "threads": None,
        "weights": {
            "correction": 20.0,
            "smoothness": 10.0,
            "cycle": 10.0,
            "identity": 1.0,
            "frequency": None,
            "w_freq": None,
            "mask_radius": 21,
        },
        "optimizer": {"lr": 1e-4, "beta1": 0.5, "beta2": 0.999, "weight_decay": 0.0},
        "schedule": {
            "iterations": 1_000_000,
            "batch_size": 4,
            "val_interval": 1000,
            "checkpoint_interval": 10_000,
            "log_interval": 50,
        },
        "model": {
            "generator_blocks": 9,
            "generator_base": 64,
            "discriminator_layers": 4,
            "discriminator_base": 64,
            "registration_widths": [16, 32, 32, 32],
        },
        "data": {
            "synthetic": False,
            "image_size": 240,
            "train_pairs": 0,
            "val_pairs": 0,
            "test_pairs": 0,
            "root": None,
            "source_modality": "t1",
            "target_modality": "t2",
            "split_counts": [1000, 51, 200],
            "split_fractions": [0.8, 0.04, 0.16],
            "blank_max_intensity": 0.0,
            "augmentation": {
                "rotation": 10.0,
                "translation": 26.0,
                "scale": 0.1,
                "noise_scale": 1.0,
            },
        },
    },
}

# Frequency-loss weight defaults when the config leaves lambda_freq unset:
# the high-frequency band needs the larger weight because its magnitudes
# are far smaller than the low-frequency band's.
DEFAULT_FREQUENCY_LAMBDA = {"off": 0.0, "f_hi": 1.0, "f_low": 0.1, "f_all": 0.1}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class _Section:
    """Strict key consumer: every key must be taken, leftovers are errors."""

    def __init__(self, name: str, data: dict):
        if not isinstance(data, dict):
            raise ValueError(f"config section {name!r} must be a mapping, got {type(data).__name__}")
        self.name = name
        self.data = dict(data)

    def take(self, key: str, default=None):
        return self.data.pop(key, default)

    def finish(self):
        if self.data:
            unknown = ", ".join(sorted(self.data))
            raise ValueError(f"unknown config key(s) in {self.name!r}: {unknown}")


def _parse_mode(value: Any) -> TrainingMode:
    if isinstance(value, TrainingMode):
        return value
    if isinstance(value, str):
        return TrainingMode.parse(value)
    if isinstance(value, dict):
        sec = _Section("mode", value)
        mode = TrainingMode(
            family=sec.take("family", "gan"),
            registration=sec.take("registration", "none"),
            frequency=sec.take("frequency", "off"),
            noise=bool(sec.take("noise", False)),
        )
        sec.finish()
        return mode
    raise ValueError(f"cannot parse training mode from {value!r}")


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build a validated config from a plain dict layered over its preset."""
    if not isinstance(data, dict):
        raise ValueError("config document must be a mapping")
    data = copy.deepcopy(data)
    preset = data.pop("preset", "toy")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    merged = _deep_merge(PRESETS[preset], data)

    top = _Section("config", merged)
    mode = _parse_mode(top.take("mode"))

    wsec = _Section("weights", top.take("weights", {}))
    lambda_freq = wsec.take("frequency")
    if lambda_freq is None:
        lambda_freq = DEFAULT_FREQUENCY_LAMBDA[mode.frequency]
    w_freq = wsec.take("w_freq")
    weights = LossWeights(
        correction=float(wsec.take("correction", 20.0)),
        smoothness=float(wsec.take("smoothness", 10.0)),
        cycle=float(wsec.take("cycle", 10.0)),
        identity=float(wsec.take("identity", 1.0)),
        frequency=float(lambda_freq),
        w_freq=float(w_freq) if w_freq is not None else None,
        mask_radius=int(wsec.take("mask_radius", 21)),
    )
    wsec.finish()

    osec = _Section("optimizer", top.take("optimizer", {}))
    optimizer = OptimizerConfig(
        lr=float(osec.take("lr", 1e-4)),
        beta1=float(osec.take("beta1", 0.5)),
        beta2=float(osec.take("beta2", 0.999)),
        weight_decay=float(osec.take("weight_decay", 0.0)),
    )
    osec.finish()

    ssec = _Section("schedule", top.take("schedule", {}))
    schedule = ScheduleConfig(
        iterations=int(ssec.take("iterations", 5000)),
        batch_size=int(ssec.take("batch_size", 8)),
        val_interval=int(ssec.take("val_interval", 200)),
        checkpoint_interval=int(ssec.take("checkpoint_interval", 2500)),
        log_interval=int(ssec.take("log_interval", 1)),
    )
    ssec.finish()

    msec = _Section("model", top.take("model", {}))
    model = ModelConfig(
        generator_blocks=int(msec.take("generator_blocks", 3)),
        generator_base=int(msec.take("generator_base", 8)),
        discriminator_layers=int(msec.take("discriminator_layers", 3)),
        discriminator_base=int(msec.take("discriminator_base", 16)),
        registration_widths=tuple(int(v) for v in msec.take("registration_widths", [8, 16, 16, 16])),
    )
    msec.finish()

    dsec = _Section("data", top.take("data", {}))
    asec = _Section("data.augmentation", dsec.take("augmentation", {}))
    augmentation = AugmentationConfig(
        rotation=float(asec.take("rotation", 10.0)),
        translation=float(asec.take("translation", 26.0)),
        scale=float(asec.take("scale", 0.1)),
        noise_scale=float(asec.take("noise_scale", 1.0)),
    )
    asec.finish()
    split_counts = dsec.take("split_counts")
    data_cfg = DataConfig(
        synthetic=bool(dsec.take("synthetic", True)),
        image_size=int(dsec.take("image_size", 64)),
        train_pairs=int(dsec.take("train_pairs", 384)),
        val_pairs=int(dsec.take("val_pairs", 16)),
        test_pairs=int(dsec.take("test_pairs", 48)),
        root=dsec.take("root"),
        source_modality=str(dsec.take("source_modality", "t1")),
        target_modality=str(dsec.take("target_modality", "t2")),
        split_counts=tuple(int(v) for v in split_counts) if split_counts else None,
        split_fractions=tuple(float(v) for v in dsec.take("split_fractions", [0.8, 0.04, 0.16])),
        blank_max_intensity=float(dsec.take("blank_max_intensity", 0.0)),
        augmentation=augmentation,
    )
    dsec.finish()

    threads = top.take("threads")
    config = ExperimentConfig(
        mode=mode,
        weights=weights,
        optimizer=optimizer,
        schedule=schedule,
        model=model,
        data=data_cfg,
        seed=int(top.take("seed", 0)),
        preset=preset,
        deterministic=bool(top.take("deterministic", True)),
        cycle_literal=bool(top.take("cycle_literal", False)),
        threads=int(threads) if threads is not None else None,
    )
    top.finish()
    return config


def load_config(
    path: Optional[str | Path] = None,
    preset: Optional[str] = None,
    seed: Optional[int] = None,
    mode: Optional[str] = None,
) -> ExperimentConfig:
    """Load a YAML config file with optional preset/seed/mode overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must contain a mapping")
        data = loaded
    if preset is not None:
        data["preset"] = preset
    if seed is not None:
        data["seed"] = seed
    if mode is not None:
        data["mode"] = mode
    return config_from_dict(data)
