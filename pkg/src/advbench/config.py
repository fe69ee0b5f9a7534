"""Experiment configuration: plain key=value text with [section] headers.

The canonical serialization (sorted sections and keys) feeds the config
hash that every emitted CSV carries, so outputs are traceable to the
exact configuration that produced them.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .attacks import DEFAULT_EPS_MAX


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


@dataclass
class ExperimentConfig:
    # [dataset]
    dataset_kind: str = "synth"
    dataset_path: str = ""
    classes: int = 10
    dim: int = 64
    per_class: int = 600
    train_fraction: float = 0.5
    val_fraction: float = 0.3
    center_norm: float = 0.42
    cluster_std: float = 0.13
    # [model]
    hidden: tuple[int, ...] = (256, 128)
    epochs: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 64
    # [noise]
    noise_epsilons: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    noise_count: int = 128
    detect_epsilon: float = 0.1
    # [attack]
    eps_max: float = DEFAULT_EPS_MAX
    eps_step: float = 0.0  # 0 means the standard 2.5 * eps_max / steps schedule
    steps: int = 50
    kappa: float = 50.0
    alpha: float = 0.25
    noise_draws: int = 10
    target_rule: str = "random-other"
    # [detector]
    det_hidden: tuple[int, ...] = (100, 100)
    det_epochs: int = 200
    det_lr: float = 0.2
    det_patience: int = 25
    fpr_targets: tuple[float, ...] = (0.01, 0.05)
    det_train_samples: int = 400
    det_train_attack: str = "cw"
    calibration_fraction: float = 0.8
    # [armsrace]
    iterations: int = 10
    per_iter_epochs: int = 5
    per_iter_samples: int = 400
    # [run]
    master_seed: int = 1
    out_dir: str = "runs/out"
    workers: int = 1

    _SECTIONS = {
        "dataset": (
            "dataset_kind",
            "dataset_path",
            "classes",
            "dim",
            "per_class",
            "train_fraction",
            "val_fraction",
            "center_norm",
            "cluster_std",
        ),
        "model": ("hidden", "epochs", "lr", "momentum", "batch"),
        "noise": ("noise_epsilons", "noise_count", "detect_epsilon"),
        "attack": (
            "eps_max",
            "eps_step",
            "steps",
            "kappa",
            "alpha",
            "noise_draws",
            "target_rule",
        ),
        "detector": (
            "det_hidden",
            "det_epochs",
            "det_lr",
            "det_patience",
            "fpr_targets",
            "det_train_samples",
            "det_train_attack",
            "calibration_fraction",
        ),
        "armsrace": ("iterations", "per_iter_epochs", "per_iter_samples"),
        "run": ("master_seed", "out_dir", "workers"),
    }

    def __post_init__(self):
        if not 0 < self.train_fraction < 1 or not 0 < self.val_fraction < 1:
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.val_fraction >= 1:
            raise ConfigError("train and validation fractions must leave room for a test split")
        for fpr in self.fpr_targets:
            if not 0 < fpr <= 0.5:
                raise ConfigError(f"FPR target {fpr} outside (0, 0.5]")
        if self.detect_epsilon <= 0:
            raise ConfigError("detect_epsilon must be positive")

    @property
    def test_fraction(self) -> float:
        return 1.0 - self.train_fraction - self.val_fraction

    def serialize(self) -> str:
        """Canonical key=value text: sorted sections, sorted keys."""
        lines = []
        for section in sorted(self._SECTIONS):
            lines.append(f"[{section}]")
            for name in sorted(self._SECTIONS[section]):
                value = getattr(self, name)
                if isinstance(value, tuple):
                    value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
                lines.append(f"{name} = {value}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

        known = {name: section for section, names in cls._SECTIONS.items() for name in names}
        casts = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for section in parser.sections():
            if section not in cls._SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in known or known[key] != section:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                kwargs[key] = cls._convert(key, raw)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.parse(fh.read())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None

    @staticmethod
    def _convert(key: str, raw: str):
        raw = raw.strip()
        tuple_float = {"noise_epsilons", "fpr_targets"}
        tuple_int = {"hidden", "det_hidden"}
        int_keys = {
            "classes", "dim", "per_class", "epochs", "batch", "noise_count", "steps",
            "noise_draws", "det_epochs", "det_patience", "det_train_samples", "iterations",
            "per_iter_epochs", "per_iter_samples", "master_seed", "workers",
        }
        float_keys = {
            "train_fraction", "val_fraction", "center_norm", "cluster_std", "lr", "momentum",
            "detect_epsilon", "eps_max", "eps_step", "kappa", "alpha", "det_lr",
            "calibration_fraction",
        }
        try:
            if key in tuple_float:
                return _floats(raw)
            if key in tuple_int:
                return _ints(raw)
            if key in int_keys:
                return int(raw)
            if key in float_keys:
                return float(raw)
        except ValueError:
            raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None
        return raw

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.serialize())
