"""Configuration dataclasses and the flat key-value config file format.

A config file (YAML or JSON) is a single flat mapping. Every key belongs to
exactly one section below; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

ABLATABLE_TERMS = ("cycle", "identity", "same-content", "same-style", "domain", "adversarial")


@dataclass
class AudioConfig:
    sample_rate: int = 22050
    n_mels: int = 80
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    fmin: float = 0.0
    fmax: float | None = None
    center: bool = False
    log_floor: float = 1e-5
    segment_frames: int = 128
    short_policy: str = "reflect"  # reflect | tile
    eval_count_per_speaker: int = 35

    def validate(self) -> None:
        for name in ("sample_rate", "n_mels", "n_fft", "win_length", "hop_length", "segment_frames"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.win_length > self.n_fft:
            raise ConfigError("win_length must not exceed n_fft")
        if self.short_policy not in ("reflect", "tile"):
            raise ConfigError(f"short_policy must be 'reflect' or 'tile', got {self.short_policy!r}")
        if self.eval_count_per_speaker < 0:
            raise ConfigError("eval_count_per_speaker must be >= 0")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


@dataclass
class ModelConfig:
    conv_channels: int = 512
    kernel_size: int = 5
    rnn_hidden: int = 512
    content_dim: int = 128
    style_dim: int = 128
    mlp_hidden: int = 256
    disc_channels: int = 256
    conditioning: str = "concat"  # concat | adain
    grl_placement: str = "voice_discriminator"  # voice_discriminator | content_classifier | both

    def validate(self) -> None:
        for name in ("conv_channels", "kernel_size", "rnn_hidden", "content_dim", "style_dim",
                     "mlp_hidden", "disc_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd so 'same' padding keeps the frame count")
        if self.conditioning not in ("concat", "adain"):
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        if self.grl_placement not in ("voice_discriminator", "content_classifier", "both"):
            raise ConfigError(f"unknown grl_placement {self.grl_placement!r}")


@dataclass
class LossWeights:
    """Weights of the five terms in the total objective."""

    w_cycle: float = 5.0
    w_id: float = 2.0
    w_adv: float = 1.0
    w_domain: float = 10.0
    w_same: float = 50.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


@dataclass
class TrainingConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-9
    lr_initial: float = 1e-4
    lr_decay_per_epoch: float = 5e-6
    lr_decay_mode: str = "subtractive"  # subtractive | multiplicative
    lr_floor: float = 1e-6
    epochs: int = 1
    steps_per_epoch: int | None = None  # None: ceil(train utterances / batch_size)
    batch_size: int = 8
    same_loss_stage: str = "second"  # first | second
    same_loss_gradient: str = "generator"  # full | stop_target | generator
    seed: int = 0
    ablate: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.lr_decay_mode not in ("subtractive", "multiplicative"):
            raise ConfigError(f"unknown lr_decay_mode {self.lr_decay_mode!r}")
        if self.same_loss_stage not in ("first", "second"):
            raise ConfigError(f"same_loss_stage must be 'first' or 'second', got {self.same_loss_stage!r}")
        if self.same_loss_gradient not in ("full", "stop_target", "generator"):
            raise ConfigError(f"unknown same_loss_gradient {self.same_loss_gradient!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            raise ConfigError("steps_per_epoch must be positive")
        if self.lr_initial <= 0 or self.lr_floor < 0:
            raise ConfigError("lr_initial must be > 0 and lr_floor >= 0")
        bad = [t for t in self.ablate if t not in ABLATABLE_TERMS]
        if bad:
            raise ConfigError(f"unknown ablation term(s) {bad}; choose from {list(ABLATABLE_TERMS)}")

    def enabled_terms(self) -> dict[str, bool]:
        """Loss-term switches keyed by report field name (``same_style`` ...)."""
        return {t.replace("-", "_"): t not in self.ablate for t in ABLATABLE_TERMS}


@dataclass
class EvalConfig:
    mcep_order: int = 34
    mcep_alpha: float = 0.455
    include_c0: bool = False

    def validate(self) -> None:
        if self.mcep_order < 1:
            raise ConfigError("mcep_order must be >= 1")
        if not -1 < self.mcep_alpha < 1:
            raise ConfigError("mcep_alpha must lie in (-1, 1)")


_SECTIONS = {
    "audio": AudioConfig,
    "model": ModelConfig,
    "weights": LossWeights,
    "training": TrainingConfig,
    "evaluation": EvalConfig,
}
_PATH_KEYS = ("data_root", "work_dir", "checkpoint_path", "manifest_path")


def _section_keys() -> dict[str, str]:
    owner = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name == "weights":
                continue
            owner[f.name] = section
    for key in _PATH_KEYS:
        owner[key] = "paths"
    return owner


@dataclass
class AppConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    data_root: str | None = None
    work_dir: str = "work"
    checkpoint_path: str | None = None
    manifest_path: str = "manifest.jsonl"

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "AppConfig":
        owner = _section_keys()
        unknown = sorted(k for k in values if k not in owner)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        grouped: dict[str, dict[str, Any]] = {name: {} for name in (*_SECTIONS, "paths")}
        for key, value in values.items():
            grouped[owner[key]][key] = value
        try:
            weights = LossWeights(**grouped["weights"])
            training = TrainingConfig(weights=weights, **grouped["training"])
            cfg = cls(
                audio=AudioConfig(**grouped["audio"]),
                model=ModelConfig(**grouped["model"]),
                training=training,
                evaluation=EvalConfig(**grouped["evaluation"]),
                **grouped["paths"],
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if isinstance(cfg.training.ablate, str):
            cfg.training.ablate = [cfg.training.ablate]
        cfg.validate()
        return cfg

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for section in (self.audio, self.model, self.training.weights, self.evaluation):
            flat.update(dataclasses.asdict(section))
        training = dataclasses.asdict(self.training)
        training.pop("weights")
        flat.update(training)
        for key in _PATH_KEYS:
            flat[key] = getattr(self, key)
        return flat

    def validate(self) -> None:
        self.audio.validate()
        self.model.validate()
        self.training.validate()
        self.evaluation.validate()

    def resolved_work_dir(self) -> Path:
        return Path(os.environ.get("DRVC_WORK_DIR") or self.work_dir)


def load_config(path: str | os.PathLike | None) -> AppConfig:
    """Read a flat YAML/JSON config; ``None`` gives all defaults."""
    if path is None:
        return AppConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        values = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must hold a flat key-value mapping")
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; nested sections found: {nested}")
    return AppConfig.from_flat(values)


def save_config(cfg: AppConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True), encoding="utf-8")
