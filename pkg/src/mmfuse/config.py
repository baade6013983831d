"""Experiment configuration: nested dataclasses <-> JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .fusion import FusionConfig
from .losses import LossConfig
from .nn import MODALITIES, TASKS, EncoderSpec, ModelConfig, OptimConfig
from .data import SynthConfig


@dataclass
class EncodersConfig:
    slide: EncoderSpec = field(default_factory=lambda: EncoderSpec(hidden_dims=[32], output_dim=16))
    patch: EncoderSpec = field(default_factory=lambda: EncoderSpec(hidden_dims=[16], output_dim=8))
    text: EncoderSpec = field(default_factory=lambda: EncoderSpec(
        kind="embedding", vocab_size=256, embed_dim=16, output_dim=16))
    structured: EncoderSpec = field(default_factory=lambda: EncoderSpec(input_dim=14, output_dim=8))


@dataclass
class ExperimentConfig:
    """Everything one training run depends on.

    ``manifest`` / ``split`` point at files; when ``manifest`` is empty the
    dataset is generated from ``synth`` and split with ``seed``.
    ``up_target`` / ``down_cap`` default to desk scale; the original large
    scale values are 500 / 1000.
    """

    modalities: list = field(default_factory=lambda: list(MODALITIES))
    tasks: list = field(default_factory=lambda: list(TASKS))
    seed: int = 0
    epochs: int = 5
    batch_size: int = 32
    up_target: int = 50
    down_cap: int = 100
    split_fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    resample_patches: bool = False
    ss_includes_lmulti: bool = False
    eval_resamples: int = 1000
    eval_level: float = 0.95
    eval_splits: list = field(default_factory=lambda: ["val", "test"])
    manifest: str = ""
    split: str = ""
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    encoders: EncodersConfig = field(default_factory=EncodersConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ConfigError(f"modalities must be a non-empty subset of {list(MODALITIES)}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("modalities contains duplicates")
        if "patch" in self.modalities and "slide" not in self.modalities:
            raise ConfigError("modalities: patch requires slide")
        if not self.tasks or any(t not in TASKS for t in self.tasks) or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"tasks must be a non-empty subset of {list(TASKS)}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.up_target <= self.down_cap:
            raise ConfigError("need 0 <= up_target <= down_cap")
        if self.eval_resamples < 100:
            raise ConfigError("eval_resamples must be >= 100")
        if any(s not in ("train", "val", "test") for s in self.eval_splits):
            raise ConfigError("eval_splits must name train/val/test")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be 3 numbers summing to 1")

    def single_task(self) -> bool:
        return len(self.tasks) == 1

    def model_config(self, slide_dim, patch_dim) -> ModelConfig:
        enc = self.encoders
        slide = dataclasses.replace(enc.slide, input_dim=slide_dim)
        patch = dataclasses.replace(enc.patch, input_dim=patch_dim)
        order = tuple(m for m in MODALITIES if m in self.modalities)
        tasks = tuple(t for t in TASKS if t in self.tasks)
        return ModelConfig(order, tasks, slide, patch, enc.text, enc.structured,
                           self.fusion, init_seed=self.seed)

    def effective_loss(self) -> LossConfig:
        if self.single_task() and not self.ss_includes_lmulti:
            return dataclasses.replace(self.loss, use_multi=False)
        return self.loss

    def to_dict(self) -> dict:
        return to_dict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif hint is str:
        ok = isinstance(value, str)
    elif hint in (list, tuple) or origin in (list, tuple):
        ok = isinstance(value, (list, tuple))
    elif hint is dict or origin is dict:
        ok = isinstance(value, dict)
    elif origin is typing.Union:
        args = typing.get_args(hint)
        ok = value is None and type(None) in args or any(
            _type_ok(value, a) for a in args if a is not type(None))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {getattr(hint, '__name__', hint)}, got {type(value).__name__}")


def _type_ok(value, hint):
    try:
        _check_type(value, hint, "")
        return True
    except ConfigError:
        return False


def from_dict(cls, obj, path=""):
    """Build dataclass ``cls`` from a JSON object, naming the bad field on error."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"{path + '.' if path else ''}{k}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in obj:
            continue
        sub = f"{path + '.' if path else ''}{f.name}"
        hint = hints[f.name]
        value = obj[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = from_dict(hint, value, sub)
        else:
            _check_type(value, hint, sub)
            if hint is float and isinstance(value, int):
                value = float(value)
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        if path and not msg.startswith(path):
            msg = f"{path}: {msg}"
        raise ConfigError(msg) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return from_dict(ExperimentConfig, obj)


def dumps_config(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2) + "\n"
