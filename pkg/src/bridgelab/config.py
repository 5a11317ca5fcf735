"""Training configuration and its flat ``section.key = value`` text form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import SynthParams
from .model import ModelConfig
from .sampling import STRATEGIES
from .schedule import ScheduleParams


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int
    strategy: str = "teacher"
    # model.vocab_size caps the vocabulary; the built model uses the actual size
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=10599))
    schedule: ScheduleParams = field(default_factory=lambda: ScheduleParams(k=5.0, w=20, gamma=0.9))
    schedule_unit: str = "epoch"
    epochs: int = 40
    batch_tokens: int = 512
    learning_rate: float = 7e-4
    checkpoint: str = "model.ckpt"
    log: str | None = None
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    max_responses: int = 20
    drop_contained: bool = False
    synth: SynthParams = field(default_factory=SynthParams)
    beam: int = 5
    greedy: bool = False
    length_penalty: float = 1.0
    max_decode_len: int = 20

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.schedule_unit not in ("epoch", "step"):
            raise ConfigError("schedule.unit must be 'epoch' or 'step'")
        if self.epochs < 1 or self.batch_tokens < 1 or self.beam < 1 or self.max_decode_len < 1:
            raise ConfigError("epochs, batch_tokens, beam and max_decode_len must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if (self.train_path is None) != (self.test_path is None):
            raise ConfigError("data.train and data.test must be given together (or neither, for synthetic data)")

    @property
    def log_path(self) -> str:
        return self.log or str(Path(self.checkpoint).with_suffix(".log"))

    @property
    def uses_synthetic_data(self) -> bool:
        return self.train_path is None

    def data_signature(self) -> tuple:
        """Everything that determines the train/valid/test data."""
        if self.uses_synthetic_data:
            return ("synth", self.synth, self.split_ratios, self.split_seed, self.model.vocab_size)
        return ("files", self.train_path, self.valid_path, self.test_path, self.max_responses,
                self.drop_contained, self.model.vocab_size)

    def check_paths(self) -> None:
        for p in (self.train_path, self.valid_path, self.test_path):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"data file not found: {p}")

    def to_kv(self) -> dict[str, str]:
        kv = {"seed": str(self.seed), "strategy": self.strategy}
        for k, v in self.model.to_dict().items():
            kv[f"model.{k}"] = str(v)
        kv.update({
            "schedule.k": repr(self.schedule.k), "schedule.w": str(self.schedule.w),
            "schedule.gamma": repr(self.schedule.gamma), "schedule.unit": self.schedule_unit,
            "train.epochs": str(self.epochs), "train.batch_tokens": str(self.batch_tokens),
            "train.learning_rate": repr(self.learning_rate), "train.checkpoint": self.checkpoint,
            "data.split": ",".join(repr(r) for r in self.split_ratios),
            "data.split_seed": str(self.split_seed), "data.max_responses": str(self.max_responses),
            "data.drop_contained": str(self.drop_contained).lower(),
            "eval.beam": str(self.beam), "eval.greedy": str(self.greedy).lower(),
            "eval.length_penalty": repr(self.length_penalty), "eval.max_len": str(self.max_decode_len),
        })
        if self.log:
            kv["train.log"] = self.log
        for key, attr in (("data.train", "train_path"), ("data.valid", "valid_path"), ("data.test", "test_path")):
            if getattr(self, attr) is not None:
                kv[key] = getattr(self, attr)
        for f in dataclasses.fields(SynthParams):
            value = getattr(self.synth, f.name)
            kv[f"synth.{f.name}"] = ",".join(map(str, value)) if isinstance(value, tuple) else str(value)
        return kv

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_kv().items())


def parse_kv_text(text: str) -> dict[str, str]:
    kv = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        kv[key.strip()] = value.strip()
    return kv


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


_TOP = {
    "strategy": ("strategy", str),
    "seed": ("seed", int),
    "schedule.unit": ("schedule_unit", str),
    "train.epochs": ("epochs", int),
    "train.batch_tokens": ("batch_tokens", int),
    "train.learning_rate": ("learning_rate", float),
    "train.checkpoint": ("checkpoint", str),
    "train.log": ("log", str),
    "data.train": ("train_path", str),
    "data.valid": ("valid_path", str),
    "data.test": ("test_path", str),
    "data.split": ("split_ratios", _floats),
    "data.split_seed": ("split_seed", int),
    "data.max_responses": ("max_responses", int),
    "data.drop_contained": ("drop_contained", _bool),
    "eval.beam": ("beam", int),
    "eval.greedy": ("greedy", _bool),
    "eval.length_penalty": ("length_penalty", float),
    "eval.max_len": ("max_decode_len", int),
}


def config_from_kv(kv: dict[str, str]) -> TrainConfig:
    """Build a TrainConfig from dotted keys; unknown keys are an error."""
    top: dict[str, Any] = {}
    model: dict[str, Any] = {}
    schedule: dict[str, Any] = {}
    synth: dict[str, Any] = {}
    model_types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    synth_types = {f.name: f.type for f in dataclasses.fields(SynthParams)}
    try:
        for key, value in kv.items():
            if key in _TOP:
                name, conv = _TOP[key]
                top[name] = conv(value)
            elif key.startswith("model."):
                name = key[len("model."):]
                if name not in model_types:
                    raise ConfigError(f"unknown config key {key!r}")
                model[name] = float(value) if "float" in str(model_types[name]) else int(value)
            elif key in ("schedule.k", "schedule.gamma"):
                schedule[key.split(".")[1]] = float(value)
            elif key == "schedule.w":
                schedule["w"] = int(value)
            elif key.startswith("synth."):
                name = key[len("synth."):]
                if name not in synth_types:
                    raise ConfigError(f"unknown config key {key!r}")
                synth[name] = _ints(value) if "tuple" in str(synth_types[name]) else int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if "seed" not in top:
            raise ConfigError("a seed is required (config key 'seed' or --seed)")
        cfg = TrainConfig(**top)
        if model:
            cfg.model = dataclasses.replace(cfg.model, **model)
        if schedule:
            cfg.schedule = dataclasses.replace(cfg.schedule, **schedule)
        if synth:
            cfg.synth = dataclasses.replace(cfg.synth, **synth)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    kv = parse_kv_text(Path(path).read_text(encoding="utf-8")) if path else {}
    kv.update(overrides or {})
    return config_from_kv(kv)
