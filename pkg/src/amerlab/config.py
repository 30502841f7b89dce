"""One TOML file drives every stage; dotted ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import tomli
import tomli_w

from amerlab.errors import ConfigError
from amerlab.evaluate import EvalConfig
from amerlab.seqmodel import ModelConfig
from amerlab.synthgen import parse_kind, parse_setting
from amerlab.trainer import TrainConfig


@dataclass
class DataConfig:
    setting: str = "multi"
    transform: str = "mlp"
    d: int = 64
    m: int = 5
    n_train: int = 2000
    n_test: int = 200
    corpus_size: int = 20000
    normalize_inputs: bool = False

    def validate(self):
        parse_setting(self.setting)
        parse_kind(self.transform)
        if self.d < 2 or self.n_train < 2 or self.n_test < 1:
            raise ConfigError("data.d, data.n_train must be >= 2 and data.n_test >= 1")
        if not 2 <= self.m <= 5:
            raise ConfigError("data.m must lie in [2, 5]")
        return self


@dataclass
class ModelSection:
    h: int = 128
    layers: int = 2
    heads: int = 4
    max_len: int = 6
    mlp_ratio: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0 = all cores
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.data.d, **dataclasses.asdict(self.model)).validate()

    def train_config(self) -> TrainConfig:
        """Training section with the run seed and data m applied."""
        return dataclasses.replace(self.train, seed=self.seed, m=self.data.m).validate()

    def validate(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.data.validate()
        self.model_config()
        self.train_config()
        self.eval.validate()
        return self

    def to_toml(self) -> str:
        d = dataclasses.asdict(self)
        d["train"].pop("seed")
        d["train"].pop("m")
        d["eval"]["ks"] = list(d["eval"]["ks"])
        d["eval"]["lambdas"] = list(d["eval"]["lambdas"])
        if d["eval"]["m_pred"] is None:
            del d["eval"]["m_pred"]
        return tomli_w.dumps(d)


_SECTIONS = {"data": DataConfig, "model": ModelSection, "train": TrainConfig, "eval": EvalConfig}
_TOP = {"seed", "threads"}


def _coerce(cls, key, value, where):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown config key {where}")
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{where} expects a boolean")
            return value.lower() in ("true", "1")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        try:
            return tuple(type(default[0])(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects a list") from None
    try:
        if isinstance(default, int) or (default is None and key == "m_pred"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} expects a number, got {value!r}") from None
    return str(value)


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key in _TOP:
            setattr(cfg, key, _coerce(RunConfig, key, value, key) if key != "seed" else _seed(value))
        elif key in _SECTIONS and isinstance(value, dict):
            sec = getattr(cfg, key)
            for k, v in value.items():
                setattr(sec, k, _coerce(_SECTIONS[key], k, v, f"{key}.{k}"))
        else:
            raise ConfigError(f"unknown config key {key}")
    return cfg


def _seed(value) -> int:
    try:
        s = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= s < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return s


def load(path=None, overrides=()) -> RunConfig:
    """Read a TOML config (or defaults) and apply ``section.key=value`` overrides."""
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from None
    cfg = from_dict(raw)
    for item in overrides:
        apply_override(cfg, item)
    return cfg.validate()


def apply_override(cfg: RunConfig, item: str):
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not key=value")
    key = key.strip()
    value = value.strip()
    if key in _TOP:
        setattr(cfg, key, _seed(value) if key == "seed" else _coerce(RunConfig, key, value, key))
        return
    sec, _, name = key.partition(".")
    if sec not in _SECTIONS or not name:
        raise ConfigError(f"unknown config key {key}")
    setattr(getattr(cfg, sec), name, _coerce(_SECTIONS[sec], name, value, key))
