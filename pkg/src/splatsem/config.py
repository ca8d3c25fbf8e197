"""Run configuration: INI sections mapped onto typed dataclasses.

Unknown sections or keys are rejected so typos fail loudly.  Values are
parsed according to the type of the field's default.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .losses import LossWeights
from .nn.model import NetworkSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    scenes: tuple = ()
    fields: tuple = ()
    labels: tuple = ()
    compressed: tuple = ()
    activation: str = "activated"


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.006
    weight_decay: float = 0.05
    pct_start: float = 0.05
    div_factor: float = 10.0
    final_div_factor: float = 1000.0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    checkpoint_every: int = 500
    max_tokens: int = 4096
    augment: bool = True
    objectives: tuple = ("mgm", "dino", "ibot", "la")
    n_global: int = 2
    n_local: int = 3
    ibot_ratio_min: float = 0.2
    ibot_ratio_max: float = 0.7
    masked_global_fraction: float = 0.5
    mgm_ratio: float = 0.6
    grid_size: float = 0.05
    ema_momentum: float = 0.996
    min_class_size: int = 10
    learn_tau: bool = True
    cr_eps: float = 0.5
    sim_proj: tuple = (64, 64, 32)
    ibot_proj: tuple = (32, 32, 16)
    crop_global_min: float = 0.4
    crop_global_max: float = 1.0
    crop_local_min: float = 0.1
    crop_local_max: float = 0.4

    def validate(self):
        fracs = ("ibot_ratio_min", "ibot_ratio_max", "masked_global_fraction", "mgm_ratio",
                 "ema_momentum")
        for k in fracs:
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ConfigError(f"train.{k} must lie in [0, 1]")
        if self.ibot_ratio_min > self.ibot_ratio_max:
            raise ConfigError("train.ibot_ratio_min exceeds ibot_ratio_max")
        if self.ema_momentum >= 1.0:
            raise ConfigError("train.ema_momentum must be below 1")
        unknown = set(self.objectives) - {"mgm", "dino", "ibot", "la"}
        if unknown:
            raise ConfigError(f"train.objectives: unknown {sorted(unknown)}")
        for k in ("steps", "checkpoint_every", "max_tokens", "n_global", "n_local",
                  "min_class_size"):
            if getattr(self, k) < 0:
                raise ConfigError(f"train.{k} must be non-negative")
        if self.n_global < 1 or self.max_tokens < 1 or self.grid_size <= 0:
            raise ConfigError("train.n_global, max_tokens and grid_size must be positive")


@dataclass(frozen=True)
class AutoencoderConfig:
    encoder: tuple = (768, 384, 192, 96, 48, 16)
    decoder: tuple = (16, 48, 96, 192, 384, 768)
    steps: int = 1500
    batch: int = 64
    lr: float = 0.001
    weight_decay: float = 0.0
    holdout: float = 0.2

    def validate(self):
        if self.encoder[-1] != self.decoder[0] or self.encoder[0] != self.decoder[-1]:
            raise ConfigError("autoencoder: encoder/decoder widths do not meet")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("autoencoder.holdout must lie in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 25
    background: tuple = ("wall", "floor", "ceiling")
    top_fraction: float = 0.02
    min_frames: int = 400
    sharpness_min: float = 100.0 / 255.0 ** 2
    psnr_min: float = 20.0

    def validate(self):
        if self.k < 1:
            raise ConfigError("eval.k must be at least 1")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("eval.top_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: NetworkSpec = field(default_factory=NetworkSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
            self.loss.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.optim.lr <= 0 or self.optim.weight_decay < 0:
            raise ConfigError("optim.lr must be positive and weight_decay non-negative")
        self.train.validate()
        self.autoencoder.validate()
        self.eval.validate()
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed)}
        for f in fields(self):
            if f.name == "seed":
                continue
            sec = getattr(self, f.name)
            cp[f.name] = {k.name: _fmt(getattr(sec, k.name)) for k in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def with_(self, **sections) -> "RunConfig":
        """Return a copy with fields of named sections overridden, e.g. ``train={"steps": 5}``."""
        out = self
        for name, vals in sections.items():
            if name == "seed":
                out = replace(out, seed=int(vals))
            else:
                out = replace(out, **{name: replace(getattr(out, name), **vals)})
        return out.validate()


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                return tuple(type(default[0])(s) for s in items)
            return tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    base = RunConfig()
    kwargs = {}
    for sec in cp.sections():
        if sec == "run":
            for k, v in cp[sec].items():
                if k != "seed":
                    raise ConfigError(f"{source}: unknown key run.{k}")
                kwargs["seed"] = _parse(v, 0, f"{source}: run.seed")
            continue
        if sec not in {f.name for f in fields(RunConfig)} or sec == "seed":
            raise ConfigError(f"{source}: unknown section [{sec}]")
        dflt = getattr(base, sec)
        known = {f.name: f for f in fields(dflt)}
        vals = {}
        for k, v in cp[sec].items():
            if k not in known:
                raise ConfigError(f"{source}: unknown key {sec}.{k}")
            vals[k] = _parse(v, getattr(dflt, k), f"{source}: {sec}.{k}")
        kwargs[sec] = replace(dflt, **vals)
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))
