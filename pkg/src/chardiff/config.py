"""Run configuration: TOML profiles with strict key checking."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .degrade import DegradeConfig
from .denoiser import PRIOR_MODES, DenoiserConfig
from .plates import PlateConfig

CONFIG_ENV = "CHARDIFF_CONFIG"
PROFILE_DIR = Path(__file__).parent / "profiles"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    count: int = 1000
    seed: int = 0


@dataclass
class ScheduleConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    sampler: str = "ancestral"


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    segment_mode: str = "oracle"


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "runs"


@dataclass
class RunConfig:
    plates: PlateConfig = field(default_factory=PlateConfig)
    data: DataConfig = field(default_factory=DataConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    prior_mode: str = "charm"

    def validate(self) -> None:
        try:
            self.plates.validate()
            self.degrade.validate()
            self.model.prior_mode = self.prior_mode
            self.model.vocab_size = len(self.plates.vocab)
            self.model.max_chars = max(self.model.max_chars, self.plates.max_chars)
            self.model.channels = self.plates.channels
            self.model.validate()
            self.model.feat_shape((self.plates.height, self.plates.width))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        s, t = self.schedule, self.train
        checks = [
            (self.prior_mode in PRIOR_MODES, "prior_mode", f"must be one of {PRIOR_MODES}"),
            (self.data.count >= 0, "data.count", "must be >= 0"),
            (s.num_steps >= 1, "schedule.num_steps", "must be >= 1"),
            (1 <= s.sample_steps <= s.num_steps, "schedule.sample_steps", "must be in [1, num_steps]"),
            (0 <= s.beta_start <= s.beta_end < 1, "schedule.beta_start", "need 0 <= beta_start <= beta_end < 1"),
            (s.sampler in ("ancestral", "deterministic"), "schedule.sampler", "must be ancestral or deterministic"),
            (t.steps >= 0, "train.steps", "must be >= 0"),
            (t.batch >= 1, "train.batch", "must be >= 1"),
            (t.lr > 0, "train.lr", "must be > 0"),
            (t.weight_decay >= 0, "train.weight_decay", "must be >= 0"),
            (t.checkpoint_every >= 0, "train.checkpoint_every", "must be >= 0"),
            (t.segment_mode in ("oracle", "projection"), "train.segment_mode", "must be oracle or projection"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")

    def to_dict(self) -> dict:
        d = {
            "prior_mode": self.prior_mode,
            "plates": _plain(dataclasses.asdict(self.plates)),
            "data": dataclasses.asdict(self.data),
            "degrade": self.degrade.to_dict(),
            "model": _plain(self.model.to_dict()),
            "schedule": dataclasses.asdict(self.schedule),
            "train": dataclasses.asdict(self.train),
            "paths": dataclasses.asdict(self.paths),
        }
        for k in ("prior_mode", "vocab_size", "channels"):
            d["model"].pop(k, None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {"plates", "data", "degrade", "model", "schedule", "train", "paths", "prior_mode"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        cfg = cls()
        cfg.prior_mode = d.get("prior_mode", cfg.prior_mode)
        cfg.plates = _section(PlateConfig, d.get("plates", {}), "plates")
        cfg.data = _section(DataConfig, d.get("data", {}), "data")
        try:
            cfg.degrade = DegradeConfig.from_dict(d.get("degrade", {}))
        except ValueError as exc:
            raise ConfigError(f"degrade: {exc}") from None
        model = dict(d.get("model", {}))
        for k in ("prior_mode", "vocab_size", "channels"):
            if k in model:
                raise ConfigError(f"model.{k} is derived; set it elsewhere (unknown config key: model.{k})")
        cfg.model = _section(DenoiserConfig, model, "model")
        cfg.schedule = _section(ScheduleConfig, d.get("schedule", {}), "schedule")
        cfg.train = _section(TrainConfig, d.get("train", {}), "train")
        cfg.paths = _section(PathsConfig, d.get("paths", {}), "paths")
        cfg.validate()
        return cfg

    def replace(self, **sections) -> "RunConfig":
        """Copy with top-level fields or ``section__field`` values overridden."""
        d = self.to_dict()
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                d[sec][name] = value
            else:
                d[key] = value
        return RunConfig.from_dict(d)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in fields:
            raise ConfigError(f"unknown config key: {name}.{key}")
    kwargs = {}
    defaults = cls()
    for key, value in values.items():
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected true/false")
        elif isinstance(default, int) and not isinstance(value, int):
            raise ConfigError(f"{name}.{key}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{name}.{key}: expected a string, got {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Load a TOML run config.

    ``path`` may be a file or the name of a shipped profile ("desk",
    "paper").  Without a path the ``CHARDIFF_CONFIG`` environment variable is
    consulted, then the desk profile is used.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV, "desk")
    p = Path(path)
    if not p.exists():
        named = PROFILE_DIR / f"{path}.cfg"
        if not named.exists():
            raise ConfigError(f"config file not found: {path}")
        p = named
    with open(p, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return RunConfig.from_dict(data)
