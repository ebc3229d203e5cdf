"""Run configuration: nested dataclasses that round-trip through TOML.

The checked-in ``default_config.toml`` mirrors the dataclass defaults; CLI
flags override individual keys after the file is read.
"""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

MODES = ("a", "b", "c")


@dataclass
class DatasetConfig:
    path: str = "data/scenes"
    n_scenes: int = 64
    resolution: int = 32
    views_per_scene: int = 12
    holdout_views: list[int] = field(default_factory=lambda: [10, 11])

    @property
    def train_views(self) -> list[int]:
        return [v for v in range(self.views_per_scene) if v not in self.holdout_views]


@dataclass
class ModelConfig:
    mode: str = "b"
    views: int = 1
    view_mode: str = "b"
    d_ctx: int = 64
    d_embed: int = 64
    n_tok: int = 16
    channels: list[int] = field(default_factory=lambda: [32, 64])
    groups: int = 8


@dataclass
class ScheduleConfig:
    timesteps: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    kind: str = "linear"


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    p_uncond: float = 0.1
    checkpoint_every: int = 500
    ema: float = 0.99


@dataclass
class SampleConfig:
    steps: list[int] = field(default_factory=lambda: [20, 50, 100, 150, 200])
    scales: list[float] = field(default_factory=lambda: [1.0, 4.0, 16.0, 30.0])
    eval_steps: int = 50
    eval_scale: float = 2.0
    scene: int = 0
    condition_views: list[int] = field(default_factory=lambda: [0])
    target_view: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        cfg = _build(cls, data, "")
        validate(cfg)
        return cfg

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"model.mode": "a"}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(data)


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{where}: booleans are not accepted")
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        proto = default[0] if default else 0
        return [_coerce(v, proto, f"{where}[{i}]") for i, v in enumerate(value)]
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _build(cls, data: dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table")
    proto = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        default = getattr(proto, f.name)
        where = prefix + f.name
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), data[f.name], where + ".")
        else:
            kwargs[f.name] = _coerce(data[f.name], default, where)
    return cls(**kwargs)


def validate(cfg: RunConfig) -> None:
    """Raise :class:`ConfigError` on the first violated invariant."""
    ds, m, sc, tr, sa = cfg.dataset, cfg.model, cfg.schedule, cfg.train, cfg.sample

    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(msg)

    need(0 <= cfg.seed < 2**63, "seed must be in [0, 2^63)")
    need(ds.n_scenes >= 1, "dataset.n_scenes must be at least 1")
    need(ds.resolution in (16, 32, 64), "dataset.resolution must be 16, 32 or 64")
    need(ds.views_per_scene >= 2, "dataset.views_per_scene must be at least 2")
    need(
        all(0 <= v < ds.views_per_scene for v in ds.holdout_views)
        and len(set(ds.holdout_views)) == len(ds.holdout_views),
        "dataset.holdout_views must be distinct view ids",
    )
    need(m.mode in MODES, f"model.mode must be one of {MODES}")
    need(m.view_mode in ("a", "b"), "model.view_mode must be 'a' or 'b'")
    if m.mode == "c":
        need(m.views >= 2, "mode c needs at least 2 condition views")
    else:
        need(m.views == 1, f"mode {m.mode} takes exactly 1 condition view")
    need(
        m.views + 1 <= len(ds.train_views),
        f"{m.views} condition views + 1 target exceed the {len(ds.train_views)} training views",
    )
    need(min(m.d_ctx, m.d_embed, m.n_tok) >= 1, "model dimensions must be positive")
    grid = math.isqrt(m.n_tok)
    need(grid * grid == m.n_tok, "model.n_tok must be a perfect square")
    ratio = ds.resolution // grid if grid else 0
    need(
        grid > 0 and ds.resolution % grid == 0 and ratio >= 2 and ratio & (ratio - 1) == 0,
        "resolution / sqrt(n_tok) must be a power of two >= 2",
    )
    need(len(m.channels) == 2 and min(m.channels) >= 1, "model.channels must be [c1, c2]")
    need(all(c % m.groups == 0 for c in m.channels), "model.channels must divide into model.groups")
    need(sc.kind == "linear", "schedule.kind must be 'linear'")
    need(sc.timesteps >= 1, "schedule.timesteps must be positive")
    need(0 < sc.beta_start <= sc.beta_end < 1, "need 0 < beta_start <= beta_end < 1")
    need(tr.steps >= 0 and tr.batch_size >= 1, "train.steps >= 0 and train.batch_size >= 1")
    need(tr.lr > 0, "train.lr must be positive")
    need(0 <= tr.p_uncond < 1, "train.p_uncond must be in [0, 1)")
    need(tr.checkpoint_every >= 1, "train.checkpoint_every must be positive")
    need(0 <= tr.ema < 1, "train.ema must be in [0, 1)")
    need(len(sa.steps) >= 1 and all(1 <= s <= sc.timesteps for s in sa.steps),
         f"sample.steps must lie in [1, {sc.timesteps}]")
    need(len(sa.scales) >= 1 and all(math.isfinite(s) for s in sa.scales), "sample.scales must be finite")
    need(1 <= sa.eval_steps <= sc.timesteps, "sample.eval_steps out of range")
    need(0 <= sa.scene < ds.n_scenes, "sample.scene out of range")
    need(all(0 <= v < ds.views_per_scene for v in sa.condition_views + [sa.target_view]),
         "sample view ids out of range")


def default_config_text() -> str:
    return resources.files("viewdiff").joinpath("default_config.toml").read_text()


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    if path is None:
        cfg = RunConfig.from_toml(default_config_text())
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = RunConfig.from_toml(text)
    return cfg.with_overrides(overrides) if overrides else cfg
