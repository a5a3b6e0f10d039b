"""Flat-keyed run configuration.

One YAML mapping drives the whole pipeline. Keys are flat (no nesting), every
key has a default, unknown keys are rejected by name, and the resolved config
is echoed into the run directory so a run can be reproduced by pointing the
CLI at the echo file. Sampling keys follow the documented interface names
(lambda, side_km, m, strategies); the rest are descriptive.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .downstream import TaskConfig
from .errors import ConfigError
from .model import HyperParams
from .sampling import STRATEGIES, SamplerConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    # data
    dataset: str | None = None  # check-in file path
    format: str = "canonical"  # canonical | foursquare
    out_dir: str = "runs/default"
    seed: int = 0
    min_poi_checkins: int = 5
    min_seq_len: int = 10
    split_ratios: tuple[int, int, int] = (2, 1, 7)  # test : val : train

    # attribute derivation / geocoding
    geocode_cache_dir: str | None = None
    geocode_endpoint: str | None = None
    geocode_email: str | None = None

    # feature backend
    backend: str = "mock"  # mock | structured-mock | http | transformers
    feature_dim: int = 4096
    pooling: str = "last"
    backend_endpoint: str | None = None
    backend_model_path: str | None = None
    cache_dir: str | None = None
    extract_workers: int = 1

    # enhancer
    dim: int = 256
    latent_dim: int = 256
    heads: int = 8
    head_dim: int = 32
    align_layers: int = 4
    fuse_layers: int = 2
    ffn_mult: int = 4
    paf_parallel: bool = False
    scale_by_head_dim: bool = False
    chunk_size: int = 1024

    # sampling (interface key names: lambda, side_km, m, strategies)
    lambda_: int = 2
    side_km: float = 0.5
    m: int = 64
    strategies: tuple[str, ...] = STRATEGIES
    max_pairs_per_anchor: int | None = None

    # training
    gamma: float = 0.1
    epochs: int = 100
    learning_rate: float = 0.001
    weight_decay: float = 0.001
    grad_clip: float | None = None

    # base embeddings
    skipgram_window: int = 5
    skipgram_negatives: int = 5
    skipgram_epochs: int = 5

    # downstream tasks
    lstm_hidden: int = 512
    lstm_layers: int = 2
    task_epochs: int = 100
    rec_lr: float = 0.001
    task_lr: float = 0.0001
    max_slice: int = 128
    flow_window_hours: int = 1
    min_flow_len: int = 6
    flow_horizon: int = 3
    task_batch_size: int = 32

    def validate(self) -> None:
        checks = [
            ("m", self.m >= 3, "must be >= 3 (anchor, positive, >=1 negative)"),
            ("lambda", self.lambda_ >= 0, "must be >= 0"),
            ("side_km", self.side_km > 0, "must be positive"),
            ("gamma", self.gamma > 0, "must be positive"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("learning_rate", self.learning_rate > 0, "must be positive"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("min_poi_checkins", self.min_poi_checkins >= 1, "must be >= 1"),
            ("min_seq_len", self.min_seq_len >= 1, "must be >= 1"),
            ("chunk_size", self.chunk_size >= 1, "must be >= 1"),
            ("extract_workers", self.extract_workers >= 1, "must be >= 1"),
            ("feature_dim", self.feature_dim >= 1, "must be >= 1"),
            ("skipgram_window", self.skipgram_window >= 1, "must be >= 1"),
            ("skipgram_negatives", self.skipgram_negatives >= 1, "must be >= 1"),
            ("skipgram_epochs", self.skipgram_epochs >= 1, "must be >= 1"),
            ("rec_lr", self.rec_lr > 0, "must be positive"),
            ("task_lr", self.task_lr > 0, "must be positive"),
        ]
        for name, value in (
            ("dim", self.dim),
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("align_layers", self.align_layers),
            ("fuse_layers", self.fuse_layers),
            ("ffn_mult", self.ffn_mult),
        ):
            checks.append((name, value >= 1, "must be >= 1"))
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"config key '{key}' {msg}")
        if self.format not in ("canonical", "foursquare"):
            raise ConfigError("config key 'format' must be canonical or foursquare")
        if self.backend not in ("mock", "structured-mock", "http", "transformers"):
            raise ConfigError(
                "config key 'backend' must be one of mock, structured-mock, http, transformers"
            )
        if self.pooling not in ("last", "mean"):
            raise ConfigError("config key 'pooling' must be last or mean")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise ConfigError("config key 'split_ratios' must be three positive numbers")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(
                f"config key 'strategies' has unknown entries {unknown}; known: {list(STRATEGIES)}"
            )
        if not self.strategies:
            raise ConfigError("config key 'strategies' must not be empty")
        if self.max_pairs_per_anchor is not None and self.max_pairs_per_anchor < 1:
            raise ConfigError("config key 'max_pairs_per_anchor' must be >= 1 when set")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("config key 'grad_clip' must be positive when set")
        if self.max_slice < 2:
            raise ConfigError("config key 'max_slice' must be >= 2")
        for name in (
            "lstm_hidden",
            "lstm_layers",
            "task_epochs",
            "flow_window_hours",
            "min_flow_len",
            "flow_horizon",
            "task_batch_size",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"config key '{name}' must be >= 1")

    # -- sub-config builders -------------------------------------------------

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            dim=self.dim,
            latent_dim=self.latent_dim,
            heads=self.heads,
            head_dim=self.head_dim,
            align_layers=self.align_layers,
            fuse_layers=self.fuse_layers,
            feature_dim=self.feature_dim,
            ffn_mult=self.ffn_mult,
            parallel_fuse=self.paf_parallel,
            scale_by_head_dim=self.scale_by_head_dim,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            batch_size=self.m,
            seq_window=self.lambda_,
            geo_side_km=self.side_km,
            strategies=tuple(self.strategies),
            seed=self.seed,
            max_pairs_per_anchor=self.max_pairs_per_anchor,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
            temperature=self.gamma,
            grad_clip=self.grad_clip,
            seed=self.seed,
        )

    def task_config(self, task: str) -> TaskConfig:
        lr = self.rec_lr if task == "recommendation" else self.task_lr
        return TaskConfig(
            lstm_hidden=self.lstm_hidden,
            lstm_layers=self.lstm_layers,
            epochs=self.task_epochs,
            lr=lr,
            max_slice=self.max_slice,
            flow_window_hours=self.flow_window_hours,
            min_flow_len=self.min_flow_len,
            flow_horizon=self.flow_horizon,
            batch_size=self.task_batch_size,
            seed=self.seed,
        )


# YAML key "lambda" maps to the attribute lambda_ (reserved word in Python).
_KEY_TO_ATTR = {"lambda": "lambda_"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}

_TUPLE_FIELDS = {"split_ratios", "strategies"}


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(RunConfig):
        key = _ATTR_TO_KEY.get(f.name, f.name)
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


# Optional fields: type when the value is not null.
_OPTIONAL_FLOAT = {"grad_clip"}
_OPTIONAL_INT = {"max_pairs_per_anchor"}
_OPTIONAL_STR = {
    "dataset",
    "geocode_cache_dir",
    "geocode_endpoint",
    "geocode_email",
    "backend_endpoint",
    "backend_model_path",
    "cache_dir",
}


def config_from_dict(raw: dict, source: str = "<config>") -> RunConfig:
    valid_keys = {_ATTR_TO_KEY.get(f.name, f.name) for f in fields(RunConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in valid_keys:
            raise ConfigError(f"{source}: unknown config key '{key}'")
        attr = _KEY_TO_ATTR.get(key, key)
        if attr in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{source}: config key '{key}' must be a list")
            value = tuple(value)
        kwargs[attr] = value
    cfg = RunConfig(**kwargs)
    _check_types(cfg, source)
    cfg.validate()
    return cfg


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_types(cfg: RunConfig, source: str) -> None:
    defaults = RunConfig()
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        default = getattr(defaults, f.name)
        key = _ATTR_TO_KEY.get(f.name, f.name)

        def bad(expected):
            return ConfigError(f"{source}: config key '{key}' must be {expected}")

        if f.name in _OPTIONAL_FLOAT or f.name in _OPTIONAL_INT or f.name in _OPTIONAL_STR:
            if value is None:
                continue
            if f.name in _OPTIONAL_FLOAT:
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise bad("a number or null")
                setattr(cfg, f.name, float(value))
            elif f.name in _OPTIONAL_INT and not _is_int(value):
                raise bad("an integer or null")
            elif f.name in _OPTIONAL_STR and not isinstance(value, str):
                raise bad("a string or null")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise bad("true/false")
        elif isinstance(default, int):
            if not _is_int(value):
                raise bad("an integer")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise bad("a number")
            setattr(cfg, f.name, float(value))
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise bad("a string")
        elif f.name == "split_ratios":
            if len(value) != 3 or not all(_is_int(v) for v in value):
                raise bad("three integers")
        elif f.name == "strategies":
            if not all(isinstance(v, str) for v in value):
                raise bad("a list of strings")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a flat YAML config; missing file keys fall back to defaults.

    ``overrides`` (already-parsed values, e.g. from CLI flags) win over the
    file. ``path=None`` yields the pure defaults.
    """
    raw: dict = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{source}: config must be a flat mapping")
        raw = loaded
    if overrides:
        raw.update(overrides)
    return config_from_dict(raw, source=source)


def echo_config(cfg: RunConfig, out_dir) -> Path:
    """Write the fully resolved config into the run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config_echo.yaml"
    path.write_text(
        yaml.safe_dump(config_to_dict(cfg), sort_keys=True), encoding="utf-8"
    )
    return path
