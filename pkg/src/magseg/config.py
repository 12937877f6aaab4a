"""Flat run configuration: training fields plus paths, teacher source and threading.

Files are either ``key = value`` lines (``#`` starts a comment) or a JSON
object such as a previously written ``config.resolved.json``. Values in text
files are read as JSON literals when possible (``0.1``, ``true``, ``null``)
and as bare strings otherwise.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .trainer import TrainConfig

RESOLVED_NAME = "config.resolved.json"


@dataclass
class RunConfig:
    # training (mirrors TrainConfig)
    base_lr: float = 0.1
    total_steps: int = 2000
    warmup_steps: int | None = None
    poly_power: float = 0.9
    tau: float = 1.0
    tau_w: float = 1.0
    w_sup: float = 1.0
    w_cr: float = 1.0
    w_se: float = 1.0
    w_base: float = 1.0
    enable_base_loss: bool = False
    aggregate: str = "mean"
    kl_order: str = "teacher_target"
    upsample: str = "bilinear"
    fuse_steps: int = 2
    modality_dropout_prob: float = 0.0
    optimizer: str = "gd"
    width: int = 32
    patch: int = 4
    seed: int = 0
    # run
    data: str | None = None  # dataset directory
    out: str | None = None  # output directory
    teacher_seed: int | None = None  # None -> seed
    teacher_gamma: float = 0.8
    teacher_dim: int = 64
    teacher_path: str | None = None  # load instead of synthesizing
    threads: int = 1
    verbosity: int = 0

    def train_config(self) -> TrainConfig:
        d = asdict(self)
        return TrainConfig(**{k: d[k] for k in TrainConfig.field_names()})

    def validate(self) -> None:
        self.train_config()
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0.0 <= self.teacher_gamma <= 1.0:
            raise ConfigError("teacher_gamma must lie in [0, 1]")
        if self.teacher_dim < 2:
            raise ConfigError("teacher_dim must be >= 2")

    def updated(self, **overrides) -> "RunConfig":
        d = asdict(self)
        for key, value in overrides.items():
            if key not in d:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = value
        return make_config(d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
assert set(TrainConfig.field_names()) <= set(_FIELDS)


def _coerce(key: str, value):
    """Check ``value`` against the declared type of ``key``."""
    ftype = str(_FIELDS[key].type)
    if value is None:
        if "None" in ftype:
            return None
        raise ConfigError(f"{key} may not be null")
    if ftype.startswith("bool"):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if ftype.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        try:
            f = float(value)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(f)
    if ftype.startswith("float"):
        if isinstance(value, bool):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
    return str(value)


def make_config(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def parse_text(text: str) -> dict:
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return data
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def load_config(path: str | os.PathLike | None = None, **overrides) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_text(text))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(values)
