"""Run configuration: defaults, then a config file, then ``T2C_`` env vars, then flags.

File schema (JSON or TOML)::

    seed = 0
    workdir = "."

    [model]      # any ModelConfig field except vocab_text and seed
    [train]      # any TrainConfig field except seed, plus "levels" (list of L0..L3)
    [annotate]   # endpoint, timeout, retries
    [eval]       # tolerance, resolution, points, chamfer

Environment overrides use ``T2C_<KEY>`` for top-level keys and
``T2C_<SECTION>__<KEY>`` for section keys, e.g. ``T2C_TRAIN__LR=0.003``.
Values are parsed as JSON when possible, else taken as strings.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .nn.model import ModelConfig
from .nn.train import TrainConfig

ENV_PREFIX = "T2C_"
LEVEL_NAMES = ("L0", "L1", "L2", "L3")


def _defaults() -> dict[str, Any]:
    model = {f.name: f.default for f in fields(ModelConfig) if f.name not in ("vocab_text", "seed")}
    train = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
    train["levels"] = list(LEVEL_NAMES)
    return {
        "seed": 0,
        "workdir": ".",
        "model": model,
        "train": train,
        "annotate": {"endpoint": "", "timeout": 30.0, "retries": 2},
        "eval": {"tolerance": 3, "resolution": 64, "points": 2048, "chamfer": True},
    }


DEFAULTS = _defaults()


@dataclass(frozen=True)
class RunConfig:
    seed: int
    workdir: Path
    model: dict
    train: dict
    annotate: dict
    eval: dict

    def path(self, p: str | Path) -> Path:
        """Resolve ``p`` against the workdir unless it is absolute."""
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def model_config(self, vocab_text: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "vocab_text": vocab_text, "seed": self.seed})

    def train_config(self) -> TrainConfig:
        doc = {k: v for k, v in self.train.items() if k != "levels"}
        return TrainConfig.from_dict({**doc, "seed": self.seed})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "workdir": str(self.workdir),
            "model": dict(self.model),
            "train": dict(self.train),
            "annotate": dict(self.annotate),
            "eval": dict(self.eval),
        }


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Bring ``value`` to the type of ``default`` (``None`` defaults accept floats)."""
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if isinstance(default, list):
                value = [v.strip() for v in value.split(",") if v.strip()]
            else:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float) or default is None:
            return None if value is None else float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise TypeError
            return list(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    return value


def _merge(base: dict, layer: Mapping[str, Any], origin: str) -> None:
    for key, value in layer.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        default = DEFAULTS[key]
        if isinstance(default, dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{key}: expected a table ({origin})")
            for sub, v in value.items():
                if sub not in default:
                    raise ConfigError(f"unknown config key '{key}.{sub}' ({origin})")
                base[key][sub] = _coerce(f"{key}.{sub}", v, default[sub])
        else:
            base[key] = _coerce(key, value, default)


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        if path.suffix == ".json":
            doc = json.loads(raw)
        else:
            doc = tomllib.loads(raw.decode())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return doc


def env_overrides(environ: Mapping[str, str]) -> dict:
    out: dict[str, Any] = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if "__" in key:
            section, sub = key.split("__", 1)
            out.setdefault(section, {})[sub] = value
        else:
            out[key] = value
    return out


def parse_assignments(items: list[str]) -> dict:
    """``["train.lr=0.01", "seed=3"]`` to a nested override dict."""
    out: dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if "." in key:
            section, sub = key.split(".", 1)
            out.setdefault(section, {})[sub] = value
        else:
            out[key] = value
    return out


def resolve_config(
    file: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Merge defaults < file < environment < flags; unknown keys raise ConfigError."""
    doc = copy.deepcopy(DEFAULTS)
    if file is not None:
        _merge(doc, read_config_file(file), str(file))
    _merge(doc, env_overrides(os.environ if environ is None else environ), "environment")
    if flags:
        _merge(doc, flags, "flags")
    bad = [lv for lv in doc["train"]["levels"] if lv not in LEVEL_NAMES]
    if bad or not doc["train"]["levels"]:
        raise ConfigError(f"train.levels must be a non-empty subset of {list(LEVEL_NAMES)}")
    cfg = RunConfig(
        seed=doc["seed"],
        workdir=Path(doc["workdir"]),
        model=doc["model"],
        train=doc["train"],
        annotate=doc["annotate"],
        eval=doc["eval"],
    )
    # validate eagerly so a bad value fails before any work starts
    cfg.model_config(vocab_text=4)
    cfg.train_config()
    return cfg
