"""Run configuration and its flat ``key = value`` text format.

One setting per line, keys dotted by section::

    # comments start with '#'
    seed = 7
    approach = "RiskFORM2"
    cohort.n_subjects = 1000
    model.hidden_dims = [32, 16]
    paths.cohort_csv = "out/cohort.csv"

Values are JSON literals (numbers, ``true``/``false``, quoted strings,
lists); an unquoted word is read as a string. Every key must exist and
every value must match the type of its default, otherwise ``ConfigError``
names the key and line. The ``runtime`` section only affects how a run is
executed, never its results, and is left out of embedded configs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .cohortgen import SimConfig
from .cvharness import Approach, TrainConfig

HORIZON_CHOICES = (1, 2, 4)
SCOPES = ("internal", "external")


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        prefix = []
        if key is not None:
            prefix.append(f"key {key!r}")
        if line is not None:
            prefix.append(f"line {line}")
        super().__init__(f"{' at '.join(prefix)}: {message}" if prefix else message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class ModelSettings:
    hidden_dims: Tuple[int, ...] = (32, 16)
    activation: str = "relu"


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 16


@dataclass(frozen=True)
class RegSettings:
    margin_m: float = 2.0
    gamma: float = 1.0
    contrastive_margin: float = 1.0


@dataclass(frozen=True)
class CVSettings:
    outer: int = 7
    inner: int = 6


@dataclass(frozen=True)
class BootstrapSettings:
    n_resamples: int = 2000
    level: float = 0.95


@dataclass(frozen=True)
class PathSettings:
    cohort_csv: str = "cohort.csv"
    external_csv: str = "external.csv"
    bundle_dir: str = "bundles"
    report: str = "report.json"


@dataclass(frozen=True)
class RuntimeSettings:
    n_jobs: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    approach: str = "RiskFORM2"
    horizon: int = 1
    scope: str = "internal"
    cohort: SimConfig = field(default_factory=SimConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    optim: OptimSettings = field(default_factory=OptimSettings)
    reg: RegSettings = field(default_factory=RegSettings)
    cv: CVSettings = field(default_factory=CVSettings)
    bootstrap: BootstrapSettings = field(default_factory=BootstrapSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)

    def validate(self) -> "RunConfig":
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
        if self.approach not in [a.value for a in Approach]:
            raise ConfigError(f"unknown approach {self.approach!r}; choose from {[a.value for a in Approach]}",
                              "approach")
        if self.horizon not in HORIZON_CHOICES:
            raise ConfigError(f"horizon must be one of {HORIZON_CHOICES}", "horizon")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}", "scope")
        if self.cv.outer < 2 or self.cv.inner < 2:
            raise ConfigError("cv.outer and cv.inner must be at least 2", "cv.outer")
        if self.optim.epochs < 1 or self.optim.batch_size < 1:
            raise ConfigError("optim.epochs and optim.batch_size must be positive", "optim.epochs")
        if self.runtime.n_jobs < 0:
            raise ConfigError("runtime.n_jobs must be >= 0", "runtime.n_jobs")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(hidden_dims=tuple(self.model.hidden_dims), activation=self.model.activation,
                           **dataclasses.asdict(self.optim), **dataclasses.asdict(self.reg))

    @property
    def n_jobs(self) -> int:
        return self.runtime.n_jobs or (os.cpu_count() or 1)

    def replace(self, **flat) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"cohort.n_subjects": 50})``."""
        values = to_flat(self, include_runtime=True)
        for key, value in flat.items():
            if key not in values:
                raise ConfigError("unknown key", key)
            values[key] = value
        return from_flat(values)


def _sections():
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def to_flat(cfg: RunConfig, include_runtime: bool = False) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for name, f in _sections().items():
        value = getattr(cfg, name)
        if dataclasses.is_dataclass(value):
            if name == "runtime" and not include_runtime:
                continue
            for sub in dataclasses.fields(value):
                v = getattr(value, sub.name)
                out[f"{name}.{sub.name}"] = list(v) if isinstance(v, tuple) else v
        else:
            out[name] = value
    return out


def _default_of(key: str):
    defaults = to_flat(RunConfig(), include_runtime=True)
    if key not in defaults:
        return None, False
    return defaults[key], True


def _coerce(key: str, value, line: Optional[int]):
    default, known = _default_of(key)
    if not known:
        raise ConfigError("unknown key", key, line)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key, line)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key, line)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key, line)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key, line)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key, line)
        if default and not all(isinstance(v, type(default[0])) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"list items must be {type(default[0]).__name__}", key, line)
        return value
    raise ConfigError("unsupported setting type", key, line)


def from_flat(values: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    lines = lines or {}
    top, sections = {}, {}
    for key, raw in values.items():
        value = _coerce(key, raw, lines.get(key))
        if "." in key:
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = tuple(value) if isinstance(value, list) else value
        else:
            top[key] = value
    kwargs = dict(top)
    for name, f in _sections().items():
        if name in sections:
            base = f.default_factory()
            try:
                kwargs[name] = dataclasses.replace(base, **sections[name])
            except (TypeError, ValueError) as exc:
                key = f"{name}.{next(iter(sections[name]))}"
                raise ConfigError(str(exc), key, lines.get(key)) from None
    return RunConfig(**kwargs).validate()


def parse_config_text(text: str) -> RunConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", None, lineno)
        key, _, value_text = stripped.partition("=")
        key, value_text = key.strip(), value_text.strip()
        if key in values:
            raise ConfigError("duplicate key", key, lineno)
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            value = value_text
        _coerce(key, value, lineno)
        values[key] = value
        lines[key] = lineno
    return from_flat(values, lines)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config_text(text)


def dumps_config(cfg: RunConfig, include_runtime: bool = True) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in to_flat(cfg, include_runtime).items())


def embedded(cfg: RunConfig) -> Dict[str, Any]:
    """The effective settings recorded inside produced artifacts."""
    return to_flat(cfg, include_runtime=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(embedded(cfg), sort_keys=True).encode()).hexdigest()
