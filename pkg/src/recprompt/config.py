"""Run configuration: defaults < YAML config file < command-line flags.

Example config file::

    backend: live
    base_url: http://localhost:8000/v1
    models:
      recommender: gpt-4-1106-preview
      optimizer: gpt-4-1106-preview
    iterations: 10
    objective_weights: {mrr: 1, ndcg5: 1}
    split: {validation: 100, test: 400, seed: 7}

The API key is read from ``RECPROMPT_API_KEY`` only; it is never accepted
from flags or files.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from recprompt import fixtures
from recprompt.gateway import BACKENDS, DEFAULT_BASE_URL, ROLE_TAGS
from recprompt.metrics import METRIC_NAMES
from recprompt.tuner import EXEMPLAR_POLICIES


class RunConfigError(ValueError):
    pass


FORBIDDEN_KEYS = {"api_key", "apikey", "key", "token", "secret"}


@dataclass
class RunConfig:
    backend: str = "mock"
    base_url: str = DEFAULT_BASE_URL
    models: dict = field(
        default_factory=lambda: {
            "recommender": "gpt-3.5-turbo-1106",
            "optimizer": "gpt-4-1106-preview",
            "evaluator": "gpt-4-1106-preview",
        }
    )
    temperatures: dict = field(
        default_factory=lambda: {"recommender": 0.0, "optimizer": 1.0, "evaluator": 0.0}
    )
    max_tokens: dict = field(
        default_factory=lambda: {"recommender": 1024, "optimizer": 2048, "evaluator": 256}
    )
    strategy: str = "IO"
    iterations: int = 10
    objective_weights: dict = field(default_factory=lambda: {"mrr": 1.0, "ndcg5": 1.0})
    exemplar_policy: str = "worst"
    split: dict = field(
        default_factory=lambda: {"validation": 100, "test": 400, "seed": 7, "min_history": 1}
    )
    max_history: int = 50
    rate_limit: float = 30.0
    max_in_flight: int = 8
    run_dir: str = "runs/default"
    cache: str | None = None
    news: str = ""
    behaviors: str = ""

    def __post_init__(self):
        if not self.news:
            self.news = str(fixtures.news_path())
        if not self.behaviors:
            self.behaviors = str(fixtures.behaviors_path())

    @property
    def cache_path(self) -> Path:
        return Path(self.cache) if self.cache else Path(self.run_dir) / "cache.jsonl"

    def validate(self) -> "RunConfig":
        if self.backend not in BACKENDS:
            raise RunConfigError(f"backend must be one of {', '.join(BACKENDS)}, got {self.backend!r}")
        if self.iterations < 0:
            raise RunConfigError("iterations (l) must be >= 0")
        for key in ("validation", "test"):
            if int(self.split.get(key, 0)) < 0:
                raise RunConfigError(f"split.{key} must be >= 0")
        for role in self.models:
            if role not in ROLE_TAGS:
                raise RunConfigError(f"unknown role {role!r} in models")
        for name, w in self.objective_weights.items():
            if name not in METRIC_NAMES:
                raise RunConfigError(f"unknown metric {name!r} in objective_weights")
            if w < 0:
                raise RunConfigError(f"objective weight for {name} must be >= 0")
        if self.exemplar_policy not in EXEMPLAR_POLICIES:
            raise RunConfigError(f"exemplar_policy must be one of {', '.join(EXEMPLAR_POLICIES)}")
        if self.strategy.upper() not in ("IO", "COT"):
            raise RunConfigError("strategy must be IO or CoT")
        for path in (self.news, self.behaviors):
            if not Path(path).exists():
                raise RunConfigError(f"data file not found: {path}")
        return self

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}


def _merge(base: dict, override: Mapping[str, Any]) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _check_no_secrets(data: Mapping, where: str) -> None:
    for key, value in data.items():
        if str(key).lower() in FORBIDDEN_KEYS:
            raise RunConfigError(f"{where}: credentials are read from the environment only, remove {key!r}")
        if isinstance(value, Mapping):
            _check_no_secrets(value, where)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    data = RunConfig().to_dict()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise RunConfigError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise RunConfigError(f"{path}: config file must be a mapping")
        _check_no_secrets(loaded, str(path))
        unknown = set(loaded) - set(data)
        if unknown:
            raise RunConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        data = _merge(data, loaded)
    if overrides:
        data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**data).validate()
