"""Experiment configuration files.

A config is a JSON object. Missing keys take the defaults below, which
reproduce the full factorial design (396 scenarios). List-valued keys are
grid factors; everything else applies to every scenario.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Iterable, Optional

from .exceptions import ConfigError, NKTeamsError
from .landscape import Pattern
from .population import NoiseSpec
from .simulation import Coordination, LearningScope, ScenarioConfig, expand_grid
from .team import parse_tau

DEFAULTS: dict[str, Any] = {
    "N": 12,
    "M": 3,
    "P": 30,
    "K": [3, 5],
    "pattern": ["decomposable", "structured", "unstructured"],
    "tau": ["none", 10, 1],
    "learn_prob": [round(0.1 * i, 1) for i in range(11)],
    "coordination": ["autonomous", "coordinated"],
    "periods": 200,
    "rounds": 1500,
    "master_seed": 0,
    "error_sigma": 0.01,
    "error_sigma_is_variance": False,
    "learning_scope": "all",
    "parallelism": None,
    "output_path": "results.csv",
}

LIST_KEYS = ("K", "pattern", "tau", "learn_prob", "coordination")

_COORDINATION_ALIASES = {
    "autonomous": Coordination.AUTONOMOUS,
    "fully_autonomous": Coordination.AUTONOMOUS,
    "fullyautonomous": Coordination.AUTONOMOUS,
    "coordinated": Coordination.COORDINATED,
    "coordination": Coordination.COORDINATED,
}


@dataclass
class RunConfig:
    scenarios: list[ScenarioConfig]
    parallelism: Optional[int]
    output_path: str
    settings: dict


def _int(settings, key, minimum=None):
    value = settings[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {value}")
    return value


def _levels(settings, key) -> list:
    value = settings[key]
    if not isinstance(value, list):
        value = [value]
    if not value:
        raise ConfigError(key, "needs at least one level")
    return value


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(settings: dict, overrides: Iterable[str]) -> dict:
    settings = dict(settings)
    for item in overrides:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(item, "override must look like key=value")
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        settings[key] = parse_value(text.strip())
    return settings


def parse_and_validate(settings: dict) -> RunConfig:
    """Validate a settings mapping and expand it into scenario configs."""
    unknown = set(settings) - set(DEFAULTS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    s = {**DEFAULTS, **settings}

    n, m, p = _int(s, "N", 1), _int(s, "M", 2), _int(s, "P", 1)
    if n % m:
        raise ConfigError("M", f"{m} subtasks do not divide N={n}")
    if p % m:
        raise ConfigError("P", f"population {p} is not divisible by M={m}")
    periods, rounds = _int(s, "periods", 1), _int(s, "rounds", 1)
    seed = _int(s, "master_seed", 0)

    ks = []
    for i, k in enumerate(_levels(s, "K")):
        if isinstance(k, bool) or not isinstance(k, int) or not 0 <= k < n:
            raise ConfigError(f"K[{i}]", f"must be an integer in [0, {n - 1}], got {k!r}")
        ks.append(k)
    patterns = []
    for i, name in enumerate(_levels(s, "pattern")):
        try:
            patterns.append(Pattern(str(name).lower()))
        except ValueError:
            raise ConfigError(f"pattern[{i}]", f"unknown pattern {name!r}") from None
    for k in ks:
        if Pattern.DECOMPOSABLE in patterns and n % (k + 1):
            raise ConfigError("K", f"decomposable blocks of size K+1={k + 1} do not tile N={n}")
    taus = []
    for i, t in enumerate(_levels(s, "tau")):
        try:
            taus.append(parse_tau(t))
        except (ValueError, TypeError):
            raise ConfigError(f"tau[{i}]", f"expected none or a positive integer, got {t!r}") from None
    probs = []
    for i, q in enumerate(_levels(s, "learn_prob")):
        if isinstance(q, bool) or not isinstance(q, (int, float)) or math.isnan(q) or not 0 <= q <= 1:
            raise ConfigError(f"learn_prob[{i}]", f"must lie in [0, 1], got {q!r}")
        probs.append(float(q))
    coords = []
    for i, c in enumerate(_levels(s, "coordination")):
        key = str(c).lower().replace(" ", "_").replace("-", "_")
        if key not in _COORDINATION_ALIASES:
            raise ConfigError(f"coordination[{i}]", f"unknown mode {c!r}")
        coords.append(_COORDINATION_ALIASES[key])

    sigma = s["error_sigma"]
    if isinstance(sigma, bool) or not isinstance(sigma, (int, float)) or sigma < 0:
        raise ConfigError("error_sigma", f"must be a non-negative number, got {sigma!r}")
    if not isinstance(s["error_sigma_is_variance"], bool):
        raise ConfigError("error_sigma_is_variance", "must be true or false")
    noise = NoiseSpec.from_error_term(float(sigma), s["error_sigma_is_variance"])
    try:
        scope = LearningScope(s["learning_scope"])
    except ValueError:
        raise ConfigError("learning_scope", f"must be 'all' or 'members', got {s['learning_scope']!r}") from None
    parallelism = s["parallelism"]
    if parallelism is not None:
        parallelism = _int(s, "parallelism", 1)
    if not isinstance(s["output_path"], str) or not s["output_path"]:
        raise ConfigError("output_path", "must be a non-empty string")

    base = ScenarioConfig(k=ks[0], pattern=patterns[0], periods=periods, rounds=rounds, master_seed=seed,
                          noise=noise, learning_scope=scope, n_decisions=n, n_subtasks=m, pop_size=p)
    factors = {"k": ks, "pattern": patterns, "tau": taus, "learn_prob": probs, "coordination": coords}
    try:
        scenarios = expand_grid(base, factors)
    except NKTeamsError as exc:
        raise ConfigError("grid", str(exc)) from exc
    return RunConfig(scenarios, parallelism, s["output_path"], s)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read ``path`` (or start from the defaults), apply ``key=value`` overrides, validate."""
    settings: dict = {}
    if path is not None:
        with open(path) as fh:
            text = fh.read()
        try:
            settings = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
        if not isinstance(settings, dict):
            raise ConfigError(path, "top level must be a JSON object")
    return parse_and_validate(apply_overrides(settings, overrides))
