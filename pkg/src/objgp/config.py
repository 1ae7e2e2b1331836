"""Run configuration: a sectioned INI file with a fixed schema.

Every key has a default, unknown sections or keys are rejected, and the
resolved configuration (defaults filled in) is what gets hashed and written
next to every output.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

SPEC_VERSION = "1"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _groups(text: str) -> tuple[tuple[int, ...], ...]:
    """``"0,1;2"`` -> ``((0, 1), (2,))``; empty means one group per column."""
    return tuple(_ints(g) for g in text.split(";") if g.strip())


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "meta": {
        "spec_version": (str, SPEC_VERSION),
    },
    "model": {
        "families": (_words, "power_exponential"),
        "roughness": (_floats, "1.5, 1.7"),
        "mean": (str, "constant"),
        "groups": (_groups, ""),
    },
    "data": {
        "source": (str, "synthetic"),
        "dir": (str, "data"),
        "grid_sizes": (_ints, "5, 5"),
        "grid_low": (_floats, "0"),
        "grid_high": (_floats, "1"),
        "seed": (int, "0"),
    },
    "truth": {
        "sigma_sq": (float, "1.5"),
        "beta": (_floats, "3.2, 3.6"),
        "theta": (float, "1.0"),
    },
    "prior": {
        "kinds": (_words, "reference, indep_jeffreys, jeffreys_rule, empirical_bayes"),
        "eb_multiplier": (float, "10"),
    },
    "mcmc": {
        "iterations": (int, "3000"),
        "burn_in": (int, "100"),
        "c": (_optional_float, "auto"),
        "d": (float, "3"),
        "seed": (int, "0"),
        "step2_literal": (_bool, "false"),
        "kde_points": (int, "256"),
    },
    "study": {
        "replications": (int, "300"),
        "master_seed": (int, "0"),
        "gamma": (float, "0.05"),
        "scoring_max_iter": (int, "1000"),
    },
    "prior_eval": {
        "log_xi_min": (float, "-3"),
        "log_xi_max": (float, "3"),
        "points": (int, "25"),
        "max_points": (int, "10000"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration; ``values[section][key]`` holds typed values."""

    values: dict
    text: str
    source: str | None = None

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[tuple[str, str], str]) -> "RunConfig":
        raw = _raw_from_text(self.text)
        for (sec, key), val in overrides.items():
            raw[sec][key] = str(val)
        return _build(raw, self.source)

    def write(self, path) -> None:
        Path(path).write_text(self.text)


def _raw_from_text(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    raw = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]; allowed: {', '.join(SCHEMA)}")
        for key, val in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}; allowed: {', '.join(SCHEMA[sec])}")
            raw[sec][key] = val
    return raw


def _build(raw: dict[str, dict[str, str]], source: str | None) -> RunConfig:
    if raw["meta"]["spec_version"].strip() != SPEC_VERSION:
        raise ConfigError(
            f"meta.spec_version is {raw['meta']['spec_version']!r}; this build reads {SPEC_VERSION!r}"
        )
    values: dict[str, dict[str, Any]] = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (parse, _) in keys.items():
            try:
                values[sec][key] = parse(raw[sec][key])
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key} = {raw[sec][key]!r}: {exc}") from None
    _validate(values)
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {raw[sec][k].strip()}" for k in keys)
        lines.append("")
    return RunConfig(values, "\n".join(lines), source)


def _validate(v: dict) -> None:
    def need(cond, field, msg):
        if not cond:
            raise ConfigError(f"{field}: {msg}")

    need(v["data"]["source"] in ("synthetic", "files"), "data.source", "must be 'synthetic' or 'files'")
    need(all(m >= 2 for m in v["data"]["grid_sizes"]), "data.grid_sizes",
         "every factor needs at least 2 locations")
    need(v["truth"]["sigma_sq"] > 0, "truth.sigma_sq", "must be positive")
    need(all(b > 0 for b in v["truth"]["beta"]), "truth.beta", "ranges must be positive")
    need(len(v["model"]["families"]) >= 1, "model.families", "at least one family is required")
    need(len(v["prior"]["kinds"]) >= 1, "prior.kinds", "at least one prior is required")
    need(v["prior"]["eb_multiplier"] > 0, "prior.eb_multiplier", "must be positive")
    m = v["mcmc"]
    need(m["iterations"] > m["burn_in"] >= 0, "mcmc.iterations", "must exceed mcmc.burn_in >= 0")
    need(m["d"] >= 1, "mcmc.d", "degrees of freedom must be at least 1")
    need(m["c"] is None or m["c"] >= 0, "mcmc.c", "must be nonnegative")
    need(m["kde_points"] >= 16, "mcmc.kde_points", "must be at least 16")
    need(v["study"]["replications"] >= 1, "study.replications", "must be at least 1")
    need(0 < v["study"]["gamma"] < 1, "study.gamma", "must lie in (0, 1)")
    pe = v["prior_eval"]
    need(pe["log_xi_min"] < pe["log_xi_max"], "prior_eval.log_xi_min", "must be below log_xi_max")
    need(pe["max_points"] >= 1, "prior_eval.max_points", "must be positive")


def load_config(path=None) -> RunConfig:
    """Read ``path`` (or use all defaults when ``None``)."""
    if path is None:
        return _build(_raw_from_text(""), None)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"configuration file not found: {p}")
    return _build(_raw_from_text(p.read_text()), str(p))


def default_config_text() -> str:
    return load_config(None).text
