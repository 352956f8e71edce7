"""Run configuration: sectioned key=value files with a fixed, versioned schema."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import ConfigError

__all__ = ["SCHEMA_VERSION", "SCHEMA", "RunConfig", "load_config"]

SCHEMA_VERSION = 1


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    t = text.strip().lower()
    return None if t in ("", "none", "off") else float(t)


def _opt_int(text: str) -> Optional[int]:
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else int(t)


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _str(text: str) -> str:
    return text.strip()


_PARSERS = {bool: _bool, int: int, float: float, str: _str, "opt_float": _opt_float, "opt_int": _opt_int, "ints": _int_list}

# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "schema_version": (int, SCHEMA_VERSION),
        "seed": (int, 0),
        "workers": (int, 1),
        "log_level": (str, "INFO"),
    },
    "simulate": {
        "mode": (str, "mqarch"),
        "spec": (str, ""),
        "bins": (int, 100000),
        "horizon": (float, 1e6),
        "q": (int, 100),
        "bins_per_day": (int, 1000),
    },
    "preprocess": {
        "input": (str, ""),
        "window_days": (int, 100),
        "trailing": (bool, True),
        "intraday": (bool, True),
        "martingalise": (bool, True),
    },
    "moments": {
        "panel": (str, ""),
        "q": (int, 50),
        "causal": (bool, True),
        "mirror": (bool, False),
        "winsorize": ("opt_float", None),
    },
    "calibrate": {
        "panel": (str, ""),
        "q": (int, 50),
        "q_cross": ("opt_int", None),
        "steps": ("ints", (1, 2, 3, 4)),
        "mirror": (bool, True),
        "winsorize": ("opt_float", None),
        "ridge": (float, 0.0),
        "method": (str, "sequential"),
        "sweeps": (int, 1),
        "tol": ("opt_float", None),
        "smooth": (bool, False),
        "full_cross": (bool, False),
        "leverage_quadratic": (bool, False),
    },
    "mle": {
        "events": (str, ""),
        "panel": (str, ""),
        "mode": (str, "exact_zhawkes"),
        "init": (str, ""),
        "bin_length": (float, 1.0),
        "horizon": ("opt_float", None),
        "max_iter": (int, 500),
    },
    "factor": {
        "manifest": (str, ""),
        "panel": (str, ""),
        "factor": (str, ""),
        "q": (int, 30),
        "mirror": (bool, True),
        "winsorize": ("opt_float", None),
        "ridge": (float, 0.0),
        "use_panel_vol": (bool, False),
    },
    "report": {
        "model": (str, ""),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        full = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for s, keys in self.values.items():
            full[s].update(keys)
        self.values = full

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        if value is not None or SCHEMA[section][key][0] in ("opt_float", "opt_int"):
            self.values[section][key] = value

    def override(self, section: str, **kwargs) -> None:
        """Set every non-None keyword; CLI flags take precedence over file values."""
        for k, v in kwargs.items():
            if v is not None:
                self.set(section, k, v)

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def to_text(self) -> str:
        lines = []
        for s in SCHEMA:
            lines.append(f"[{s}]")
            for k in SCHEMA[s]:
                v = self.values[s][k]
                if isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                elif v is None:
                    v = "none"
                elif isinstance(v, float):
                    v = format(v, ".17g")
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def load_config(path: Optional[str]) -> RunConfig:
    """Parse a config file against the schema; unknown sections or keys are errors."""
    if not path:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for s in parser.sections():
        if s not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{s}]")
        values[s] = {}
        for k, text in parser.items(s):
            if k not in SCHEMA[s]:
                raise ConfigError(f"{path}: unknown key [{s}] {k}")
            kind = SCHEMA[s][k][0]
            try:
                values[s][k] = _PARSERS[kind](text)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for [{s}] {k}: {exc}") from exc
    cfg = RunConfig(values)
    if cfg.get("run", "schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version {cfg.get('run', 'schema_version')} is not {SCHEMA_VERSION}")
    return cfg
