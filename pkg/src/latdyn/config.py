"""Structured run configuration.

INI-style sections with strict key checking: unknown keys are rejected with
their full path, types parse explicitly, and every command is a pure
function of (config, seed, input files).  Shipped example configs live in
configs/ and carry the benchmark defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["RunConfig", "ConfigError", "load_config"]


class ConfigError(ValueError):
    """Invalid, missing, or unknown configuration entry."""


_SCHEMA: dict[str, dict[str, type]] = {
    "run": {"problem": str, "desk_scale_divisor": int},
    "fom": {"n_points": int, "n_side": int, "n_steps": int, "t_final": float, "dt_sub": int},
    "model": {
        "n_levels": int,
        "channels": str,  # comma list, one width per level
        "k": int,
        "t_max": float,
        "d_e": int,
        "n_c": int,
        "n_mod_layers": int,
        "tableau": str,
    },
    "train": {
        "ell_max": int,
        "batch_size": int,
        "lr": float,
        "weight_decay": float,
        "max_epochs": int,
        "patience": int,
        "lr_decay": float,
        "temporal_reg": bool,
        "ae_pretrain_epochs": int,
        "t1": float,
        "t2": float,
        "beta": float,
    },
    "eval": {
        "dt_factors": str,  # comma list of floats >= 1
        "noise_levels": str,
        "dt_divisor": int,
    },
    "io": {"output_dir": str, "seed": int},
}

_REQUIRED = {"run": ("problem",), "io": ("output_dir",)}

_DEFAULTS = {
    "run": {"desk_scale_divisor": 1},
    "fom": {"n_points": 1024, "n_side": 32, "n_steps": 1000, "t_final": 0.0, "dt_sub": 2},
    "model": {
        "n_levels": 0,  # 0: derived from the grid so the latent has 16 entries
        "channels": "8",
        "k": 16,
        "t_max": 100.0,
        "d_e": 64,
        "n_c": 8,
        "n_mod_layers": 2,
        "tableau": "ralston2",
    },
    "train": {
        "ell_max": 40,
        "batch_size": 16,
        "lr": 5e-4,
        "weight_decay": 1e-5,
        "max_epochs": 2000,
        "patience": 50,
        "lr_decay": 0.5,
        "temporal_reg": True,
        "ae_pretrain_epochs": 0,
        "t1": 0.0,
        "t2": 0.0,
        "beta": 0.8,
    },
    "eval": {"dt_factors": "1,2,4,8", "noise_levels": "0.0,0.05,0.1,0.2", "dt_divisor": 2},
    "io": {"seed": 0},
}


def _parse_value(section: str, key: str, raw: str):
    kind = _SCHEMA[section][key]
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from exc


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def problem(self) -> str:
        return str(self.values["run"]["problem"])

    @property
    def seed(self) -> int:
        return int(self.values["io"]["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(str(self.values["io"]["output_dir"]))

    def t_final(self) -> float:
        t = float(self.values["fom"]["t_final"])
        if t > 0:
            return t
        return 30.0 if self.problem == "burgers" else 10.0 * np.pi

    def split_times(self) -> tuple[float, float]:
        t1 = float(self.values["train"]["t1"])
        t2 = float(self.values["train"]["t2"])
        t = self.t_final()
        if t1 <= 0:
            t1 = 0.4 * t
        if t2 <= 0:
            t2 = 0.5 * t
        return t1, t2

    def dt_factors(self) -> tuple[float, ...]:
        return tuple(float(v) for v in str(self.values["eval"]["dt_factors"]).split(","))

    def noise_levels(self) -> tuple[float, ...]:
        return tuple(float(v) for v in str(self.values["eval"]["noise_levels"]).split(","))

    def channels(self, n_levels: int) -> tuple[int, ...]:
        parts = [int(v) for v in str(self.values["model"]["channels"]).split(",")]
        if len(parts) == 1:
            return tuple(parts * n_levels)
        if len(parts) != n_levels:
            raise ConfigError(f"[model] channels: expected 1 or {n_levels} entries")
        return tuple(parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    values: dict[str, dict[str, object]] = {s: dict(d) for s, d in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            values[section][key] = _parse_value(section, key, raw)

    for section, keys in _REQUIRED.items():
        for key in keys:
            if key not in values.get(section, {}):
                raise ConfigError(f"missing required key [{section}] {key}")

    problem = str(values["run"]["problem"])
    if problem not in ("burgers", "adr"):
        raise ConfigError(f"[run] problem: must be 'burgers' or 'adr', got {problem!r}")
    return RunConfig(values)
