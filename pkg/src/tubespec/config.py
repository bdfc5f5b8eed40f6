"""Run configuration read from an INI file."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


# section -> key -> (parser, default)
SCHEMA = {
    "domain": {
        "R0": (float, 2.0),
        "eps": (_floats, (0.2, 0.15, 0.1, 0.07, 0.05)),
    },
    "mesh": {
        "h_far": (float, 0.05),
        "h_junction_fraction": (float, 0.05),
        "grading_ratio": (float, 1.3),
        "order": (str, "P2"),
        "budget": (int, 2_000_000),
        "exterior_h_far": (float, 0.05),
        "exterior_h_junction": (float, 0.01),
        "exterior_grading_ratio": (float, 1.2),
    },
    "solver": {
        "shift": (float, 0.0),
        "num_eigs": (int, 4),
        "tol": (float, 1e-10),
        "max_iter": (int, 50),
    },
    "exterior": {
        "k": (_ints, (1, 2)),
        "R": (_floats, (4.0, 8.0, 16.0, 32.0)),
        "R_host": (float, 16.0),
    },
    "sweep": {
        "branches": (_ints, (1, 2)),
        "fit_points": (int, 4),
    },
    "verify": {
        "seed": (int, 0),
        "oracle_h_far": (float, 0.02),
    },
    "output": {
        "directory": (str, "tubespec-out"),
    },
}


@dataclass
class RunConfig:
    R0: float = 2.0
    eps: tuple = (0.2, 0.15, 0.1, 0.07, 0.05)
    h_far: float = 0.05
    h_junction_fraction: float = 0.05
    grading_ratio: float = 1.3
    order: str = "P2"
    budget: int = 2_000_000
    exterior_h_far: float = 0.05
    exterior_h_junction: float = 0.01
    exterior_grading_ratio: float = 1.2
    shift: float = 0.0
    num_eigs: int = 4
    tol: float = 1e-10
    max_iter: int = 50
    k: tuple = (1, 2)
    R: tuple = (4.0, 8.0, 16.0, 32.0)
    R_host: float = 16.0
    branches: tuple = (1, 2)
    fit_points: int = 4
    seed: int = 0
    oracle_h_far: float = 0.02
    directory: str = "tubespec-out"

    def validate(self):
        if not self.R0 > 1:
            raise ConfigError("domain.R0 must exceed 1")
        if len(self.eps) < 4 or any(not 0 < e <= 0.4 for e in self.eps):
            raise ConfigError("domain.eps needs at least four values in (0, 0.4]")
        if list(self.eps) != sorted(self.eps, reverse=True):
            raise ConfigError("domain.eps must be decreasing")
        if self.order not in ("P1", "P2"):
            raise ConfigError("mesh.order must be P1 or P2")
        if self.h_far <= 0 or self.exterior_h_far <= 0 or self.h_junction_fraction <= 0:
            raise ConfigError("mesh sizes must be positive")
        for q in (self.grading_ratio, self.exterior_grading_ratio):
            if not 1 < q <= 2:
                raise ConfigError("grading ratios must lie in (1, 2]")
        if self.budget < 1:
            raise ConfigError("mesh.budget must be positive")
        if self.num_eigs < 1:
            raise ConfigError("solver.num_eigs must be at least 1")
        if any(j < 1 or j > self.num_eigs for j in self.branches):
            raise ConfigError("sweep.branches must lie between 1 and solver.num_eigs")
        if any(k not in (1, 2, 3) for k in self.k):
            raise ConfigError("exterior.k values must be 1, 2 or 3")
        if len(self.R) < 3:
            raise ConfigError("exterior.R needs at least three radii")
        if any(r < 2 for r in self.R) or len(set(self.R)) != len(self.R):
            raise ConfigError("exterior.R values must be distinct and at least 2")
        if self.R_host < 2:
            raise ConfigError("exterior.R_host must be at least 2")
        if not 2 <= self.fit_points <= len(self.eps):
            raise ConfigError("sweep.fit_points must lie between 2 and the number of eps values")
        return self

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get("OUTPUT_DIR") or self.directory)


def load_config(path=None) -> RunConfig:
    """Parse an INI file; missing keys take defaults, unknown keys are errors."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                conv = SCHEMA[section][key][0]
                try:
                    values[key] = conv(raw.strip())
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    cfg = RunConfig(**values)
    return cfg.validate()


def default_ini() -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default) in keys.items():
            text = ", ".join(str(v) for v in default) if isinstance(default, tuple) else str(default)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)
