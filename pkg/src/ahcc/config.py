"""Run configuration: a TOML document validated against a fixed schema.

Every table and key is optional and falls back to the default below; any key
not in the schema is rejected so a typo cannot silently change a run.
"""

from __future__ import annotations

import copy
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .chart_fields import GridError, build_grid
from .constraints import PROFILES, SourceRecipe
from .solver import SolverConfig


class ConfigError(ValueError):
    """Configuration failed validation; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ConfigIOError(OSError):
    """Configuration file missing or not parseable as TOML."""


# key -> (type, default); nested dicts are tables
SCHEMA = {
    "seed": (int, 0),
    "s": (float, 1.5),
    "grid": {
        "n": (int, 3),
        "N": (int, 33),
        "r_max": (float, 0.9),
        "fd_order": (int, 4),
    },
    "source": {
        "profile": (str, "rho-power"),
        "amplitude": (float, 1e-3),
        "decay": (float, 1.5),
        "seed": (int, 0),
        "width": (float, 0.25),
    },
    "solver": {
        "mode": (str, "ift-picard"),
        "linear_tol": (float, 1e-10),
        "linear_maxiter": (int, 2000),
        "tol": (float, 1e-10),
        "maxiter": (int, 25),
        "continuation_steps": (int, 1),
        "preconditioner": (str, "diagonal"),
        "krylov": (str, "gmres"),
        "jacobian_step": (float, 1e-4),
        "inner_tol": (float, 1e-2),
    },
    "verify": {
        "hbar": (str, ""),
        "xibar": (str, ""),
        "tol_R": (float, 5e-4),
        "tol_gauge": (float, 1e-4),
        "tol_div": (float, 1e-4),
        "decay_tol": (float, 0.3),
    },
    "background": {
        "tol": (float, 1e-4),
        "trials": (int, 20),
    },
    "lincheck": {
        "directions": (int, 5),
        "step": (float, 1e-4),
        "tol": (float, 1e-3),
        "manufactured": (bool, True),
        "manufactured_tol": (float, 1e-8),
    },
}


def _coerce(path, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(path, f"expected integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(path, f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def _merge(schema, doc, prefix=""):
    out = {}
    for key in doc:
        if key not in schema:
            raise ConfigError(prefix + key, "unknown key")
    for key, spec in schema.items():
        path = prefix + key
        if isinstance(spec, dict):
            sub = doc.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(path, "expected a table")
            out[key] = _merge(spec, sub, path + ".")
        else:
            typ, default = spec
            out[key] = _coerce(path, doc[key], typ) if key in doc else copy.copy(default)
    return out


@dataclass
class RunConfig:
    tree: dict
    base_dir: Path = field(default_factory=Path.cwd)
    warnings: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        cfg = cls(_merge(SCHEMA, doc), Path(base_dir or Path.cwd()))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigIOError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigIOError(f"{path}: not valid TOML: {exc}") from exc
        return cls.from_dict(doc, path.parent.resolve())

    def __getitem__(self, key):
        return self.tree[key]

    @property
    def n(self):
        return self.tree["grid"]["n"]

    def validate(self):
        g = self.tree["grid"]
        if g["n"] < 3:
            raise ConfigError("grid.n", f"must be >= 3, got {g['n']}")
        try:
            build_grid(g["n"], g["N"], g["r_max"], g["fd_order"])
        except GridError as exc:
            key = {"points": "N", "r_max": "r_max", "fd_order": "fd_order"}
            name = next((v for k, v in key.items() if k in str(exc)), "N")
            raise ConfigError(f"grid.{name}", str(exc)) from exc
        src = self.tree["source"]
        if src["profile"] not in PROFILES:
            raise ConfigError("source.profile", f"must be one of {PROFILES}")
        if src["amplitude"] < 0:
            raise ConfigError("source.amplitude", "must be >= 0")
        if src["width"] <= 0:
            raise ConfigError("source.width", "must be > 0")
        try:
            self.solver_config()
        except ValueError as exc:
            raise ConfigError("solver", str(exc)) from exc
        for key in ("tol", "trials"):
            if not self.tree["background"][key] > 0:
                raise ConfigError(f"background.{key}", "must be > 0")
        lc = self.tree["lincheck"]
        if lc["directions"] < 1:
            raise ConfigError("lincheck.directions", "must be >= 1")
        for key in ("step", "tol", "manufactured_tol"):
            if not lc[key] > 0:
                raise ConfigError(f"lincheck.{key}", "must be > 0")
        s, n = self.tree["s"], self.n
        if not 0 < s < n - 1:
            msg = f"s = {s} is outside (0, {n - 1}); the linearization need not be invertible"
            self.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
        for key in ("decay",):
            v = src[key]
            if not 0 < v < n - 1:
                msg = f"source.{key} = {v} is outside (0, {n - 1})"
                self.warnings.append(msg)
                warnings.warn(msg, stacklevel=2)

    def grid(self):
        g = self.tree["grid"]
        return build_grid(g["n"], g["N"], g["r_max"], g["fd_order"])

    def recipe(self):
        return SourceRecipe(**self.tree["source"])

    def solver_config(self):
        return SolverConfig(s=self.tree["s"], **self.tree["solver"])

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self):
        return copy.deepcopy(self.tree)
