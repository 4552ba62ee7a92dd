"""Run configuration in INI form.

Every key has a default, so an empty file (or ``run --default``) gives the
plate-with-hole benchmark.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Optional

from .fem import PlateGeometry
from .solver import NewtonConfig


class ConfigError(ValueError):
    pass


@dataclass
class MaterialConfig:
    E: float = 70.0
    nu: float = 0.2
    sigma_y: float = 0.243
    h: float = 2.24
    q: float = 0.0
    delta: float = 1.0
    # Young's modulus of a kinematic-hardening moduli matrix with the same
    # Poisson ratio; absent means no kinematic hardening
    kinematic_modulus: Optional[float] = None


@dataclass
class LoadingConfig:
    increments: tuple = (0.5, 0.5)
    node_set: str = "top_edge"
    direction: int = 1


@dataclass
class OutputConfig:
    directory: str = "out"
    residuals: bool = True
    fields: bool = True
    line_search: tuple = ((2, 2), (2, 10))
    s_max: float = 1.0
    s_points: int = 41


@dataclass
class RunConfig:
    material: MaterialConfig = field(default_factory=MaterialConfig)
    geometry: PlateGeometry = field(default_factory=lambda: PlateGeometry(refinement=6, grading=1.3))
    loading: LoadingConfig = field(default_factory=LoadingConfig)
    solver: NewtonConfig = field(default_factory=NewtonConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        m = self.material
        if not (m.E > 0 and m.sigma_y > 0 and -1.0 < m.nu < 0.5):
            raise ConfigError("[material] needs E > 0, sigma_y > 0 and -1 < nu < 0.5")
        if m.h < 0 or m.q < 0 or m.delta <= 0:
            raise ConfigError("[material] needs h >= 0, q >= 0, delta > 0")
        if m.kinematic_modulus is not None and m.kinematic_modulus <= 0:
            raise ConfigError("[material] kinematic_modulus must be positive")
        if not self.loading.increments:
            raise ConfigError("[loading] increments must not be empty")
        if self.loading.direction not in (0, 1):
            raise ConfigError("[loading] direction must be 0 (x) or 1 (y)")
        if self.output.s_points < 2 or self.output.s_max <= 0:
            raise ConfigError("[output] needs s_points >= 2 and s_max > 0")
        try:
            self.geometry.validate()
        except ValueError as exc:
            raise ConfigError(f"[geometry] {exc}") from exc


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _pairs(text):
    out = []
    for item in text.replace(",", " ").split():
        inc, _, it = item.partition(":")
        if not it:
            raise ValueError(f"expected increment:iteration, got {item!r}")
        out.append((int(inc), int(it)))
    return tuple(out)


def _optional_float(text):
    text = text.strip()
    return None if text.lower() in ("", "none", "off") else float(text)


_SCHEMA = {
    "material": {"E": float, "nu": float, "sigma_y": float, "h": float, "q": float,
                 "delta": float, "kinematic_modulus": _optional_float},
    "geometry": {"half_width": float, "half_length": float, "radius": float,
                 "refinement": int, "grading": float},
    "loading": {"increments": _floats, "node_set": str, "direction": int},
    "solver": {"tol": float, "maxiter": int, "beta": float, "gamma": float,
               "maxbacktrack": int, "relative": "bool"},
    "output": {"directory": str, "residuals": "bool", "fields": "bool",
               "line_search": _pairs, "s_max": float, "s_points": int},
}


def _parse(cp, source):
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        values[section] = {}
        for key in cp[section]:
            conv = _SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                if conv == "bool":
                    val = cp[section].getboolean(key)
                else:
                    val = conv(cp[section][key])
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from exc
            values[section][key] = val
    return values


def load_config(path=None, text=None):
    """Read a config from ``path`` or a string; missing keys take defaults."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    source = "<string>" if path is None else str(path)
    try:
        if path is not None:
            with open(path) as fh:
                cp.read_file(fh, source=source)
        elif text is not None:
            cp.read_string(text, source=source)
    except OSError as exc:
        raise ConfigError(f"{source}: {exc.strerror or exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    v = _parse(cp, source)
    base = RunConfig()
    try:
        cfg = RunConfig(
            material=MaterialConfig(**{**vars(base.material), **v.get("material", {})}),
            geometry=PlateGeometry(**{**vars(base.geometry), **v.get("geometry", {})}),
            loading=LoadingConfig(**{**vars(base.loading), **v.get("loading", {})}),
            solver=NewtonConfig(**{**vars(base.solver), **v.get("solver", {})}),
            output=OutputConfig(**{**vars(base.output), **v.get("output", {})}),
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig):
    """INI text that :func:`load_config` reads back to ``cfg``."""
    m, g, lo, s, o = cfg.material, cfg.geometry, cfg.loading, cfg.solver, cfg.output
    kin = "none" if m.kinematic_modulus is None else repr(m.kinematic_modulus)
    return "\n".join([
        "[material]", f"E = {m.E!r}", f"nu = {m.nu!r}", f"sigma_y = {m.sigma_y!r}", f"h = {m.h!r}",
        f"q = {m.q!r}", f"delta = {m.delta!r}", f"kinematic_modulus = {kin}", "",
        "[geometry]", f"half_width = {g.half_width!r}", f"half_length = {g.half_length!r}",
        f"radius = {g.radius!r}", f"refinement = {g.refinement}", f"grading = {g.grading!r}", "",
        "[loading]", "increments = " + ", ".join(repr(x) for x in lo.increments),
        f"node_set = {lo.node_set}", f"direction = {lo.direction}", "",
        "[solver]", f"tol = {s.tol!r}", f"maxiter = {s.maxiter}", f"beta = {s.beta!r}",
        f"gamma = {s.gamma!r}", f"maxbacktrack = {s.maxbacktrack}", f"relative = {s.relative}", "",
        "[output]", f"directory = {o.directory}", f"residuals = {o.residuals}", f"fields = {o.fields}",
        "line_search = " + ", ".join(f"{a}:{b}" for a, b in o.line_search),
        f"s_max = {o.s_max!r}", f"s_points = {o.s_points}", "",
    ])
