"""Run configuration: sectioned INI files with ``re,im`` complex entries."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cost import CostConfig
from .kinematics import MaterialParameters
from .optimizer import StageSchedule

__all__ = ["ConfigError", "RunConfig", "format_complex", "parse_complex", "parse_stages"]


class ConfigError(ValueError):
    pass


def parse_complex(text: str) -> complex:
    parts = [p.strip() for p in text.split(",")]
    try:
        if len(parts) == 1:
            return complex(float(parts[0]), 0.0)
        if len(parts) == 2:
            return complex(float(parts[0]), float(parts[1]))
    except ValueError:
        pass
    raise ConfigError(f"cannot parse complex value {text!r} (expected 're,im')")


def format_complex(z: complex) -> str:
    return f"{z.real!r},{z.imag!r}"


def parse_stages(text: str) -> tuple:
    """``"100:0.8; rest:0.1"`` -> ``((100, 0.8), (None, 0.1))``."""
    stages = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        try:
            n, b = (t.strip() for t in item.split(":"))
            stages.append((None if n == "rest" else int(n), float(b)))
        except ValueError:
            raise ConfigError(f"cannot parse stage {item!r} (expected 'steps:beta' or 'rest:beta')") from None
    return tuple(stages)


def format_stages(stages) -> str:
    return "; ".join(f"{'rest' if n is None else n}:{b!r}" for n, b in stages)


@dataclass(frozen=True)
class GeometrySection:
    radius: float = 0.3
    refinements: int = 4
    deformation: str = ""


@dataclass(frozen=True)
class MaterialSection:
    omega: float = 0.3
    omega_p: float = 4 / 137
    tau: float = 100.0
    eps_xx: complex = 1 + 0j
    eps_xy: complex = 0j
    eps_yy: complex = 1 + 0j


@dataclass(frozen=True)
class CostSection:
    target_xx: complex = 0.5 + 0.01j
    target_xy: complex = 0.05 + 0j
    target_yx: complex = 0.05 + 0j
    target_yy: complex = 0.5 + 0.01j
    alpha: float = 1e-3
    alpha_sigma: float = 10.0
    beta: float = 0.1
    stages: str = ""


@dataclass(frozen=True)
class OptimizerSection:
    max_steps: int = 500
    tol: float = 1e-4
    armijo_beta: float = 0.5
    armijo_gamma: float = 0.01
    history_cap: int = 0


@dataclass(frozen=True)
class OutputSection:
    directory: str = "run"
    vtk_every: int = 25
    log_format: str = "csv"


@dataclass(frozen=True)
class CheckSection:
    refinements: int = 2
    directions: int = 10
    amplitude: float = 0.002


_SECTIONS = {
    "geometry": GeometrySection,
    "material": MaterialSection,
    "cost": CostSection,
    "optimizer": OptimizerSection,
    "output": OutputSection,
    "check": CheckSection,
}


def _convert(tp, raw: str, where: str):
    try:
        if tp in ("complex", complex):
            return parse_complex(raw)
        if tp in ("int", int):
            return int(raw)
        if tp in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: invalid value {raw!r}") from None


def _format(v) -> str:
    if isinstance(v, complex):
        return format_complex(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    material: MaterialSection = field(default_factory=MaterialSection)
    cost: CostSection = field(default_factory=CostSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)
    check: CheckSection = field(default_factory=CheckSection)

    def __post_init__(self):
        self.validate()

    # -- parsing ---------------------------------------------------------------

    @classmethod
    def from_string(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        kwargs = {}
        for name in cp.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            sec = _SECTIONS[name]
            types = {f.name: f.type for f in fields(sec)}
            values = {}
            for key, raw in cp[name].items():
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                values[key] = _convert(types[key], raw, f"[{name}] {key}")
            kwargs[name] = sec(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            return cls.from_string(text)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_string(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in _SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_string())

    def replace(self, **sections) -> "RunConfig":
        """Copy with some sections updated from keyword dicts, e.g. ``material={"omega": 0.4}``."""
        new = {k: replace(getattr(self, k), **v) for k, v in sections.items()}
        return replace(self, **new)

    # -- validation and construction -------------------------------------------

    def validate(self):
        g, o, out = self.geometry, self.optimizer, self.output
        if not 0 < g.radius < 0.5:
            raise ConfigError(f"radius must lie in (0, 0.5), got {g.radius}")
        if not 0 <= g.refinements <= 9:
            raise ConfigError(f"refinements must lie in [0, 9], got {g.refinements}")
        if o.max_steps < 0 or not o.tol > 0 or o.history_cap < 0:
            raise ConfigError("optimizer: need max_steps >= 0, tol > 0, history_cap >= 0")
        if out.vtk_every < 0 or out.log_format not in ("csv", "json"):
            raise ConfigError("output: need vtk_every >= 0 and log_format in {csv, json}")
        if self.check.refinements < 0 or self.check.directions < 1 or not self.check.amplitude > 0:
            raise ConfigError("check: need refinements >= 0, directions >= 1, amplitude > 0")
        try:
            self.material_parameters()
            self.cost_config()
            if self.cost.stages:
                self.schedule()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def material_parameters(self) -> MaterialParameters:
        m = self.material
        eps = np.array([[m.eps_xx, m.eps_xy], [m.eps_xy, m.eps_yy]])
        return MaterialParameters(eps, m.omega, m.omega_p, m.tau)

    def cost_config(self) -> CostConfig:
        c = self.cost
        target = np.array([[c.target_xx, c.target_xy], [c.target_yx, c.target_yy]])
        return CostConfig(target, c.alpha, c.alpha_sigma, c.beta)

    def schedule(self) -> StageSchedule | None:
        stages = parse_stages(self.cost.stages)
        return StageSchedule(stages) if stages else None
