"""Immutable value types describing a characterization testbench."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

STAGES = ("schematic", "layout", "silicon")


@dataclass(frozen=True)
class Param:
    name: str
    lower: float
    upper: float
    grid: Optional[float] = None
    unit: str = "1"


@dataclass(frozen=True)
class ParameterSpace:
    params: tuple[Param, ...]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        for p in self.params:
            if not p.lower < p.upper:
                raise ValueError(f"{p.name}: lower must be < upper")
            if p.grid is not None:
                if p.grid <= 0:
                    raise ValueError(f"{p.name}: grid step must be positive")
                steps = (p.upper - p.lower) / p.grid
                if abs(steps - round(steps)) > 1e-9 * max(1.0, abs(steps)):
                    raise ValueError(f"{p.name}: range is not a multiple of the grid step")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def dim(self) -> int:
        return len(self.params)

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.params], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.params], dtype=float)

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def gridded(self) -> np.ndarray:
        return np.array([p.grid is not None for p in self.params])

    def midpoint(self) -> np.ndarray:
        """Box centre, snapped onto the grid of gridded dimensions."""
        return self.snap(0.5 * (self.lower + self.upper))

    def to_unit(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / self.span

    def from_unit(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * self.span

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def snap(self, x) -> np.ndarray:
        """Round gridded coordinates to the nearest grid point inside the box."""
        x = np.array(x, dtype=float, copy=True)
        for j, p in enumerate(self.params):
            if p.grid is not None:
                k = np.round((x[..., j] - p.lower) / p.grid)
                x[..., j] = np.clip(p.lower + k * p.grid, p.lower, p.upper)
        return x

    def violations(self, x, check_grid: bool = True) -> list[str]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        bad = []
        for j, p in enumerate(self.params):
            col = x[:, j]
            tol = 1e-12 * (p.upper - p.lower)
            if not np.all(np.isfinite(col)) or np.any(col < p.lower - tol) or np.any(col > p.upper + tol):
                bad.append(f"{p.name} outside [{p.lower}, {p.upper}]")
            elif check_grid and p.grid is not None:
                k = (col - p.lower) / p.grid
                if np.any(np.abs(k - np.round(k)) > 1e-9):
                    bad.append(f"{p.name} off grid (step {p.grid})")
        return bad


@dataclass(frozen=True)
class Port:
    name: str
    unit: str
    lower: Optional[float] = None
    upper: Optional[float] = None


@dataclass(frozen=True)
class ModuleSpec:
    id: str
    space: ParameterSpace
    interface_in: tuple[Port, ...]
    interface_out: tuple[Port, ...]
    metrics: tuple[Port, ...]
    formula_id: str

    def port(self, name: str) -> Optional[Port]:
        for p in (*self.interface_in, *self.interface_out, *self.metrics):
            if p.name == name:
                return p
        return None

    @property
    def output_ports(self) -> tuple[Port, ...]:
        """Ports a surrogate of this module predicts: metrics, then interface outputs."""
        return (*self.metrics, *self.interface_out)

    def input_space(self) -> ParameterSpace:
        """Parameters followed by the interface inputs, as one sampling box."""
        extra = tuple(Param(p.name, p.lower, p.upper, None, p.unit) for p in self.interface_in)
        return ParameterSpace(self.space.params + extra)


@dataclass(frozen=True)
class Binding:
    producer: str  # "module.port"
    consumer: str

    @property
    def src(self) -> tuple[str, str]:
        m, _, p = self.producer.partition(".")
        return m, p

    @property
    def dst(self) -> tuple[str, str]:
        m, _, p = self.consumer.partition(".")
        return m, p


@dataclass(frozen=True)
class SpecEntry:
    name: str
    direction: str  # ">=" or "<="
    target: Optional[float]
    unit: str
    minimize: bool = False

    def slack(self, value):
        """Signed, target-normalized constraint violation (positive = violated)."""
        scale = abs(self.target) if self.target else 1.0
        if self.direction == ">=":
            return (self.target - value) / scale
        return (value - self.target) / scale

    def satisfied(self, value) -> np.ndarray:
        if self.target is None:
            return np.ones(np.shape(value), dtype=bool)
        value = np.asarray(value, dtype=float)
        return value >= self.target if self.direction == ">=" else value <= self.target


@dataclass(frozen=True)
class SpecSet:
    entries: tuple[SpecEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate spec names in {names}")
        if sum(e.minimize for e in self.entries) != 1:
            raise ValueError("exactly one spec entry must be flagged minimize")
        for e in self.entries:
            if e.direction not in (">=", "<="):
                raise ValueError(f"{e.name}: direction must be '>=' or '<='")
            if e.target is None and not e.minimize:
                raise ValueError(f"{e.name}: constraint without a target")

    @property
    def objective(self) -> SpecEntry:
        return next(e for e in self.entries if e.minimize)

    @property
    def constraints(self) -> tuple[SpecEntry, ...]:
        return tuple(e for e in self.entries if not e.minimize and e.target is not None)

    def feasible(self, values: dict) -> np.ndarray:
        ok = True
        for e in self.constraints:
            ok = np.logical_and(ok, e.satisfied(values[e.name]))
        return np.asarray(ok)

    def with_targets(self, **targets) -> "SpecSet":
        return SpecSet(tuple(replace(e, target=targets.get(e.name, e.target)) for e in self.entries))


@dataclass(frozen=True)
class PerturbationSpec:
    stage: str = "schematic"
    seed: int = 0
    cap_scale: float = 0.15
    res_scale: float = 0.10
    cap_offset: float = 2.0
    metric_scale_sigma: float = 0.05
    metric_offset_sigma: float = 0.01

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class TestbenchSpec:
    id: str
    modules: tuple[ModuleSpec, ...]
    bindings: tuple[Binding, ...]
    configs: tuple[tuple[str, float], ...]
    spec_targets: SpecSet
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    reducer: str = ""
    outputs: tuple[Port, ...] = ()

    __test__ = False  # not a pytest class

    @property
    def cfg(self) -> dict:
        return dict(self.configs)

    def module(self, module_id: str) -> ModuleSpec:
        for m in self.modules:
            if m.id == module_id:
                return m
        raise KeyError(module_id)

    @property
    def module_ids(self) -> list[str]:
        return [m.id for m in self.modules]

    @property
    def param_names(self) -> list[str]:
        """Qualified ``module.param`` names of the full design vector."""
        return [f"{m.id}.{p.name}" for m in self.modules for p in m.space.params]

    def full_space(self) -> ParameterSpace:
        return ParameterSpace(
            tuple(replace(p, name=f"{m.id}.{p.name}") for m in self.modules for p in m.space.params)
        )

    def with_configs(self, **updates) -> "TestbenchSpec":
        cfg = self.cfg
        for k, v in updates.items():
            if k not in cfg:
                raise KeyError(k)
            cfg[k] = v
        return replace(self, configs=tuple(sorted(cfg.items())))


@dataclass(frozen=True)
class Waveform:
    dt: float
    samples: np.ndarray
    label_horizon: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(self.samples) == 0:
            raise ValueError("empty waveform")

    def prefix(self, n: int) -> "Waveform":
        return Waveform(self.dt, self.samples[:n], self.label_horizon)


def lsb(n_bits, v_fs: float):
    return v_fs / 2.0 ** n_bits

