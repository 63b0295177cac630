"""Ground-truth evaluation of testbench modules and of the composed system."""

from __future__ import annotations

import graphlib
from dataclasses import replace
from functools import lru_cache

import numpy as np

from .. import ad
from ..errors import CycleError, MissingPort, OutOfBounds
from ..seeding import rng
from .formulas import FORMULAS, NONE, REDUCERS, Parasitics
from .types import STAGES, PerturbationSpec, TestbenchSpec, Waveform


def _parasitics(tb: TestbenchSpec) -> Parasitics:
    p = tb.perturbation
    if p.stage == "schematic":
        return NONE
    return Parasitics(p.cap_scale, p.res_scale, p.cap_offset)


def _check_params(module, params: dict, check_grid: bool):
    missing = [n for n in module.space.names if n not in params]
    if missing:
        raise OutOfBounds(f"{module.id}: parameters not assigned: {missing}")
    cols = [np.ravel(ad.value_of(params[n])) for n in module.space.names]
    width = max(len(c) for c in cols)
    x = np.stack([np.broadcast_to(c, (width,)) for c in cols], axis=-1)
    bad = module.space.violations(x, check_grid=check_grid)
    if bad:
        raise OutOfBounds(f"{module.id}: " + "; ".join(bad))


def evaluate_module(tb: TestbenchSpec, module_id: str, params: dict, interface_in: dict,
                    check: bool = True, check_grid: bool = True):
    """Return ``(metrics, interface_out)`` of one module at the testbench's stage."""
    module = tb.module(module_id)
    if check:
        _check_params(module, params, check_grid)
    missing = [p.name for p in module.interface_in if p.name not in interface_in]
    if missing:
        raise MissingPort(f"{module_id}: interface inputs not assigned: {missing}")
    formula = FORMULAS[module.formula_id]
    p = {n: params[n] for n in module.space.names}
    x = {q.name: interface_in[q.name] for q in module.interface_in}
    metrics, iface_out = formula.fn(p, x, tb.cfg, _parasitics(tb))
    if tb.perturbation.stage == "silicon":
        factors = silicon_factors(tb)
        metrics = {k: v * factors[(module_id, k)][0] + factors[(module_id, k)][1] for k, v in metrics.items()}
    return metrics, iface_out


@lru_cache(maxsize=256)
def silicon_factors(tb: TestbenchSpec) -> dict:
    """Per-metric ``(scale, absolute offset)`` drawn once from the stage seed.

    The offset is ``N(0, metric_offset_sigma)`` times the metric's magnitude at
    the schematic-stage centre of its input box, so one sigma is meaningful
    across metrics whose units differ by many orders of magnitude.
    """
    pert = tb.perturbation
    nominal = replace(tb, perturbation=replace(pert, stage="schematic"))
    out = {}
    for m in tb.modules:
        centre = dict(zip(m.space.names, m.space.midpoint()))
        iface = {p.name: 0.5 * (p.lower + p.upper) for p in m.interface_in}
        ref, _ = evaluate_module(nominal, m.id, centre, iface, check=False)
        for name in (q.name for q in m.metrics):
            g = rng(pert.seed, "silicon", tb.id, m.id, name)
            scale = 1.0 + pert.metric_scale_sigma * g.standard_normal()
            offset = pert.metric_offset_sigma * g.standard_normal() * abs(float(ref[name]))
            out[(m.id, name)] = (float(scale), float(offset))
    return out


def module_order(tb: TestbenchSpec) -> list[str]:
    """Dependency order of modules implied by the bindings (stdlib sorter)."""
    deps = {m.id: set() for m in tb.modules}
    for b in tb.bindings:
        deps[b.dst[0]].add(b.src[0])
    sorter = graphlib.TopologicalSorter(deps)
    try:
        return list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise CycleError(f"bindings form a cycle: {' -> '.join(exc.args[1])}", exc.args[1]) from exc


def split_full(tb: TestbenchSpec, full_params: dict) -> dict:
    """Qualified ``module.param`` assignment -> per-module local assignments."""
    missing = [n for n in tb.param_names if n not in full_params]
    if missing:
        raise OutOfBounds(f"full parameter assignment is missing {missing}")
    local = {m.id: {} for m in tb.modules}
    for name in tb.param_names:
        mid, _, pname = name.partition(".")
        local[mid][pname] = full_params[name]
    return local


def system_trace(tb: TestbenchSpec, full_params: dict, check_grid: bool = True):
    """Evaluate every module in binding order; return ``(port_values, specs)``."""
    local = split_full(tb, full_params)
    feeds = {b.consumer: b.producer for b in tb.bindings}
    values = {}
    for mid in module_order(tb):
        module = tb.module(mid)
        iface = {p.name: values[feeds[f"{mid}.{p.name}"]] for p in module.interface_in}
        metrics, outs = evaluate_module(tb, mid, local[mid], iface, check_grid=check_grid)
        for k, v in {**metrics, **outs}.items():
            values[f"{mid}.{k}"] = v
    specs = REDUCERS[tb.reducer].fn(values, {k: full_params[k] for k in tb.param_names}, tb.cfg)
    return values, specs


def evaluate_system(tb: TestbenchSpec, full_params: dict, check_grid: bool = True) -> dict:
    return system_trace(tb, full_params, check_grid)[1]


def evaluate_system_array(tb: TestbenchSpec, X, check_grid: bool = True) -> np.ndarray:
    """Batch form: ``X`` is ``B x P`` in ``tb.param_names`` order; returns ``B x S``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    specs = evaluate_system(tb, dict(zip(tb.param_names, X.T)), check_grid)
    return np.stack([np.broadcast_to(np.asarray(specs[p.name], dtype=float), (X.shape[0],))
                     for p in tb.outputs], axis=-1)


def apply_stage(tb: TestbenchSpec, stage: str, seed: int | None = None) -> TestbenchSpec:
    """Return a copy of ``tb`` evaluated at ``stage``; the input is untouched."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    pert = tb.perturbation
    seed = pert.seed if seed is None else int(seed)
    return replace(tb, perturbation=PerturbationSpec(
        stage=stage, seed=seed, cap_scale=pert.cap_scale, res_scale=pert.res_scale,
        cap_offset=pert.cap_offset, metric_scale_sigma=pert.metric_scale_sigma,
        metric_offset_sigma=pert.metric_offset_sigma))


# --- transient waveforms ------------------------------------------------------

def settling_inputs(tb: TestbenchSpec, full_params: dict, check_grid: bool = True):
    """Time constant (ps) and total noise (V) driving the DAC settling waveform."""
    values, specs = system_trace(tb, full_params, check_grid)
    tau = [k for k in values if k.endswith(".tau")]
    if not tau or "v_noise_total" not in specs:
        raise KeyError(f"testbench {tb.id} exposes no settling time constant")
    return np.asarray(values[tau[0]], dtype=float), np.asarray(specs["v_noise_total"], dtype=float)


def settling_curve(tau, t, v_fs: float):
    tau = np.asarray(tau, dtype=float)[..., None]
    return v_fs * (1.0 - np.exp(-np.asarray(t, dtype=float) / tau))


def simulate_transient(tb: TestbenchSpec, full_params: dict, duration: float, dt: float,
                       noise_seed: int, noise_scale: float = 1.0, check_grid: bool = True) -> Waveform:
    if not dt > 0 or not duration >= dt:
        raise ValueError("need dt > 0 and duration >= dt")
    tau, sigma = settling_inputs(tb, full_params, check_grid)
    n = int(np.floor(duration / dt + 1e-9)) + 1
    t = dt * np.arange(n)
    v = settling_curve(float(tau), t, tb.cfg["V_FS"]).reshape(-1)
    noise = rng(noise_seed, "transient").standard_normal(n) * float(sigma) * noise_scale
    return Waveform(dt=dt, samples=v + noise, label_horizon=duration)


def simulate_batch(tb: TestbenchSpec, X, n_samples: int, dt: float, noise_seed: int,
                   noise_scale: float = 1.0, check_grid: bool = False) -> np.ndarray:
    """``B x n_samples`` waveforms for the rows of ``X``; row ``i`` uses sub-seed ``i``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tau, sigma = settling_inputs(tb, dict(zip(tb.param_names, X.T)), check_grid)
    t = dt * np.arange(n_samples)
    v = settling_curve(tau, t, tb.cfg["V_FS"])
    noise = np.stack([rng(noise_seed, "transient", i).standard_normal(n_samples) for i in range(len(X))])
    return v + noise * (np.broadcast_to(sigma, (len(X),))[:, None] * noise_scale)
