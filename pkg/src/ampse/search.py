"""Constrained parameter search through composed models, oracle refinement and the feasibility sweep.

Global search minimizes, in the unit box ``u in [0, 1]^P``::

    L(u) = objective / objective_scale + sum_j lam_j * max(0, slack_j + margin)^2

where ``slack_j`` is the target-normalized constraint violation (positive =
violated) and ``objective_scale`` is the objective's magnitude at the box
midpoint. Penalty weights grow over ``len(penalty_schedule)`` phases.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import ad
from .errors import MissingOracleSpecs, NoModels, NonFiniteLoss
from .io import atomic_write_text, table_text
from .mlg import Mlg, compose_evaluate, oracle_evaluators
from .oracle.evaluate import evaluate_system
from .oracle.types import SpecSet, TestbenchSpec
from .seeding import rng
from .surrogate.data import unit_sample
from .surrogate.nn import as_evaluator


@dataclass(frozen=True)
class SearchConfig:
    n_starts: int = 64
    max_iters: int = 300
    lr: float = 0.05
    lr_floor: float = 0.05  # final step as a fraction of lr (cosine decay within each phase)
    penalty: Union[float, Mapping[str, float]] = 10.0
    penalty_schedule: tuple[float, ...] = (1.0, 10.0, 100.0)
    margin: float = 0.005
    oracle_budget: int = 60
    keep_top_k: int = 10
    prune_keep_m: int = 3
    seed: int = 0
    polish: bool = True

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not 1 <= self.keep_top_k <= self.n_starts:
            raise ValueError("keep_top_k must lie in [1, n_starts]")
        if self.prune_keep_m < 1:
            raise ValueError("prune_keep_m must be >= 1")
        if self.oracle_budget < 0:
            raise ValueError("oracle_budget must be >= 0")
        lams = self.penalty.values() if isinstance(self.penalty, Mapping) else [self.penalty]
        if any(lam < 0 for lam in lams) or any(s < 0 for s in self.penalty_schedule):
            raise ValueError("penalty weights must be >= 0")
        if not self.penalty_schedule:
            raise ValueError("penalty_schedule must have at least one phase")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if "penalty_schedule" in d:
            d["penalty_schedule"] = tuple(d["penalty_schedule"])
        return cls(**d)

    def lam(self, name: str) -> float:
        if isinstance(self.penalty, Mapping):
            return float(self.penalty.get(name, 0.0))
        return float(self.penalty)

    @property
    def final_scale(self) -> float:
        return self.penalty_schedule[-1]


@dataclass
class Candidate:
    params: dict
    predicted_specs: dict
    loss: float
    feasible_pred: bool
    oracle_specs: Optional[dict] = None
    feasible_oracle: Optional[bool] = None
    oracle_loss: Optional[float] = None
    provenance: dict = field(default_factory=dict)

    def vector(self, names) -> np.ndarray:
        return np.array([self.params[n] for n in names], dtype=float)


# --- backends: batched spec values and Jacobians over the full parameter vector ----

class ComposedBackend:
    """Per-module models composed through the module linking graph."""

    def __init__(self, g: Mlg, models: Mapping):
        missing = [v for v in g.vertices if v not in models]
        if not models or missing:
            raise NoModels(f"no model for {missing or list(g.vertices)}")
        self.g = g
        self.param_names = list(g.tb.param_names)
        self.evaluators = {v: as_evaluator(models[v], g.tb.module(v)) for v in g.vertices}
        self.point_evals = 0

    def _params(self, X):
        return dict(zip(self.param_names, np.atleast_2d(X).T))

    def evaluate(self, X) -> dict:
        self.point_evals += len(np.atleast_2d(X))
        out = compose_evaluate(self.g, self.evaluators, self._params(X))
        return {k: np.asarray(ad.value_of(v), dtype=float) for k, v in out.items()}

    def gradient(self, X):
        self.point_evals += len(np.atleast_2d(X))
        return compose_evaluate(self.g, self.evaluators, self._params(X), grad=True)


class OracleBackend:
    """The oracle itself, optionally slowed to emulate an expensive simulator.

    ``delay`` seconds are charged per point evaluation. With ``fd_step`` set,
    gradients come from central differences in the unit box (2P + 1 point
    evaluations per point) as a simulator would need; otherwise they are exact.
    """

    def __init__(self, tb: TestbenchSpec, delay: float = 0.0, fd_step: Optional[float] = None):
        self.tb = tb
        self.space = tb.full_space()
        self.param_names = list(tb.param_names)
        self.delay = delay
        self.fd_step = fd_step
        self.point_evals = 0
        self._g = None

    def _charge(self, n: int):
        self.point_evals += n
        if self.delay:
            time.sleep(self.delay * n)

    def evaluate(self, X) -> dict:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._charge(len(X))
        specs = evaluate_system(self.tb, dict(zip(self.param_names, X.T)), check_grid=False)
        return {k: np.broadcast_to(np.asarray(v, dtype=float), (len(X),)) for k, v in specs.items()}

    def gradient(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.fd_step is None:
            if self._g is None:
                from .mlg import build_graph
                self._g = build_graph(self.tb)
            self._charge(len(X))
            evals = oracle_evaluators(self.tb, check_grid=False)
            return compose_evaluate(self._g, evals, dict(zip(self.param_names, X.T)), grad=True)
        vals = self.evaluate(X)
        U = self.space.to_unit(X)
        jac = {k: np.zeros(X.shape) for k in vals}
        for j in range(X.shape[1]):
            up, dn = U.copy(), U.copy()
            up[:, j] = np.minimum(1.0, U[:, j] + self.fd_step)
            dn[:, j] = np.maximum(0.0, U[:, j] - self.fd_step)
            hi, lo = self.evaluate(self.space.from_unit(up)), self.evaluate(self.space.from_unit(dn))
            dx = (up[:, j] - dn[:, j]) * self.space.span[j]
            for k in vals:
                jac[k][:, j] = (hi[k] - lo[k]) / dx
        return vals, jac


def make_backend(g: Mlg, models):
    if hasattr(models, "gradient") and hasattr(models, "evaluate"):
        return models
    return ComposedBackend(g, models or {})


# --- loss ---------------------------------------------------------------------------

class Loss:
    def __init__(self, specs: SpecSet, cfg: SearchConfig, objective_scale: float):
        self.specs = specs
        self.cfg = cfg
        self.scale = objective_scale if np.isfinite(objective_scale) and objective_scale > 0 else 1.0

    def value(self, vals: dict, phase_scale: float) -> np.ndarray:
        obj = self.specs.objective
        loss = np.asarray(vals[obj.name], dtype=float) / self.scale
        for e in self.specs.constraints:
            lam = self.cfg.lam(e.name) * phase_scale
            if lam:
                loss = loss + lam * np.maximum(0.0, e.slack(vals[e.name]) + self.cfg.margin) ** 2
        return loss

    def grad(self, vals: dict, jac: dict, phase_scale: float) -> np.ndarray:
        obj = self.specs.objective
        g = np.asarray(jac[obj.name], dtype=float) / self.scale
        for e in self.specs.constraints:
            lam = self.cfg.lam(e.name) * phase_scale
            if not lam:
                continue
            s = e.slack(vals[e.name]) + self.cfg.margin
            ds = (-1.0 if e.direction == ">=" else 1.0) / (abs(e.target) or 1.0)
            g = g + (2.0 * lam * np.maximum(0.0, s) * ds)[:, None] * jac[e.name]
        return g


def objective_scale(backend, space, specs: SpecSet) -> float:
    vals = backend.evaluate(space.midpoint()[None, :])
    return float(abs(vals[specs.objective.name][0]))


# --- global search ---------------------------------------------------------------------

def _descend(backend, loss: Loss, space, U, cfg: SearchConfig) -> np.ndarray:
    """Projected Adam in the unit box with penalty continuation."""
    phases = len(cfg.penalty_schedule)
    per_phase = [cfg.max_iters // phases + (1 if i < cfg.max_iters % phases else 0) for i in range(phases)]
    m = np.zeros_like(U)
    v = np.zeros_like(U)
    t = 0
    for scale, iters in zip(cfg.penalty_schedule, per_phase):
        for it in range(iters):
            X = space.from_unit(U)
            vals, jac = backend.gradient(X)
            gu = loss.grad(vals, jac, scale) * space.span
            if not np.all(np.isfinite(gu)):
                raise NonFiniteLoss("non-finite loss gradient during descent")
            t += 1
            m = 0.9 * m + 0.1 * gu
            v = 0.999 * v + 0.001 * gu * gu
            frac = it / max(1, iters - 1)
            lr = cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))
            U = np.clip(U - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-12), 0.0, 1.0)
    return U


def _polish(backend, loss: Loss, space, X, scale: float):
    """One pass of +-1 grid-step moves per gridded dimension, kept when the loss drops."""
    cur = loss.value(backend.evaluate(X), scale)
    for j in np.flatnonzero(space.gridded):
        step = space.params[j].grid
        for sgn in (1.0, -1.0):
            trial = X.copy()
            trial[:, j] = np.clip(trial[:, j] + sgn * step, space.lower[j], space.upper[j])
            val = loss.value(backend.evaluate(trial), scale)
            better = val < cur
            X[better] = trial[better]
            cur = np.where(better, val, cur)
    return X


def _sort_key(c: Candidate, names, idx: int, objective: str):
    return (not c.feasible_pred, float(c.predicted_specs[objective]), tuple(c.vector(names)), idx)


def global_search(g: Mlg, models, specs: SpecSet, cfg: SearchConfig = SearchConfig()) -> list[Candidate]:
    """Multi-start penalized descent; returns up to ``keep_top_k`` candidates, best first."""
    backend = make_backend(g, models)
    tb = g.tb
    space = tb.full_space()
    names = list(tb.param_names)
    loss = Loss(specs, cfg, objective_scale(backend, space, specs))
    U0 = unit_sample("latin_hypercube", cfg.n_starts, space.dim, rng(cfg.seed, "starts"))
    U = _descend(backend, loss, space, U0, cfg)
    X = space.snap(space.from_unit(U))
    if cfg.polish and space.gridded.any():
        X = _polish(backend, loss, space, X, cfg.final_scale)
    vals = backend.evaluate(X)
    final = loss.value(vals, cfg.final_scale)
    if not np.all(np.isfinite(final)):
        raise NonFiniteLoss(f"{int(np.sum(~np.isfinite(final)))} starts ended with a non-finite loss")
    feas = specs.feasible(vals)
    cands = []
    for i in range(cfg.n_starts):
        cands.append(Candidate(
            params={n: float(X[i, j]) for j, n in enumerate(names)},
            predicted_specs={k: float(np.asarray(v)[i]) for k, v in vals.items()},
            loss=float(final[i]), feasible_pred=bool(np.broadcast_to(feas, (cfg.n_starts,))[i]),
            provenance={"start": i, "iterations": cfg.max_iters}))
    obj = specs.objective.name
    order = sorted(range(len(cands)), key=lambda i: _sort_key(cands[i], names, i, obj))
    return [cands[i] for i in order[:cfg.keep_top_k]]


# --- oracle verification and refinement ------------------------------------------------------

def verify(c: Candidate, tb: TestbenchSpec, specs: SpecSet, cfg: SearchConfig = SearchConfig(),
           objective_scale: Optional[float] = None) -> Candidate:
    """Attach oracle specs, feasibility and loss (grid enforced)."""
    values = evaluate_system(tb, c.params)
    out = replace(c, oracle_specs={k: float(v) for k, v in values.items()})
    out.feasible_oracle = bool(specs.feasible(out.oracle_specs))
    scale = objective_scale if objective_scale is not None else abs(out.oracle_specs[specs.objective.name])
    out.oracle_loss = float(Loss(specs, cfg, scale).value(out.oracle_specs, cfg.final_scale))
    return out


def local_refine(c: Candidate, tb: TestbenchSpec, cfg: SearchConfig = SearchConfig(),
                 specs: Optional[SpecSet] = None, models=None, g: Optional[Mlg] = None) -> Candidate:
    """Oracle coordinate descent on the ``prune_keep_m`` parameters with the largest |dL/du|.

    The gradient used for pruning comes from ``models`` composed over ``g`` when
    given, otherwise from the oracle. The incumbent never gets worse.
    """
    specs = specs or tb.spec_targets
    space = tb.full_space()
    names = list(tb.param_names)
    oracle = OracleBackend(tb)
    scale = abs(evaluate_system(tb, dict(zip(names, space.midpoint())))[specs.objective.name]) or 1.0
    loss = Loss(specs, cfg, scale)
    best = verify(c, tb, specs, cfg, scale)
    log = [best.oracle_loss]
    if cfg.oracle_budget == 0:
        best.provenance = {**c.provenance, "refine_evals": 0, "refine_log": log}
        return best

    x = c.vector(names)
    if models is not None:
        from .mlg import build_graph
        backend = make_backend(g or build_graph(tb), models)
    else:
        backend = oracle
    vals, jac = backend.gradient(x[None, :])
    gu = np.abs(loss.grad(vals, jac, cfg.final_scale)[0] * space.span)
    m = min(cfg.prune_keep_m, len(names))
    active = sorted(np.argsort(-gu, kind="stable")[:m])

    grid = np.array([p.grid or 0.0 for p in space.params])
    step = 0.1 * space.span
    step = np.where(space.gridded, np.maximum(grid, np.round(step / np.where(grid > 0, grid, 1.0)) * grid), step)
    min_step = np.where(space.gridded, grid, 1e-6 * space.span)
    cur = best.oracle_loss
    evals = 0
    while evals < cfg.oracle_budget:
        moved = False
        live = [j for j in active if step[j] >= min_step[j] - 1e-15]
        if not live:
            break
        for j in live:
            improved = False
            for sgn in (1.0, -1.0):
                if evals >= cfg.oracle_budget:
                    break
                trial = x.copy()
                trial[j] = np.clip(trial[j] + sgn * step[j], space.lower[j], space.upper[j])
                trial = space.snap(trial)
                if trial[j] == x[j]:
                    continue
                evals += 1
                val = float(loss.value(oracle.evaluate(trial[None, :]), cfg.final_scale)[0])
                if val < cur:
                    x, cur, improved, moved = trial, val, True, True
                    log.append(cur)
                    break
            if not improved:
                if space.gridded[j]:
                    half = np.floor(step[j] / 2 / grid[j]) * grid[j]
                    step[j] = half if half >= grid[j] else 0.0
                else:
                    step[j] *= 0.5
        if not moved and all(step[j] < min_step[j] - 1e-15 for j in active):
            break
        assert all(a >= b for a, b in zip(log, log[1:])), "incumbent loss increased"
    params = {n: float(v) for n, v in zip(names, x)}
    refined = verify(replace(c, params=params), tb, specs, cfg, scale)
    if refined.oracle_loss > best.oracle_loss:  # cannot happen; keep the incumbent regardless
        refined = best
    refined.provenance = {**c.provenance, "refine_evals": evals, "active": [names[j] for j in active],
                          "refine_log": log, "status": "budget_exhausted" if evals >= cfg.oracle_budget
                          else "converged"}
    return refined


def rank_candidates(cs: Sequence[Candidate], specs: SpecSet) -> list[Candidate]:
    missing = [i for i, c in enumerate(cs) if c.oracle_specs is None]
    if missing:
        raise MissingOracleSpecs(f"candidates {missing} have no oracle specs")
    obj = specs.objective.name
    return sorted(cs, key=lambda c: (not specs.feasible(c.oracle_specs), c.oracle_specs[obj]))


# --- feasibility sweep ---------------------------------------------------------------------

def sweep_specs(tb: TestbenchSpec, n_bits: int, rate: float) -> SpecSet:
    """ENOB within half a bit of the resolution, the target rate, minimum power."""
    from .oracle.types import SpecEntry
    obj = tb.spec_targets.objective
    return SpecSet((SpecEntry("ENOB", ">=", n_bits - 0.5, "bit"), SpecEntry("f_s_max", ">=", float(rate), "GS/s"),
                    SpecEntry(obj.name, obj.direction, None, obj.unit, True)))


@dataclass
class FeasibilityMap:
    bits: tuple[int, ...]
    rates: tuple[float, ...]
    feasible: np.ndarray      # len(bits) x len(rates) bool
    min_power: np.ndarray     # mW, NaN where infeasible
    witnesses: dict = field(default_factory=dict)  # (n, f_s) -> Candidate
    searched: dict = field(default_factory=dict)   # n -> number of pooled candidates

    def cell(self, n: int, rate: float) -> dict:
        i, j = self.bits.index(n), self.rates.index(rate)
        return {"feasible": bool(self.feasible[i, j]),
                "min_power": None if np.isnan(self.min_power[i, j]) else float(self.min_power[i, j]),
                "candidate": self.witnesses.get((n, rate))}

    def is_monotone(self) -> bool:
        """Feasibility never reappears at higher resolution or higher rate."""
        F = self.feasible
        return bool(np.all(F[1:, :] <= F[:-1, :]) and np.all(F[:, 1:] <= F[:, :-1]))

    def to_table(self, param_names: Sequence[str] = ()) -> str:
        header = ["n:bit", "f_s:GS/s", "feasible:1", "min_power:mW"] + [f"{p}:1" for p in param_names]
        rows = []
        for i, n in enumerate(self.bits):
            for j, r in enumerate(self.rates):
                w = self.witnesses.get((n, r))
                extra = [w.params[p] for p in param_names] if w is not None else [None] * len(param_names)
                p = None if np.isnan(self.min_power[i, j]) else float(self.min_power[i, j])
                rows.append([int(n), float(r), bool(self.feasible[i, j]), p, *extra])
        return table_text(header, rows)


def _sweep_row(tb, n, rates, models_n, cfg, g_builder):
    """Search every rate at resolution ``n``; pool candidates; verify the pool at each cell."""
    tb_n = tb.with_configs(n=n)
    g = g_builder(tb_n)
    backend = models_n if models_n is not None else OracleBackend(tb_n)
    pool = []
    for r in rates:
        specs = sweep_specs(tb_n, n, r)
        pool += global_search(g, backend, specs, replace(cfg, seed=cfg.seed + 1009 * n))
    seen, unique = set(), []
    for c in pool:
        key = tuple(c.vector(tb.param_names))
        if key not in seen:
            seen.add(key)
            unique.append(c)
    row = []
    for r in rates:
        tb_c = tb_n.with_configs(f_s=float(r))
        specs = sweep_specs(tb_c, n, r)
        verified = [verify(c, tb_c, specs, cfg) for c in unique]
        ok = [c for c in verified if c.feasible_oracle]
        best = min(ok, key=lambda c: c.oracle_specs[specs.objective.name]) if ok else None
        row.append(best)
    return row, len(unique)


def feasibility_sweep(tb: TestbenchSpec, models=None, bits_range: Sequence[int] = range(4, 11),
                      rate_range: Sequence[float] = (0.5, 1.0, 2.0, 4.0, 8.0),
                      cfg: SearchConfig = SearchConfig(n_starts=16, max_iters=150, keep_top_k=8),
                      workers: int = 1) -> FeasibilityMap:
    """Bits-versus-rate feasibility with oracle-verified witnesses.

    ``models`` maps each resolution to a module-model map (or a backend); with
    ``None`` the search runs on the oracle. Models are trained at the
    testbench's own rate: power scales linearly with f_s and f_s_max does not
    depend on it, so one model set per resolution serves every rate, while the
    oracle verification uses the cell's true (n, f_s).
    """
    from .mlg import build_graph
    bits, rates = tuple(int(b) for b in bits_range), tuple(float(r) for r in rate_range)
    if not bits or not rates:
        raise ValueError("bits_range and rate_range must be non-empty")

    def task(n):
        m = None if models is None else models[n]
        if m is not None and not (hasattr(m, "gradient") and hasattr(m, "evaluate")):
            m = ComposedBackend(build_graph(tb.with_configs(n=n)), m)
        return _sweep_row(tb, n, rates, m, cfg, build_graph)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(task, bits))
    else:
        rows = [task(n) for n in bits]
    F = np.zeros((len(bits), len(rates)), dtype=bool)
    P = np.full((len(bits), len(rates)), np.nan)
    witnesses, searched = {}, {}
    obj = tb.spec_targets.objective.name
    for i, (row, count) in enumerate(rows):
        searched[bits[i]] = count
        for j, c in enumerate(row):
            if c is not None:
                F[i, j] = True
                P[i, j] = c.oracle_specs[obj]
                witnesses[(bits[i], rates[j])] = c
    return FeasibilityMap(bits, rates, F, P, witnesses, searched)


# --- output --------------------------------------------------------------------------------

def candidates_table(cs: Sequence[Candidate], tb: TestbenchSpec) -> str:
    space = tb.full_space()
    specs = [p for p in tb.outputs]
    header = ["rank:1", "start:1"] + [f"{p.name}:{p.unit}" for p in space.params]
    header += [f"pred_{p.name}:{p.unit}" for p in specs] + [f"oracle_{p.name}:{p.unit}" for p in specs]
    header += ["loss:1", "feasible_pred:1", "feasible_oracle:1"]
    rows = []
    for k, c in enumerate(cs):
        o = c.oracle_specs or {}
        rows.append([k, c.provenance.get("start"), *(c.params[n] for n in tb.param_names),
                     *(c.predicted_specs.get(p.name) for p in specs), *(o.get(p.name) for p in specs),
                     c.loss, c.feasible_pred, c.feasible_oracle])
    return table_text(header, rows)


def save_table(text: str, path):
    return atomic_write_text(path, text)


def plot_feasibility(fm: FeasibilityMap, path) -> None:
    """Scatter of feasible (filled) and infeasible (hollow) cells as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ampse"
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, n in enumerate(fm.bits):
        for j, r in enumerate(fm.rates):
            ok = fm.feasible[i, j]
            ax.scatter(r, n, marker="o", s=60, facecolors="tab:blue" if ok else "none", edgecolors="tab:blue")
    ax.set_xscale("log")
    ax.set_xlabel("sampling rate (GS/s)")
    ax.set_ylabel("resolution (bit)")
    fig.tight_layout()
    buf = __import__("io").StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())
