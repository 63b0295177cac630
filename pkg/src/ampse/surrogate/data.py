"""Datasets, design-of-experiments sampling and the delimited dataset file."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..errors import EmptyDataset, FilterStarvation, ParseError
from ..io import atomic_write_text, table_text
from ..oracle.evaluate import evaluate_module, evaluate_system_array
from ..oracle.types import ParameterSpace, TestbenchSpec
from ..seeding import rng

SAMPLERS = ("uniform", "latin_hypercube")


def column_stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
    return mean, std


@dataclass
class Dataset:
    """Raw samples plus the column statistics used for normalization."""

    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    X: np.ndarray  # raw inputs, N x D
    Y: np.ndarray  # raw targets, N x M
    input_units: tuple[str, ...] = ()
    output_units: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if len(self.X) == 0:
            raise EmptyDataset("dataset has no samples")
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("input and target row counts differ")
        if self.X.shape[1] != len(self.input_names) or self.Y.shape[1] != len(self.output_names):
            raise ValueError("column names do not match data widths")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dataset contains NaN or Inf")
        self.input_units = tuple(self.input_units) or ("1",) * len(self.input_names)
        self.output_units = tuple(self.output_units) or ("1",) * len(self.output_names)
        self.x_mean, self.x_std = column_stats(self.X)
        self.y_mean, self.y_std = column_stats(self.Y)

    def __len__(self):
        return len(self.X)

    @property
    def norm_stats(self) -> dict:
        return {"x_mean": self.x_mean, "x_std": self.x_std, "y_mean": self.y_mean, "y_std": self.y_std}

    @property
    def inputs(self) -> np.ndarray:
        return (self.X - self.x_mean) / self.x_std

    @property
    def targets(self) -> np.ndarray:
        return (self.Y - self.y_mean) / self.y_std

    def denormalize_inputs(self, z):
        return np.asarray(z) * self.x_std + self.x_mean

    def denormalize_targets(self, z):
        return np.asarray(z) * self.y_std + self.y_mean

    def subset(self, idx) -> "Dataset":
        return Dataset(self.input_names, self.output_names, self.X[idx], self.Y[idx],
                       self.input_units, self.output_units, dict(self.provenance))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.input_names, self.output_names)).encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.Y).tobytes())
        return h.hexdigest()


# --- samplers -----------------------------------------------------------------

def unit_sample(sampler: str, n: int, dim: int, g: np.random.Generator) -> np.ndarray:
    if sampler == "uniform":
        return g.random((n, dim))
    if sampler == "latin_hypercube":
        u = np.empty((n, dim))
        for j in range(dim):
            u[:, j] = (g.permutation(n) + g.random(n)) / n
        return u
    raise ValueError(f"unknown sampler {sampler!r}")


def sample_points(space: ParameterSpace, sampler: str, n: int, seed: int, *labels) -> np.ndarray:
    return space.from_unit(unit_sample(sampler, n, space.dim, rng(seed, "sample", *labels)))


def sample_dataset(space: ParameterSpace, sampler: str, n: int, oracle_eval: Callable, seed: int,
                   filter: Optional[Callable] = None, output_names=None, output_units=None,
                   provenance: Optional[dict] = None, budget_factor: int = 10) -> Dataset:
    """Draw ``n`` accepted points and label them with ``oracle_eval``.

    ``filter`` maps a raw ``B x D`` batch to a boolean acceptance vector.
    Rejected points are replaced by fresh draws until ``budget_factor * n``
    points have been drawn in total.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    accepted = []
    drawn, round_ = 0, 0
    while sum(len(a) for a in accepted) < n:
        need = n - sum(len(a) for a in accepted)
        if drawn + need > budget_factor * n:
            raise FilterStarvation(f"only {n - need} of {n} points accepted after {drawn} draws")
        X = sample_points(space, sampler, need if round_ else n, seed, round_)
        drawn += len(X)
        round_ += 1
        if filter is not None:
            X = X[np.asarray(filter(X), dtype=bool)]
        accepted.append(X)
    X = np.concatenate(accepted)[:n]
    Y = np.asarray(oracle_eval(X), dtype=float)
    names = output_names if output_names is not None else getattr(oracle_eval, "output_names", None)
    units = output_units if output_units is not None else getattr(oracle_eval, "output_units", ())
    if names is None:
        names = tuple(f"y{i}" for i in range(Y.shape[1]))
    prov = {"sampler": sampler, "seed": int(seed), "drawn": drawn, **(provenance or {})}
    prov.setdefault("stage", getattr(oracle_eval, "stage", "n/a"))
    return Dataset(tuple(space.names), tuple(names), X, Y, tuple(p.unit for p in space.params),
                   tuple(units), prov)


# --- oracles in the ``X -> Y`` form ----------------------------------------------

class ModuleOracle:
    """Module metrics and interface outputs as a batch function of params + interface inputs."""

    def __init__(self, tb: TestbenchSpec, module_id: str):
        self.tb = tb
        self.module = tb.module(module_id)
        self.space = self.module.input_space()
        self.output_names = tuple(p.name for p in self.module.output_ports)
        self.output_units = tuple(p.unit for p in self.module.output_ports)
        self.stage = tb.perturbation.stage

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        npar = self.module.space.dim
        params = dict(zip(self.module.space.names, X[:, :npar].T))
        iface = dict(zip((p.name for p in self.module.interface_in), X[:, npar:].T))
        metrics, outs = evaluate_module(self.tb, self.module.id, params, iface, check_grid=False)
        values = {**metrics, **outs}
        return np.stack([np.broadcast_to(np.asarray(values[k], dtype=float), (len(X),))
                         for k in self.output_names], axis=-1)


class SystemOracle:
    """System specs as a batch function of the full (qualified) parameter vector."""

    def __init__(self, tb: TestbenchSpec):
        self.tb = tb
        self.space = tb.full_space()
        self.output_names = tuple(p.name for p in tb.outputs)
        self.output_units = tuple(p.unit for p in tb.outputs)
        self.stage = tb.perturbation.stage

    def __call__(self, X) -> np.ndarray:
        return evaluate_system_array(self.tb, X, check_grid=False)


# --- dataset file -----------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> Path:
    comments = [f"{k}: {ds.provenance[k]}" for k in sorted(ds.provenance)]
    comments.append(f"inputs: {len(ds.input_names)}")
    header = [f"{n}:{u}" for n, u in zip(ds.input_names, ds.input_units)]
    header += [f"{n}:{u}" for n, u in zip(ds.output_names, ds.output_units)]
    rows = (list(map(float, x)) + list(map(float, y)) for x, y in zip(ds.X, ds.Y))
    return atomic_write_text(path, table_text(header, rows, comments))


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    prov, body = {}, []
    for ln in lines:
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition(":")
            prov[key.strip()] = val.strip()
        elif ln.strip():
            body.append(ln)
    if "inputs" not in prov or not body:
        raise ParseError(f"{path}: not a dataset file")
    d = int(prov.pop("inputs"))
    cols = [c.rsplit(":", 1) if ":" in c else (c, "1") for c in body[0].split(",")]
    try:
        data = np.array([[float(v) for v in row.split(",")] for row in body[1:]], dtype=float)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    for k in ("seed", "drawn"):
        if k in prov:
            prov[k] = int(prov[k])
    names = [c[0] for c in cols]
    units = [c[1] for c in cols]
    return Dataset(tuple(names[:d]), tuple(names[d:]), data[:, :d], data[:, d:],
                   tuple(units[:d]), tuple(units[d:]), prov)
