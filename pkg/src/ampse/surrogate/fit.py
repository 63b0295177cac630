"""Convenience drivers: one surrogate per module, and validation scores."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..oracle.evaluate import system_trace
from ..oracle.types import TestbenchSpec
from .data import Dataset, ModuleOracle, sample_dataset, sample_points
from .nn import Hyper, evaluate_model, split_indices, train

DEFAULT_HIDDEN = (32, 32)


def module_datasets(tb: TestbenchSpec, n: int, seed: int, sampler: str = "latin_hypercube") -> dict:
    """Independent samples of each module's own input space (parameters + interface inputs)."""
    out = {}
    for mid in tb.module_ids:
        o = ModuleOracle(tb, mid)
        out[mid] = sample_dataset(o.space, sampler, n, o, seed, provenance={"module": mid})
    return out


def module_datasets_from_system(tb: TestbenchSpec, n: int, seed: int, sampler: str = "latin_hypercube",
                                filter: Optional[Callable] = None, budget_factor: int = 10) -> dict:
    """Per-module datasets read off system-level traces of (optionally filtered) full-space samples.

    Interface inputs then take the values the upstream modules actually produce.
    """
    space = tb.full_space()
    holder = {}

    def trace(X):
        values, _ = system_trace(tb, dict(zip(tb.param_names, X.T)), check_grid=False)
        holder["values"] = values
        return np.zeros((len(X), 1))

    ds = sample_dataset(space, sampler, n, trace, seed, filter=filter, output_names=("_",),
                        budget_factor=budget_factor)
    values = holder["values"]
    X = dict(zip(tb.param_names, ds.X.T))
    out = {}
    for m in tb.modules:
        cols = [X[f"{m.id}.{p}"] for p in m.space.names]
        cols += [np.broadcast_to(values[_feed(tb, m.id, p.name)], (len(ds),)) for p in m.interface_in]
        ys = [np.broadcast_to(values[f"{m.id}.{p.name}"], (len(ds),)) for p in m.output_ports]
        space_m = m.input_space()
        out[m.id] = Dataset(tuple(space_m.names), tuple(p.name for p in m.output_ports), np.stack(cols, -1),
                            np.stack(ys, -1), tuple(p.unit for p in space_m.params),
                            tuple(p.unit for p in m.output_ports),
                            {**ds.provenance, "module": m.id, "source": "system"})
    return out


def _feed(tb: TestbenchSpec, mid: str, port: str) -> str:
    for b in tb.bindings:
        if b.consumer == f"{mid}.{port}":
            return b.producer
    raise KeyError(f"{mid}.{port} is unbound")


def train_modules(datasets: dict, hyper: Optional[Hyper] = None, hidden: Sequence[int] = DEFAULT_HIDDEN) -> dict:
    hyper = hyper or Hyper()
    return {mid: train(ds, (ds.X.shape[1], *hidden, ds.Y.shape[1]), hyper) for mid, ds in datasets.items()}


def validation_nrmse(m, ds: Dataset, hyper: Optional[Hyper] = None) -> dict:
    """NRMSE on the validation rows held out by ``train`` for the same seed."""
    hyper = hyper or Hyper()
    _, va = split_indices(len(ds), hyper.seed, hyper.val_fraction)
    return evaluate_model(m, ds.subset(va))


def fit_module_models(tb: TestbenchSpec, n: int = 400, seed: int = 0, hyper: Optional[Hyper] = None,
                      hidden: Sequence[int] = DEFAULT_HIDDEN) -> tuple[dict, dict]:
    hyper = hyper or Hyper(seed=seed)
    data = module_datasets(tb, n, seed)
    return train_modules(data, hyper, hidden), data


__all__ = ["DEFAULT_HIDDEN", "fit_module_models", "module_datasets", "module_datasets_from_system",
           "sample_points", "train_modules", "validation_nrmse"]
