"""End-to-end flow: testbench -> graph -> (CEPA) -> data -> models -> (TL) -> search -> refine -> report.

Each stage writes its artifacts atomically under the output directory and
records their sha256 in ``manifest.json``. Stage failures are re-raised as
``StageError`` tagged with the stage name; artifacts of completed stages stay.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import cepa as cepa_mod
from .. import mlg, search
from ..errors import AmpseError, BindingError, StageError
from ..io import atomic_write_text
from ..oracle import apply_stage, load_testbench, save_testbench
from ..oracle.types import TestbenchSpec
from ..seeding import derive_seed
from ..surrogate import Hyper, evaluate_model, save_dataset, train
from ..surrogate.data import sample_points
from ..surrogate.fit import module_datasets, module_datasets_from_system, validation_nrmse
from ..transfer import adapter_hyper, attach_adapters, train_adapters
from .config import PipelineConfig, testbench_ref
from .package import export_package, import_package

log = logging.getLogger(__name__)


@dataclass
class Run:
    cfg: PipelineConfig
    out: Path
    workers: int = 1
    artifacts: dict = field(default_factory=dict)
    tb_base: Optional[TestbenchSpec] = None    # stage the models are trained on
    tb_target: Optional[TestbenchSpec] = None  # stage the design is searched and verified on
    graph: Optional[mlg.Mlg] = None
    cepa_model: Optional[cepa_mod.CepaModel] = None
    datasets: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    candidates: list = field(default_factory=list)
    refined: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def seed(self, *labels) -> int:
        return derive_seed(self.cfg["seed"], *labels)

    def record(self, path: Path) -> Path:
        rel = str(path.relative_to(self.out))
        self.artifacts[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def write(self, rel: str, text: str) -> Path:
        return self.record(atomic_write_text(self.out / rel, text))

    def search_config(self, **over) -> search.SearchConfig:
        s = dict(self.cfg["search"])
        s["penalty_schedule"] = tuple(s["penalty_schedule"])
        s["seed"] = self.seed("search")
        s.update(over)
        return search.SearchConfig(**s)


def _stage(name):
    def wrap(fn):
        def inner(run: Run, *a, **k):
            log.info("stage %s", name)
            try:
                return fn(run, *a, **k)
            except StageError:
                raise
            except (AmpseError, ValueError, KeyError, OSError, ArithmeticError) as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.stage = name
        return inner
    return wrap


def _hyper(run: Run, module_id: str, seed: int) -> tuple[Hyper, tuple, object]:
    t = run.cfg.training_for(module_id)
    h = Hyper(lr=t["lr"], epochs=t["epochs"], batch=t["batch"], weight_decay=t["weight_decay"], seed=seed,
              patience=t["patience"], schedule=t["schedule"])
    return h, tuple(t["hidden"]), t["log_inputs"]


# --- stages ------------------------------------------------------------------------

@_stage("testbench")
def stage_testbench(run: Run):
    tb = load_testbench(testbench_ref(run.cfg))
    if run.cfg["specs"]:
        unknown = [k for k in run.cfg["specs"] if k not in {e.name for e in tb.spec_targets.entries}]
        if unknown:
            raise KeyError(f"spec overrides name unknown specs {unknown}")
        tb = replace(tb, spec_targets=tb.spec_targets.with_targets(**run.cfg["specs"]))
    stage = run.cfg["stage"]
    run.tb_target = tb if stage == "schematic" else apply_stage(tb, stage, run.seed("silicon"))
    use_tl = stage != "schematic" and run.cfg["transfer"]["enabled"]
    run.tb_base = tb if use_tl else run.tb_target
    run.record(save_testbench(run.tb_target, run.out / "testbench.json"))


@_stage("mlg")
def stage_graph(run: Run):
    g = mlg.build_graph(run.tb_target)
    diags = mlg.validate(g)
    if diags:
        raise BindingError("; ".join(f"{d.code}: {d.message}" for d in diags))
    run.graph = g
    run.write("mlg.txt", g.to_text())


@_stage("cepa")
def stage_cepa(run: Run):
    c = run.cfg["cepa"]
    tb = run.tb_base
    space = tb.full_space()
    Xtr = sample_points(space, "latin_hypercube", c["n_train"], run.seed("cepa"), "train")
    Xte = sample_points(space, "uniform", c["n_train"], run.seed("cepa"), "test")
    ctr = cepa_mod.make_corpus(tb, Xtr, window_fraction=c["window_fraction"], noise_seed=run.seed("cepa", "noise"))
    cte = cepa_mod.make_corpus(tb, Xte, window_fraction=c["window_fraction"],
                               noise_seed=run.seed("cepa", "noise-test"))
    run.record(cepa_mod.save_corpus(ctr, run.out / "cepa" / "corpus.csv", tb))
    hyper = cepa_mod.CepaHyper(epochs=c["epochs"], seed=run.seed("cepa", "train") % (2 ** 32),
                               pass_above=c["pass_above"], fail_below=c["fail_below"])
    m = cepa_mod.train_classifier(ctr.prefixes, ctr.labels, hyper, c["window_fraction"], ctr.horizon)
    run.cepa_model = m
    stats = cepa_mod.assess(m, cte)
    run.summary["cepa"] = {k: round(float(v), 6) for k, v in vars(stats).items()}
    run.write("cepa/report.json", json.dumps(run.summary["cepa"], indent=2, sort_keys=True) + "\n")


@_stage("data")
def stage_data(run: Run):
    s = run.cfg["sampling"]
    seed = run.seed("data")
    if run.cepa_model is not None:
        filt = cepa_mod.filter_space(s["sampler"], run.cepa_model, run.tb_base, noise_seed=run.seed("cepa", "filter"))
        run.datasets = module_datasets_from_system(run.tb_base, s["n_samples"], seed, s["sampler"], filt)
    else:
        run.datasets = module_datasets(run.tb_base, s["n_samples"], seed, s["sampler"])
    for mid, ds in sorted(run.datasets.items()):
        run.record(save_dataset(ds, run.out / "data" / f"{mid}.csv"))


@_stage("train")
def stage_train(run: Run):
    report = {}
    for mid in sorted(run.datasets):
        ds = run.datasets[mid]
        hyper, hidden, log_inputs = _hyper(run, mid, run.seed("train", mid) % (2 ** 32))
        m = train(ds, (ds.X.shape[1], *hidden, ds.Y.shape[1]), hyper, log_inputs=log_inputs)
        run.models[mid] = m
        report[mid] = {k: round(v, 6) for k, v in validation_nrmse(m, ds, hyper).items()}
    run.summary["validation_nrmse"] = report
    prov = {"seed": run.cfg["seed"], "datasets": {k: v.content_hash() for k, v in sorted(run.datasets.items())}}
    run.record(export_package(run.models, run.tb_base, run.out / "models" / "models.ampse", prov, run.cepa_model))


def _datasets_like(run: Run, tb: TestbenchSpec, n: int, seed: int, sampler: str = "latin_hypercube") -> dict:
    """Per-module data drawn the way the training data was (system traces when CEPA shaped it)."""
    if run.cepa_model is not None:
        return module_datasets_from_system(tb, n, seed, sampler)
    return module_datasets(tb, n, seed, sampler)


@_stage("transfer")
def stage_transfer(run: Run):
    t = run.cfg["transfer"]
    small = _datasets_like(run, run.tb_target, t["n_samples"], run.seed("transfer"))
    hold = _datasets_like(run, run.tb_target, 200, run.seed("transfer", "hold"), "uniform")
    report, adapted = {}, {}
    for mid in sorted(run.models):
        tl = attach_adapters(run.models[mid], run.tb_target.perturbation.stage)
        tl = train_adapters(tl, small[mid], adapter_hyper(epochs=t["epochs"], lr=t["lr"],
                                                          seed=run.seed("transfer", "fit", mid) % (2 ** 32)))
        adapted[mid] = tl
        report[mid] = {"base": round(evaluate_model(run.models[mid], hold[mid])["aggregate"], 6),
                       "adapted": round(evaluate_model(tl, hold[mid])["aggregate"], 6)}
    run.models = adapted
    run.summary["transfer"] = report
    run.record(export_package(run.models, run.tb_target, run.out / "models" / "models_tl.ampse",
                              {"seed": run.cfg["seed"]}))


@_stage("search")
def stage_search(run: Run):
    specs = run.tb_target.spec_targets
    run.candidates = search.global_search(run.graph, run.models, specs, run.search_config())
    run.write("search/global.csv", search.candidates_table(run.candidates, run.tb_target))


@_stage("refine")
def stage_refine(run: Run):
    cfg = run.search_config()
    specs = run.tb_target.spec_targets
    run.refined = [search.local_refine(c, run.tb_target, cfg, specs, run.models, run.graph)
                   for c in run.candidates]
    mode = "evaluate-only" if cfg.oracle_budget == 0 else "coordinate-descent"
    run.summary["refine"] = {"mode": mode, "oracle_evals": int(sum(c.provenance["refine_evals"]
                                                                  for c in run.refined))}
    run.write("search/refined.csv", search.candidates_table(run.refined, run.tb_target))


@_stage("report")
def stage_report(run: Run):
    specs = run.tb_target.spec_targets
    ranked = search.rank_candidates(run.refined, specs)
    run.write("report/ranked.csv", search.candidates_table(ranked, run.tb_target))
    best = ranked[0]
    run.summary.update({
        "testbench": run.tb_target.id, "stage": run.tb_target.perturbation.stage,
        "n_candidates": len(ranked),
        "n_feasible_pred": int(sum(c.feasible_pred for c in run.candidates)),
        "n_feasible_oracle": int(sum(bool(c.feasible_oracle) for c in ranked)),
        "best": {"params": best.params, "oracle_specs": best.oracle_specs, "feasible": best.feasible_oracle},
    })


@_stage("sweep")
def stage_sweep(run: Run):
    s = run.cfg["sweep"]
    tb = run.tb_target
    cfg = run.search_config(n_starts=s["n_starts"], max_iters=s["max_iters"],
                            keep_top_k=min(8, s["n_starts"]))
    models = None
    if not s["use_oracle"]:
        models = {}
        for n in s["bits"]:
            tb_n = tb.with_configs(n=n)
            data = module_datasets(tb_n, s["n_samples"], run.seed("sweep", n))
            models[n] = {}
            for mid, ds in sorted(data.items()):
                hyper, hidden, log_inputs = _hyper(run, mid, run.seed("sweep", "train", n, mid) % (2 ** 32))
                models[n][mid] = train(ds, (ds.X.shape[1], *hidden, ds.Y.shape[1]), hyper, log_inputs=log_inputs)
    fm = search.feasibility_sweep(tb, models, s["bits"], s["rates"], cfg, workers=run.workers)
    run.write("report/sweep.csv", fm.to_table(tb.param_names))
    if s["plot"]:
        search.plot_feasibility(fm, run.out / "report" / "sweep.svg")
        run.record(run.out / "report" / "sweep.svg")
    run.summary["sweep"] = {"monotone": fm.is_monotone(), "feasible_cells": int(fm.feasible.sum()),
                            "cells": int(fm.feasible.size)}
    return fm


def finish(run: Run):
    run.write("report/summary.json", json.dumps(_jsonable(run.summary), indent=2, sort_keys=True) + "\n")
    manifest = {k: run.artifacts[k] for k in sorted(run.artifacts) if k != "manifest.json"}
    atomic_write_text(run.out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def start(cfg: PipelineConfig, workers: int = 1) -> Run:
    run = Run(cfg, cfg.out_dir, workers)
    run.out.mkdir(parents=True, exist_ok=True)
    run.record(cfg.write_resolved(run.out))
    stage_testbench(run)
    stage_graph(run)
    return run


def load_models(run: Run):
    """Models from a previous ``train`` (and ``transfer``) in the same output directory."""
    for name in ("models_tl.ampse", "models.ampse"):
        path = run.out / "models" / name
        if path.exists():
            pkg = import_package(path, run.tb_target)
            run.models = pkg.models
            run.cepa_model = pkg.cepa
            return pkg
    raise StageError("search", FileNotFoundError(f"no trained models under {run.out / 'models'}"))


def run_pipeline(cfg: PipelineConfig, workers: int = 1) -> Run:
    run = start(cfg, workers)
    if cfg["cepa"]["enabled"]:
        stage_cepa(run)
    stage_data(run)
    stage_train(run)
    if run.tb_base is not run.tb_target:
        stage_transfer(run)
    stage_search(run)
    stage_refine(run)
    stage_report(run)
    if cfg["sweep"]["enabled"]:
        stage_sweep(run)
    finish(run)
    return run
