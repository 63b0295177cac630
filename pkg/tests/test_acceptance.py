"""Acceptance criteria 1-10 at their stated tolerances.

Each test records one pass/fail line with the measured values; the lines are
printed as they happen and again in the terminal summary.
"""

import json
import time

import numpy as np
import pytest

from ampse.cepa import CepaHyper, assess, make_corpus, train_classifier
from ampse.cli.main import main as cli_main
from ampse.cli.package import export_package, import_package
from ampse.errors import HashMismatch, VersionUnsupported
from ampse.mlg import build_graph, compose_evaluate, connectivity_mask, oracle_evaluators
from ampse.oracle import apply_stage, evaluate_system
from ampse.oracle.evaluate import evaluate_system_array
from ampse.oracle.types import SpecEntry, SpecSet
from ampse.search import (OracleBackend, SearchConfig, feasibility_sweep, global_search, local_refine,
                          make_backend, rank_candidates)
from ampse.surrogate import Hyper, SystemOracle, evaluate_model, sample_dataset, sample_points, train
from ampse.surrogate.fit import fit_module_models, module_datasets, validation_nrmse
from ampse.transfer import adapter_hyper, attach_adapters, train_adapters
from conftest import ACCEPTANCE

SEEDS = range(5)


def record(n: int, title: str, ok: bool, detail: str, capsys):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'} | {title} | {detail}"
    ACCEPTANCE.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def seed_models(sar6):
    """Default-hyperparameter module surrogates on 400 LHS samples, one set per seed."""
    return {s: fit_module_models(sar6, 400, seed=s) for s in SEEDS}


def fd_check(f, J, X, h):
    """Worst ``|J - FD|_inf / |J|_inf`` over points and output rows."""
    worst = 0.0
    num = np.empty_like(J)
    for j in range(X.shape[1]):
        up, dn = X.copy(), X.copy()
        up[:, j] += h[j]
        dn[:, j] -= h[j]
        num[:, :, j] = (f(up) - f(dn)) / (2 * h[j])
    scale = np.maximum(np.abs(J).max(axis=-1), 1e-300)
    worst = max(worst, float(np.max(np.abs(J - num).max(axis=-1) / scale)))
    return worst


def test_c01_composition_equals_oracle(sar6, capsys):
    g = build_graph(sar6)
    X = sample_points(sar6.full_space(), "uniform", 1000, 101)
    ev = oracle_evaluators(sar6, check_grid=False)
    t0 = time.perf_counter()
    got = compose_evaluate(g, ev, dict(zip(sar6.param_names, X.T)))
    elapsed = time.perf_counter() - t0
    ref = evaluate_system_array(sar6, X, check_grid=False)
    err = max(float(np.max(np.abs(got[p.name] - ref[:, k]) / np.abs(ref[:, k]))) for k, p in enumerate(sar6.outputs))
    record(1, "composition == oracle", err <= 1e-12 and elapsed < 1.0,
           f"max rel err {err:.2e} (<= 1e-12), {elapsed * 1e3:.1f} ms (< 1 s)", capsys)


def test_c02_surrogate_quality(sar6, seed_models, capsys):
    per = {}
    for s, (models, data) in seed_models.items():
        for mid, m in models.items():
            for k, v in validation_nrmse(m, data[mid], Hyper(seed=s)).items():
                if k != "aggregate":
                    per.setdefault(f"{mid}.{k}", []).append(v)
    means = {k: float(np.mean(v)) for k, v in per.items()}
    worst = max(means, key=means.get)
    record(2, "module surrogate validation NRMSE", means[worst] <= 0.03,
           f"worst 5-seed mean {means[worst]:.4f} ({worst}) over {len(means)} metrics (<= 0.03)", capsys)


def test_c03_gradients(sar6, seed_models, capsys):
    models, _ = seed_models[0]
    worst = {}
    for mid, m in models.items():
        space = sar6.module(mid).input_space()
        X = sample_points(space, "uniform", 50, 303)
        worst[mid] = fd_check(m.predict_array, m.jacobian_array(X), X, 1e-6 * space.span)
    # a CCI system model and an adapter model are trained models too
    o = SystemOracle(sar6)
    ds = sample_dataset(o.space, "latin_hypercube", 200, o, 3)
    cci = train(ds, [6, 32, 32, 5], Hyper(epochs=300), mask=connectivity_mask(build_graph(sar6), [6, 32, 32, 5]))
    X = sample_points(o.space, "uniform", 50, 304)
    worst["cci_system"] = fd_check(cci.predict_array, cci.jacobian_array(X), X, 1e-6 * o.space.span)
    lay = module_datasets(apply_stage(sar6, "layout"), 40, 305)
    tl = train_adapters(attach_adapters(models["comparator"], "layout"), lay["comparator"], adapter_hyper(epochs=200))
    space = sar6.module("comparator").input_space()
    X = sample_points(space, "uniform", 50, 306)
    worst["tl_comparator"] = fd_check(tl.predict_array, tl.jacobian_array(X), X, 1e-6 * space.span)
    # end-to-end composition of the module surrogates
    g = build_graph(sar6)
    backend = make_backend(g, models)
    space = sar6.full_space()
    X = sample_points(space, "uniform", 50, 307)
    _, jac = backend.gradient(X)
    names = [p.name for p in sar6.outputs]
    J = np.stack([jac[k] for k in names], axis=1)

    def f(Y):
        v = backend.evaluate(Y)
        return np.stack([v[k] for k in names], axis=1)

    worst["mlg_composition"] = fd_check(f, J, X, 1e-6 * space.span)
    key = max(worst, key=worst.get)
    record(3, "Jacobians vs central differences", worst[key] <= 1e-4,
           f"worst rel err {worst[key]:.2e} ({key}) over {len(worst)} models x 50 points (<= 1e-4)", capsys)


def _criterion4_specs():
    return SpecSet((SpecEntry("ENOB", ">=", 5.5, "bit"), SpecEntry("f_s_max", ">=", 2.0, "GS/s"),
                    SpecEntry("P_total", "<=", None, "mW", True)))


def test_c04_search_optimality(sar6, seed_models, capsys):
    specs = _criterion4_specs()
    space = sar6.full_space()
    t0 = time.perf_counter()
    axes = [np.linspace(p.lower, p.upper, 8) for p in space.params]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, space.dim)
    mesh = space.snap(mesh)
    best_grid = np.inf
    for chunk in np.array_split(mesh, 16):
        vals = evaluate_system(sar6, dict(zip(sar6.param_names, chunk.T)), check_grid=False)
        ok = specs.feasible(vals)
        if ok.any():
            best_grid = min(best_grid, float(np.min(vals["P_total"][ok])))
    grid_time = time.perf_counter() - t0

    models, _ = seed_models[0]
    cfg = SearchConfig()
    cs = global_search(build_graph(sar6), models, specs, cfg)
    refined = rank_candidates([local_refine(c, sar6, cfg, specs, models) for c in cs], specs)
    best = refined[0]
    found = best.oracle_specs["P_total"] if best.feasible_oracle else np.inf
    ok = best.feasible_oracle and found <= 1.05 * best_grid and grid_time < 60
    record(4, "search optimality vs 8^6 oracle grid", ok,
           f"search {found:.4f} mW vs grid {best_grid:.4f} mW (ratio {found / best_grid:.3f} <= 1.05), "
           f"grid {len(mesh)} evals in {grid_time:.1f} s (< 60 s)", capsys)


def test_c05_speedup(sar6, seed_models, capsys):
    specs = sar6.spec_targets
    g = build_graph(sar6)
    models, _ = seed_models[0]
    cfg = SearchConfig(n_starts=64, max_iters=12)  # default batch of starts, short run

    surrogate = make_backend(g, models)
    t0 = time.perf_counter()
    global_search(g, surrogate, specs, cfg)
    fast = surrogate.point_evals / (time.perf_counter() - t0)

    # identical loop, oracle charged 10 ms per point; its gradients are exact and charged one call per point
    oracle = OracleBackend(sar6, delay=0.010)
    t0 = time.perf_counter()
    global_search(g, oracle, specs, cfg)
    slow = oracle.point_evals / (time.perf_counter() - t0)
    ratio = fast / slow
    record(5, "surrogate vs rate-limited oracle search throughput", ratio >= 100,
           f"{fast:.0f} vs {slow:.1f} point-evals/s, ratio {ratio:.0f}x (>= 100x)", capsys)


def test_c06_cci_data_efficiency(sar6, capsys):
    g = build_graph(sar6)
    o = SystemOracle(sar6)
    arch = [6, 32, 32, 5]
    mask = connectivity_mask(g, arch)
    hold = sample_dataset(o.space, "latin_hypercube", 2000, o, 12345)
    sizes = (100, 150, 200, 300, 400)
    err = {"fc": {}, "cci": {}}
    for n in sizes:
        for kind in err:
            vals = []
            for s in SEEDS:
                ds = sample_dataset(o.space, "latin_hypercube", n, o, 600 + s)
                m = train(ds, arch, Hyper(seed=s), mask=mask if kind == "cci" else None)
                vals.append(evaluate_model(m, hold)["aggregate"])
            err[kind][n] = float(np.mean(vals))
    ref = err["fc"][400]
    # CCI samples needed to reach the fully-connected error at 400 (log-log interpolation)
    ns = np.array(sizes, dtype=float)
    ce = np.array([err["cci"][n] for n in sizes])
    if ce[-1] > ref:
        needed = np.inf
    else:
        k = int(np.argmax(ce <= ref))
        if k == 0:
            needed = ns[0]
        else:
            t = (np.log(ref) - np.log(ce[k - 1])) / (np.log(ce[k]) - np.log(ce[k - 1]))
            needed = float(np.exp(np.log(ns[k - 1]) + t * (np.log(ns[k]) - np.log(ns[k - 1]))))
    ratio = 400 / needed
    ok = err["cci"][200] <= ref
    table = ", ".join(f"N={n}: fc {err['fc'][n]:.3f} cci {err['cci'][n]:.3f}" for n in sizes)
    record(6, "CCI-NN data efficiency", ok,
           f"CCI@200 {err['cci'][200]:.4f} vs FC@400 {ref:.4f}; measured data ratio {ratio:.2f}x "
           f"(needs >= 2x; reference claim >= 4x); {table}", capsys)


def test_c07_transfer_learning(sar6, seed_models, capsys):
    lay = apply_stage(sar6, "layout")
    res = {}
    for s in SEEDS:
        base_models, _ = seed_models[s]
        big = module_datasets(lay, 400, 100 + s)
        small = module_datasets(lay, 40, 200 + s)
        hold = module_datasets(lay, 1000, 300 + s, "uniform")
        for mid, base in base_models.items():
            arch = (big[mid].X.shape[1], 32, 32, big[mid].Y.shape[1])
            tl = train_adapters(attach_adapters(base, "layout"), small[mid], adapter_hyper(seed=s))
            full = train(big[mid], arch, Hyper(seed=s))
            scratch = train(small[mid], arch, Hyper(seed=s))
            r = res.setdefault(mid, {"tl": [], "full": [], "scratch": []})
            r["tl"].append(evaluate_model(tl, hold[mid])["aggregate"])
            r["full"].append(evaluate_model(full, hold[mid])["aggregate"])
            r["scratch"].append(evaluate_model(scratch, hold[mid])["aggregate"])
    parts, ok = [], True
    for mid, r in sorted(res.items()):
        tl, full, scratch = (float(np.mean(r[k])) for k in ("tl", "full", "scratch"))
        good = tl <= 1.5 * full and tl < scratch
        ok &= good
        parts.append(f"{mid}: TL {tl:.4f} / full {full:.4f} = {tl / full:.2f}x, scratch {scratch:.4f}")
    record(7, "transfer learning (40 layout samples)", ok, "; ".join(parts) + " (TL <= 1.5x full, TL < scratch)",
           capsys)


def test_c08_cepa(sar6, capsys):
    space = sar6.full_space()
    train_c = make_corpus(sar6, sample_points(space, "latin_hypercube", 400, 800), window_fraction=0.25,
                          noise_seed=801)
    test_c = make_corpus(sar6, sample_points(space, "uniform", 1000, 802), window_fraction=0.25, noise_seed=803)
    m = train_classifier(train_c.prefixes, train_c.labels, CepaHyper(seed=0), 0.25, train_c.horizon)
    st = assess(m, test_c)
    ok = st.accuracy >= 0.90 and st.false_fail_rate <= 0.02 and st.sample_reduction >= 3.0
    record(8, "early performance assertion", ok,
           f"accuracy {st.accuracy:.3f} (>= 0.90), false-fail {st.false_fail_rate:.3f} (<= 0.02), "
           f"sample reduction {st.sample_reduction:.2f}x (>= 3x), uncertain {st.uncertain_rate:.3f}", capsys)


def test_c09_feasibility_sweep(sar6, capsys):
    bits = range(4, 11)
    rates = (0.5, 1.0, 2.0, 4.0, 8.0)
    models = {}
    for n in bits:
        tb_n = sar6.with_configs(n=n)
        data = module_datasets(tb_n, 400, 900 + n)
        models[n] = {mid: train(ds, (ds.X.shape[1], 32, 32, ds.Y.shape[1]), Hyper(seed=n))
                     for mid, ds in data.items()}
    fm = feasibility_sweep(sar6, models, bits, rates)
    witnessed = all(fm.witnesses.get((n, r)) is not None and fm.witnesses[(n, r)].feasible_oracle
                    for i, n in enumerate(fm.bits) for j, r in enumerate(fm.rates) if fm.feasible[i, j])
    ref = feasibility_sweep(sar6, None, bits, rates)
    agree = int(np.sum(fm.feasible == ref.feasible))
    ok = fm.is_monotone() and witnessed
    record(9, "feasibility sweep", ok,
           f"monotone {fm.is_monotone()}, {int(fm.feasible.sum())}/{fm.feasible.size} feasible cells all "
           f"oracle-witnessed {witnessed}; agrees with oracle-backed sweep on {agree}/{fm.feasible.size} cells",
           capsys)


def test_c10_determinism_and_persistence(sar6, tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "full.json"
    cfg.write_text(json.dumps({"cepa": {"enabled": True}, "sweep": {"enabled": True, "use_oracle": True}}))
    dirs = []
    for name in ("one", "two"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        assert cli_main(["run", "--config", str(cfg), "--out", "run", "--seed", "7"]) == 0
        dirs.append(d / "run")
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    same = files == sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file()) and all(
        (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in files)

    pkg = import_package(dirs[0] / "models" / "models.ampse", sar6)
    path = export_package(pkg.models, pkg.testbench, tmp_path / "again.ampse", pkg.provenance, pkg.cepa)
    again = import_package(path, sar6)
    parity = 0.0
    for mid, m in pkg.models.items():
        X = sample_points(sar6.module(mid).input_space(), "uniform", 200, 1000)
        a, b = m.predict_array(X), again.models[mid].predict_array(X)
        parity = max(parity, float(np.max(np.abs(a - b) / np.abs(a))))

    raw = path.read_bytes()
    head, _, body = raw.partition(b"\n")
    i = body.index(b"1", len(body) // 2)
    rejected = 0
    for bad, exc in ((head + b"\n" + body[:i] + b"2" + body[i + 1:], HashMismatch),
                     (raw.replace(b"ampse-model/1", b"ampse-model/2", 1), VersionUnsupported)):
        (tmp_path / "bad.ampse").write_bytes(bad)
        try:
            import_package(tmp_path / "bad.ampse")
        except exc:
            rejected += 1
    ok = same and parity <= 1e-12 and rejected == 2
    record(10, "determinism and persistence", ok,
           f"{len(files)} artifacts byte-identical {same}; export/import parity {parity:.1e} (<= 1e-12); "
           f"tampered packages rejected {rejected}/2", capsys)
