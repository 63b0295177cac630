import copy
import json

import numpy as np
import pytest

from ampse.oracle import builtin_path, load_testbench
from ampse.oracle.testbench import from_dict
from ampse.surrogate import Hyper
from ampse.surrogate.fit import fit_module_models


@pytest.fixture(scope="session")
def sar6():
    return load_testbench("builtin:sar6")


@pytest.fixture(scope="session")
def toy1d():
    return load_testbench("builtin:toy1d")


@pytest.fixture(scope="session")
def sar6_doc():
    return json.loads(builtin_path("sar6").read_text())


@pytest.fixture
def sar6_doc_copy(sar6_doc):
    return copy.deepcopy(sar6_doc)


def affine_doc(modules, edges, unit="1"):
    """Chain-style testbench of ``toy_affine`` modules; ``edges`` are (producer, consumer) module ids."""
    inputs = {m: [] for m in modules}
    bindings = []
    for i, (src, dst) in enumerate(edges):
        port = f"in_{src}"
        inputs[dst].append({"name": port, "unit": unit, "lower": -1e6, "upper": 1e6})
        bindings.append({"from": f"{src}.out", "to": f"{dst}.{port}"})
    return {
        "format": "ampse-tb/1", "id": "affine", "reducer": "sum", "configs": {},
        "modules": [{"id": m, "formula_id": "toy_affine",
                     "params": [{"name": "x", "lower": 0.0, "upper": 1.0, "grid": None, "unit": "1"}],
                     "interface_in": inputs[m], "interface_out": [{"name": "out", "unit": "1"}],
                     "metrics": [{"name": "y", "unit": "1"}]} for m in modules],
        "bindings": bindings,
        "spec_targets": [{"name": "total", "direction": "<=", "target": None, "unit": "1", "minimize": True}],
        "perturbation": {"stage": "schematic", "seed": 0,
                         "layout": {"cap_scale": 0.15, "res_scale": 0.10, "cap_offset": 2.0},
                         "silicon": {"metric_scale_sigma": 0.05, "metric_offset_sigma": 0.01}},
    }


@pytest.fixture
def affine_tb():
    def make(modules, edges):
        return from_dict(affine_doc(modules, edges))
    return make


@pytest.fixture(scope="session")
def sar6_models(sar6):
    """Per-module surrogates on 400 LHS samples, reduced epochs for test speed."""
    models, data = fit_module_models(sar6, 400, seed=0, hyper=Hyper(seed=0, epochs=600))
    return models


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-300)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
