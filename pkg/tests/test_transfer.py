import numpy as np
import pytest

from ampse.errors import NestedAdapter
from ampse.oracle import apply_stage
from ampse.surrogate import Dataset, Hyper, evaluate_model, sample_points, train
from ampse.surrogate.fit import module_datasets
from ampse.transfer import adapter_hyper, attach_adapters, retarget, train_adapters


@pytest.fixture(scope="module")
def layout_data(sar6):
    lay = apply_stage(sar6, "layout")
    return module_datasets(lay, 40, 200), module_datasets(lay, 500, 300, "uniform")


def test_fresh_adapters_reproduce_base(sar6_models, sar6):
    base = sar6_models["trackhold_dac"]
    tl = attach_adapters(base, "layout")
    X = sample_points(sar6.module("trackhold_dac").input_space(), "uniform", 50, 0)
    np.testing.assert_array_equal(tl.predict_array(X), base.predict_array(X))
    assert tl.base_hash == base.weight_hash()


def test_nested_and_bad_stage(sar6_models):
    tl = attach_adapters(sar6_models["driver"], "layout")
    with pytest.raises(NestedAdapter):
        attach_adapters(tl, "silicon")
    with pytest.raises(ValueError):
        attach_adapters(sar6_models["driver"], "schematic")


def test_base_frozen_and_adapters_help(sar6_models, layout_data):
    small, hold = layout_data
    base = sar6_models["trackhold_dac"]
    before = [w.copy() for w in base.weights]
    tl = train_adapters(attach_adapters(base, "layout"), small["trackhold_dac"], adapter_hyper(epochs=300))
    for a, b in zip(before, base.weights):
        np.testing.assert_array_equal(a, b)
    assert tl.base is base
    base_err = evaluate_model(base, hold["trackhold_dac"])["aggregate"]
    tl_err = evaluate_model(tl, hold["trackhold_dac"])["aggregate"]
    assert tl_err < base_err


def test_identity_shift_recovers_base():
    # adapting to the schematic data itself should not move away from the base
    g = np.random.default_rng(0)
    X = g.uniform(0.5, 2, (200, 2))
    ds = Dataset(("a", "b"), ("y",), X, (X[:, :1] * X[:, 1:]) ** 0.5)
    base = train(ds, [2, 16, 1], Hyper(lr=1e-2, epochs=300, seed=0))
    tl = train_adapters(attach_adapters(base, "layout"), ds.subset(np.arange(40)), adapter_hyper(epochs=100))
    err_tl = evaluate_model(tl, ds)["aggregate"]
    assert err_tl <= evaluate_model(base, ds)["aggregate"] * 1.5 + 1e-3


def test_adapter_jacobian_matches_fd(sar6_models, sar6, layout_data):
    small, _ = layout_data
    tl = train_adapters(attach_adapters(sar6_models["comparator"], "layout"), small["comparator"],
                        adapter_hyper(epochs=50))
    space = sar6.module("comparator").input_space()
    X = sample_points(space, "uniform", 10, 3)
    J = tl.jacobian_array(X)
    for j in range(X.shape[1]):
        h = 1e-6 * space.span[j]
        up, dn = X.copy(), X.copy()
        up[:, j] += h
        dn[:, j] -= h
        num = (tl.predict_array(up) - tl.predict_array(dn)) / (2 * h)
        assert np.all(np.abs(J[:, :, j] - num) <= 1e-4 * np.abs(J).max(axis=-1))


def test_retarget_keeps_adapters(sar6_models):
    tl = attach_adapters(sar6_models["driver"], "layout")
    tl.b_out += 0.1
    again = retarget(tl, "silicon")
    assert again.stage == "silicon"
    np.testing.assert_array_equal(again.b_out, tl.b_out)


def test_adapter_training_deterministic(sar6_models, layout_data):
    small, _ = layout_data
    a = train_adapters(attach_adapters(sar6_models["driver"], "layout"), small["driver"], adapter_hyper(epochs=40))
    b = train_adapters(attach_adapters(sar6_models["driver"], "layout"), small["driver"], adapter_hyper(epochs=40))
    np.testing.assert_array_equal(a.A_in, b.A_in)
    np.testing.assert_array_equal(a.b_out, b.b_out)


def test_column_mismatch_rejected(sar6_models, layout_data):
    small, _ = layout_data
    with pytest.raises(ValueError):
        train_adapters(attach_adapters(sar6_models["driver"], "layout"), small["comparator"])
