import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ampse.errors import DivergedError, EmptyDataset, FilterStarvation, MissingInput, ShapeError
from ampse.mlg import build_graph, connectivity_mask
from ampse.oracle import ParameterSpace, Param
from ampse.surrogate import (Dataset, Hyper, ModuleOracle, as_evaluator, evaluate_model, gradient,
                             init_model, load_dataset, predict, sample_dataset, sample_points,
                             save_dataset, train)
from ampse.surrogate.fit import module_datasets_from_system, validation_nrmse


def line_space(lo=0.0, hi=8.0):
    return ParameterSpace((Param("x", lo, hi, None, "1"),))


def linear_ds(n=200, seed=0):
    g = np.random.default_rng(seed)
    X = g.uniform(-1, 1, (n, 2))
    return Dataset(("a", "b"), ("y",), X, 3 * X[:, :1] - X[:, 1:] + 0.5)


def test_lhs_one_per_bin():
    ds = sample_dataset(line_space(), "latin_hypercube", 8, lambda X: X, seed=1)
    assert sorted(np.floor(ds.X[:, 0]).astype(int)) == list(range(8))


def test_always_true_filter_matches_unfiltered():
    a = sample_dataset(line_space(), "latin_hypercube", 16, lambda X: X, seed=3)
    b = sample_dataset(line_space(), "latin_hypercube", 16, lambda X: X, seed=3,
                       filter=lambda X: np.ones(len(X), bool))
    np.testing.assert_array_equal(a.X, b.X)


def test_always_false_filter_starves():
    with pytest.raises(FilterStarvation):
        sample_dataset(line_space(), "uniform", 10, lambda X: X, seed=0, filter=lambda X: np.zeros(len(X), bool))


def test_filter_replaces_rejects():
    ds = sample_dataset(line_space(), "uniform", 50, lambda X: X, seed=0, filter=lambda X: X[:, 0] < 4)
    assert len(ds) == 50 and np.all(ds.X < 4)
    assert ds.provenance["drawn"] > 50


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(("a",), ("y",), [[np.nan]], [[1.0]])
    with pytest.raises(EmptyDataset):
        Dataset(("a",), ("y",), np.zeros((0, 1)), np.zeros((0, 1)))
    ds = linear_ds()
    np.testing.assert_allclose(ds.denormalize_inputs(ds.inputs), ds.X, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ds.denormalize_targets(ds.targets), ds.Y, rtol=0, atol=1e-12)


def test_dataset_round_trip(sar6, tmp_path):
    o = ModuleOracle(sar6, "trackhold_dac")
    ds = sample_dataset(o.space, "latin_hypercube", 20, o, seed=4)
    again = load_dataset(save_dataset(ds, tmp_path / "d.csv"))
    np.testing.assert_array_equal(again.X, ds.X)
    np.testing.assert_array_equal(again.Y, ds.Y)
    assert again.input_names == ds.input_names and again.output_units == ds.output_units


def test_linear_target_fits():
    ds = linear_ds()
    hyper = Hyper(lr=1e-2, epochs=500, seed=0)
    m = train(ds, [2, 8, 1], hyper, log_inputs=False)
    assert validation_nrmse(m, ds, hyper)["y"] < 0.01
    assert m.training_log and m.training_log[0]["epoch"] == 0


def test_identity_target():
    X = np.linspace(1, 8, 200)[:, None]
    ds = Dataset(("x",), ("y",), X, X)
    m = train(ds, [1, 16, 1], Hyper(lr=1e-2, epochs=500, seed=0), log_inputs=False)
    got = predict(m, {"x": X[:, 0]})["y"]
    assert np.max(np.abs(got - X[:, 0]) / X[:, 0]) < 0.02


def test_zero_epochs_is_init():
    ds = linear_ds()
    m = train(ds, [2, 8, 1], Hyper(epochs=0, seed=5), log_inputs=False)
    ref = init_model(ds, [2, 8, 1], 5)
    for a, b in zip(m.weights, ref.weights):
        np.testing.assert_array_equal(a, b)


def test_huge_lr_diverges():
    with pytest.raises(DivergedError):
        train(linear_ds(), [2, 16, 1], Hyper(lr=1e6, epochs=50, seed=0), log_inputs=False)


def test_shape_and_input_errors():
    ds = linear_ds()
    with pytest.raises(ShapeError):
        train(ds, [3, 8, 1], Hyper(epochs=1))
    m = train(ds, [2, 8, 1], Hyper(epochs=1), log_inputs=False)
    with pytest.raises(MissingInput):
        predict(m, {"a": 1.0})


def test_predict_pure():
    m = train(linear_ds(), [2, 8, 1], Hyper(epochs=5), log_inputs=False)
    x = {"a": 0.2, "b": -0.3}
    assert predict(m, x) == predict(m, x)


def test_masked_weights_stay_zero(sar6):
    g = build_graph(sar6)
    from ampse.surrogate import SystemOracle
    o = SystemOracle(sar6)
    ds = sample_dataset(o.space, "latin_hypercube", 100, o, seed=0)
    mask = connectivity_mask(g, [6, 32, 32, 5])
    m = train(ds, [6, 32, 32, 5], Hyper(epochs=20, debug_masks=True), mask=mask)
    assert m.model_kind == "cci"
    for W, mk in zip(m.weights, mask.layers):
        assert np.all(W[mk == 0] == 0.0)


def test_jacobian_matches_fd(sar6_models, sar6):
    m = sar6_models["trackhold_dac"]
    space = sar6.module("trackhold_dac").input_space()
    X = sample_points(space, "uniform", 10, 2)
    J = m.jacobian_array(X)
    for j in range(X.shape[1]):
        h = 1e-6 * space.span[j]
        up, dn = X.copy(), X.copy()
        up[:, j] += h
        dn[:, j] -= h
        num = (m.predict_array(up) - m.predict_array(dn)) / (2 * h)
        scale = np.abs(J).max(axis=-1)
        assert np.all(np.abs(J[:, :, j] - num) <= 1e-4 * scale)


def test_gradient_helper_shape(sar6_models):
    m = sar6_models["comparator"]
    x = {"w_in": 10.0, "i_tail": 1.0}
    assert gradient(m, x).shape == (len(m.output_names), 2)


def test_as_evaluator_checks_inputs(sar6, sar6_models):
    with pytest.raises(ShapeError):
        as_evaluator(sar6_models["driver"], sar6.module("comparator"))


def test_module_models_accurate(sar6, sar6_models):
    from ampse.surrogate.fit import module_datasets
    hold = module_datasets(sar6, 500, 77, "uniform")
    for mid, m in sar6_models.items():
        assert evaluate_model(m, hold[mid])["aggregate"] < 0.05


def test_system_trace_datasets(sar6):
    data = module_datasets_from_system(sar6, 30, 0)
    th = data["trackhold_dac"]
    assert th.input_names == ("c_u", "w_sw", "R_drv", "C_cmp")
    direct = ModuleOracle(sar6, "trackhold_dac")(th.X)
    np.testing.assert_allclose(th.Y, direct, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(0, 10_000))
def test_lhs_stratification_property(n, seed):
    u = sample_points(ParameterSpace((Param("x", 0.0, 1.0, None, "1"),)), "latin_hypercube", n, seed)
    assert sorted(np.floor(u[:, 0] * n).astype(int)) == list(range(n))
