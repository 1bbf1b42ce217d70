import itertools

import numpy as np
import pandas as pd
import pytest
from sklearn.tree import DecisionTreeRegressor

from nkteams.analysis import (
    FEATURES,
    RegressionTree,
    empirical_partial_dependence,
    fit_tree,
    load_dataset,
    panel_partial_dependence,
    partial_dependence,
    round_confidence,
)
from nkteams.exceptions import SchemaError
from nkteams.simulation import ScenarioConfig, expand_grid, run_grid


def factorial(replicates=4, noise=0.01, seed=0):
    """Balanced full-factorial dataset shaped like simulation output."""
    rng = np.random.default_rng(seed)
    levels = {
        "k": [3, 5],
        "pattern": ["decomposable", "structured", "unstructured"],
        "tau": ["none", "10", "1"],
        "learn_prob": [0.0, 0.1, 0.3, 0.5, 0.8, 1.0],
        "t": [1, 25, 50],
        "coordination": ["autonomous", "coordinated"],
    }
    rows = [dict(zip(levels, cell)) for cell in itertools.product(*levels.values()) for _ in range(replicates)]
    df = pd.DataFrame(rows)
    p = df["learn_prob"]
    y = (0.9 - 0.05 * (df["k"] == 5) + 0.1 * p - 0.08 * p**2 * (df["coordination"] == "autonomous")
         - 0.03 * (df["pattern"] == "unstructured") + 0.01 * (df["tau"] == "1") + 0.0005 * df["t"])
    df["norm_perf"] = y + rng.normal(0, noise, len(df))
    return df


def mse(tree, X, y):
    return float(np.mean((tree.predict(X) - y) ** 2))


class TestRegressionTree:
    def test_constant_target(self):
        X = pd.DataFrame({"a": np.arange(100.0), "b": ["x", "y"] * 50})
        tree = fit_tree(X, np.full(100, 0.7), max_depth=8, min_leaf=1)
        assert tree.get_n_leaves() == 1
        np.testing.assert_allclose(tree.predict(X), 0.7)

    def test_separable_categorical(self):
        X = pd.DataFrame({"coordination": ["autonomous", "coordinated"] * 50, "noise": np.arange(100.0) % 7})
        y = (X["coordination"] == "coordinated").astype(float)
        tree = fit_tree(X, y, max_depth=8, min_leaf=1)
        assert tree.get_depth() == 1
        assert mse(tree, X, y) == 0.0

    def test_synthetic_regression(self):
        rng = np.random.default_rng(1)
        X = pd.DataFrame({"learn_prob": np.repeat(np.round(np.arange(11) / 10, 1), 200)})
        noise = rng.normal(0, 0.001, len(X))
        y = 0.1 * X["learn_prob"].to_numpy() + noise
        tree = fit_tree(X, y, max_depth=8, min_leaf=50)
        assert mse(tree, X, y) <= 2 * 0.001**2

    def test_hand_descent(self):
        X = pd.DataFrame({"x": [1.0, 2.0, 3.0, 4.0]})
        tree = fit_tree(X, [0.0, 0.0, 1.0, 1.0], max_depth=3, min_leaf=1)
        assert tree.get_n_leaves() == 2
        assert tree.tree_.threshold[0] == 2.5
        np.testing.assert_array_equal(tree.predict(pd.DataFrame({"x": [2.4, 2.6, 10.0, -5.0]})), [0, 1, 1, 0])

    def test_predictions_stay_in_target_range(self):
        df = factorial(replicates=1)
        tree = fit_tree(df[FEATURES], df["norm_perf"], max_depth=6, min_leaf=5)
        pred = tree.predict(df[FEATURES])
        assert pred.min() >= df["norm_perf"].min() and pred.max() <= df["norm_perf"].max()

    def test_matches_sklearn_on_numeric_data(self):
        # sklearn stores X as float32, so keep values exactly representable
        rng = np.random.default_rng(2)
        X = rng.integers(0, 400, size=(500, 3)) / 4.0
        y = np.sin(X[:, 0] / 25) + (X[:, 1] / 100) ** 2 + rng.normal(0, 0.05, 500)
        ours = RegressionTree(max_depth=5, min_leaf=10).fit(X, y)
        ref = DecisionTreeRegressor(max_depth=5, min_samples_leaf=10, random_state=0).fit(X, y)
        np.testing.assert_allclose(ours.predict(X), ref.predict(X), atol=1e-12)
        assert ours.get_n_leaves() == ref.get_n_leaves()

    def test_mse_non_increasing_in_depth(self):
        df = factorial(replicates=2)
        X, y = df[FEATURES], df["norm_perf"].to_numpy()
        errors = [mse(fit_tree(X, y, max_depth=d, min_leaf=5), X, y) for d in range(0, 10)]
        assert all(b <= a + 1e-15 for a, b in zip(errors, errors[1:]))

    def test_row_shuffle_invariance(self):
        X = pd.DataFrame({"x": np.arange(40.0), "c": list("abcd") * 10})
        y = X["x"] ** 1.5 + 10 * (X["c"] == "b")
        tree = fit_tree(X, y, max_depth=4, min_leaf=2)
        order = np.random.default_rng(3).permutation(40)
        shuffled = fit_tree(X.iloc[order].reset_index(drop=True), y.iloc[order].to_numpy(), max_depth=4, min_leaf=2)
        np.testing.assert_array_equal(tree.predict(X), shuffled.predict(X))

    def test_min_leaf_and_depth(self):
        df = factorial(replicates=2)
        tree = fit_tree(df[FEATURES], df["norm_perf"], max_depth=4, min_leaf=60)
        assert min(tree.leaf_sizes()) >= 60
        assert tree.get_depth() <= 4

    def test_sklearn_protocol(self):
        tree = RegressionTree(max_depth=3)
        assert tree.get_params() == {"max_depth": 3, "min_leaf": 50, "categorical_features": "auto"}
        df = factorial(replicates=1)
        assert -1 <= tree.fit(df[FEATURES], df["norm_perf"]).score(df[FEATURES], df["norm_perf"]) <= 1

    def test_bad_input(self):
        with pytest.raises(SchemaError):
            fit_tree(pd.DataFrame({"x": []}), [])
        with pytest.raises(SchemaError):
            fit_tree(pd.DataFrame({"x": [1.0, 2.0]}), [1.0])


class TestPartialDependence:
    def test_single_leaf_is_flat(self):
        df = factorial(replicates=1)
        tree = fit_tree(df[FEATURES], df["norm_perf"], max_depth=0, min_leaf=1)
        curve = partial_dependence(tree, df[FEATURES], "learn_prob")
        assert np.allclose(curve.values, df["norm_perf"].mean())

    def test_scope_only_tree(self):
        X = pd.DataFrame({"learn_prob": [0.0] * 10 + [1.0] * 10, "t": list(range(20))})
        y = np.r_[np.zeros(10), np.ones(10)]
        tree = fit_tree(X, y, max_depth=3, min_leaf=1)
        assert tree.tree_.feature[0] == 0 and tree.get_n_leaves() == 2
        np.testing.assert_allclose(partial_dependence(tree, X, "learn_prob").values, [0.0, 1.0])

    def test_balanced_design_matches_empirical(self):
        df = factorial(replicates=3)
        tree = fit_tree(df[FEATURES], df["norm_perf"], max_depth=30, min_leaf=1)
        for scope in ("learn_prob", "tau"):
            for c in ("autonomous", "coordinated"):
                pd_curve = partial_dependence(tree, df[FEATURES], scope, {"coordination": c})
                emp = empirical_partial_dependence(df[FEATURES], df["norm_perf"], scope, {"coordination": c})
                assert np.abs(pd_curve.values - emp.values).max() <= 0.005

    def test_gap_shrinks_with_depth(self):
        df = factorial(replicates=3)
        emp = empirical_partial_dependence(df[FEATURES], df["norm_perf"], "learn_prob", {"coordination": "autonomous"})
        gaps = []
        for depth in (2, 4, 8):
            tree = fit_tree(df[FEATURES], df["norm_perf"], max_depth=depth, min_leaf=20)
            curve = partial_dependence(tree, df[FEATURES], "learn_prob", {"coordination": "autonomous"})
            gaps.append(np.abs(curve.values - emp.values).max())
        assert gaps[0] + 1e-12 >= gaps[1] and gaps[1] + 1e-12 >= gaps[2]
        assert gaps[2] < gaps[0]

    def test_values_within_target_range(self):
        df = factorial(replicates=1, noise=0.05)
        tree = fit_tree(df[FEATURES], df["norm_perf"], max_depth=8, min_leaf=5)
        curve = partial_dependence(tree, df[FEATURES], "tau")
        assert set(curve.grid) == {"1", "10", "none"}
        assert df["norm_perf"].min() <= curve.values.min() and curve.values.max() <= df["norm_perf"].max()


class TestEmpirical:
    def test_constant(self):
        X = pd.DataFrame({"learn_prob": [0.0, 0.5, 1.0] * 4})
        assert np.allclose(empirical_partial_dependence(X, np.full(12, 0.3), "learn_prob").values, 0.3)

    def test_two_levels(self):
        X = pd.DataFrame({"coordination": ["a"] * 5 + ["b"] * 5})
        curve = empirical_partial_dependence(X, [0] * 5 + [1] * 5, "coordination")
        np.testing.assert_array_equal(curve.values, [0.0, 1.0])

    def test_twenty_row_fixture(self):
        X = pd.DataFrame({
            "learn_prob": [0.0] * 7 + [0.5] * 7 + [1.0] * 6,
            "coordination": (["A", "C"] * 4)[:7] + (["A", "C"] * 4)[:7] + ["A", "C"] * 3,
        })
        y = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7,
             0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3,
             0.2, 0.2, 0.2, 0.8, 0.8, 0.8]
        overall = empirical_partial_dependence(X, y, "learn_prob")
        np.testing.assert_allclose(overall.values, [0.4, 0.6, 0.5])
        np.testing.assert_array_equal(overall.support, [7, 7, 6])
        a = empirical_partial_dependence(X, y, "learn_prob", {"coordination": "A"})
        c = empirical_partial_dependence(X, y, "learn_prob", {"coordination": "C"})
        np.testing.assert_allclose(a.values, [0.4, 0.6, 0.4])
        np.testing.assert_allclose(c.values, [0.4, 0.6, 0.6])


def test_round_confidence():
    df = pd.DataFrame({
        "learn_prob": [0.0] * 4,
        "coordination": ["autonomous"] * 4,
        "round": [0, 0, 1, 1],
        "norm_perf": [0.5, 0.7, 0.8, 1.0],
    })
    out = round_confidence(df, "learn_prob")
    row = out.iloc[0]
    assert row["mean"] == pytest.approx(0.75)
    assert row["half_width"] == pytest.approx(1.96 * np.std([0.6, 0.9], ddof=1) / np.sqrt(2))


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    grid = expand_grid(ScenarioConfig(periods=5, rounds=3),
                       {"k": [3, 5], "pattern": ["decomposable", "structured", "unstructured"],
                        "tau": [None, 1], "learn_prob": [0.0, 0.5], "coordination": ["autonomous", "coordinated"]})
    path = tmp_path_factory.mktemp("sim") / "sim.csv"
    run_grid(grid, path)
    return path


class TestDataset:
    def test_load(self, sim_csv):
        df = load_dataset(sim_csv)
        assert list(df["tau"].cat.categories) == ["none", "1"]
        assert len(df) == 6 * 2 * 2 * 2 * 3 * 5
        assert load_dataset(sim_csv, t_max=2)["t"].max() == 2

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_empty(self, tmp_path, sim_csv):
        path = tmp_path / "empty.csv"
        path.write_text(open(sim_csv).readline())
        with pytest.raises(SchemaError):
            load_dataset(path)

    @pytest.mark.parametrize("scope,levels", [("learn_prob", 2), ("tau", 2)])
    def test_panels(self, sim_csv, scope, levels):
        df = load_dataset(sim_csv)
        panels = panel_partial_dependence(df, scope, max_depth=4, min_leaf=5)
        assert len(panels) == 6
        for frame in panels.values():
            assert len(frame) == levels * 2
            assert set(frame["coordination"]) == {"autonomous", "coordinated"}
        pooled = panel_partial_dependence(df, scope, per_panel=False, max_depth=4, min_leaf=5)
        assert pooled.keys() == panels.keys()
