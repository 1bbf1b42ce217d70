"""Regression trees and partial dependence over simulation output.

:class:`RegressionTree` is a plain CART regressor (variance reduction, no
pruning) that follows the scikit-learn estimator API and splits categorical
columns on level subsets, so it can be dropped into pipelines or
``GridSearchCV``. Partial dependence is the Friedman average of the model's
prediction over the empirical distribution of the complement features.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import SchemaError
from .simulation import CSV_HEADER_BASE

FEATURES = ["k", "pattern", "tau", "learn_prob", "t", "coordination"]
TARGET = "norm_perf"
PANEL_KEYS = ["k", "pattern"]
PDP_COLUMNS = ["scope_value", "coordination", "pd_value", "support"]


def _tau_order(levels) -> list[str]:
    # long-term first, then shorter reformation intervals
    levels = {str(v) for v in levels}
    numeric = sorted((v for v in levels if v != "none"), key=int, reverse=True)
    return (["none"] if "none" in levels else []) + numeric


def load_dataset(path, t_max: Optional[int] = None) -> pd.DataFrame:
    """Read a simulation CSV, checking its header.

    ``t_max`` keeps only periods ``t <= t_max``.
    """
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    n_base = len(CSV_HEADER_BASE)
    members = header[n_base:]
    if header[:n_base] != CSV_HEADER_BASE or not members or \
            members != [f"member_{i + 1}" for i in range(len(members))]:
        raise SchemaError(f"{path}: unexpected header {','.join(header)}")
    df = pd.read_csv(path, dtype={"tau": str, "pattern": "category", "coordination": "category"})
    if df.empty:
        raise SchemaError(f"{path}: no data rows")
    if t_max is not None:
        df = df[df["t"] <= t_max].reset_index(drop=True)
        if df.empty:
            raise SchemaError(f"{path}: no rows with t <= {t_max}")
    df["tau"] = pd.Categorical(df["tau"], categories=_tau_order(df["tau"].unique()), ordered=True)
    return df


def _as_frame(X) -> pd.DataFrame:
    if isinstance(X, pd.DataFrame):
        return X
    arr = np.asarray(X)
    if arr.ndim != 2:
        raise SchemaError(f"expected 2-D input, got shape {arr.shape}")
    return pd.DataFrame(arr, columns=[f"x{i}" for i in range(arr.shape[1])])


def _is_categorical(col: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(col) or pd.api.types.is_bool_dtype(col)


@dataclass
class _Nodes:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left_levels: list = field(default_factory=list)
    unseen_left: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)
    n_samples: list = field(default_factory=list)
    depth: list = field(default_factory=list)

    def add(self, value, n, depth) -> int:
        self.feature.append(-1)
        self.threshold.append(np.nan)
        self.left_levels.append(None)
        self.unseen_left.append(False)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.n_samples.append(n)
        self.depth.append(depth)
        return len(self.value) - 1


class RegressionTree(RegressorMixin, BaseEstimator):
    """CART regression tree with variance-reduction splits.

    Numeric features split on midpoints between observed values
    (``x <= threshold`` goes left). Categorical features (non-numeric
    columns, or those listed in ``categorical_features``) split on a subset
    of levels, found by sorting the node's levels by mean target and scanning
    the prefixes. Ties between equally good splits go to the earlier column
    and then the earlier cut.

    Parameters
    ----------
    max_depth : int, default=8
    min_leaf : int, default=50
        Minimum number of training rows in each leaf.
    categorical_features : "auto" or sequence of str
        ``"auto"`` treats every non-numeric column as categorical.
    """

    def __init__(self, max_depth=8, min_leaf=50, categorical_features="auto"):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.categorical_features = categorical_features

    def fit(self, X, y):
        X = _as_frame(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(X) == 0:
            raise SchemaError("cannot fit on an empty dataset")
        if len(y) != len(X):
            raise SchemaError(f"X has {len(X)} rows but y has {len(y)}")
        if not np.all(np.isfinite(y)):
            raise SchemaError("target contains non-finite values")
        if self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_leaf >= 1")

        self.feature_names_in_ = np.array(X.columns, dtype=object)
        self.n_features_in_ = X.shape[1]
        if self.categorical_features == "auto":
            self.categorical_ = np.array([_is_categorical(X[c]) for c in X.columns])
        else:
            wanted = set(self.categorical_features)
            missing = wanted - set(X.columns)
            if missing:
                raise SchemaError(f"unknown categorical features: {sorted(missing)}")
            self.categorical_ = np.array([c in wanted for c in X.columns])

        codes, self.levels_ = [], []
        for j, name in enumerate(X.columns):
            col = X[name]
            if self.categorical_[j]:
                c, uniques = pd.factorize(col.astype(str), sort=True)
                levels = np.asarray(uniques, dtype=object)
            else:
                levels, c = np.unique(col.to_numpy(dtype=np.float64), return_inverse=True)
            codes.append(np.asarray(c, dtype=np.int64))
            self.levels_.append(levels)

        nodes = _Nodes()
        root = nodes.add(float(y.mean()), len(y), 0)
        stack = [(root, np.arange(len(y)))]
        while stack:
            node, idx = stack.pop()
            split = self._best_split(codes, y, idx, nodes.depth[node])
            if split is None:
                continue
            j, left_codes = split
            go_left = np.isin(codes[j][idx], left_codes)
            li, ri = idx[go_left], idx[~go_left]
            nodes.feature[node] = j
            levels = self.levels_[j]
            if self.categorical_[j]:
                nodes.left_levels[node] = frozenset(levels[left_codes])
                nodes.unseen_left[node] = len(li) >= len(ri)
            else:
                hi = left_codes.max()
                nodes.threshold[node] = 0.5 * (levels[hi] + levels[hi + 1])
            d = nodes.depth[node] + 1
            nodes.left[node] = nodes.add(float(y[li].mean()), len(li), d)
            nodes.right[node] = nodes.add(float(y[ri].mean()), len(ri), d)
            stack.append((nodes.right[node], ri))
            stack.append((nodes.left[node], li))
        self.tree_ = nodes
        return self

    def _best_split(self, codes, y, idx, depth):
        n = len(idx)
        if depth >= self.max_depth or n < 2 * self.min_leaf:
            return None
        yn = y[idx]
        total = yn.sum()
        if np.ptp(yn) == 0.0:
            return None
        base = total * total / n
        best_gain, best = 1e-12 * max(1.0, float(np.dot(yn, yn))), None
        for j, c in enumerate(codes):
            cj = c[idx]
            n_levels = len(self.levels_[j])
            cnt = np.bincount(cj, minlength=n_levels)
            sums = np.bincount(cj, weights=yn, minlength=n_levels)
            present = np.flatnonzero(cnt)
            if len(present) < 2:
                continue
            if self.categorical_[j]:
                order = present[np.argsort(sums[present] / cnt[present], kind="stable")]
            else:
                order = present
            lc = np.cumsum(cnt[order])[:-1]
            ls = np.cumsum(sums[order])[:-1]
            rc, rs = n - lc, total - ls
            ok = (lc >= self.min_leaf) & (rc >= self.min_leaf)
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = np.where(ok, ls * ls / lc + rs * rs / rc - base, -np.inf)
            i = int(np.argmax(gain))
            if gain[i] > best_gain:
                best_gain, best = gain[i], (j, order[:i + 1])
        return best

    def _check_X(self, X) -> pd.DataFrame:
        check_is_fitted(self, "tree_")
        X = _as_frame(X)
        missing = [c for c in self.feature_names_in_ if c not in X.columns]
        if missing:
            raise SchemaError(f"missing feature columns: {missing}")
        return X

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = self._check_X(X)
        t = self.tree_
        out = np.zeros(len(X), dtype=np.int64)
        columns = {}
        stack = [(0, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            j = t.feature[node]
            if j < 0:
                out[idx] = node
                continue
            if j not in columns:
                col = X[self.feature_names_in_[j]]
                columns[j] = col.astype(str).to_numpy() if self.categorical_[j] else col.to_numpy(dtype=np.float64)
            vals = columns[j][idx]
            if self.categorical_[j]:
                known = np.isin(vals, self.levels_[j])
                go_left = np.isin(vals, list(t.left_levels[node]))
                go_left |= ~known & t.unseen_left[node]
            else:
                go_left = vals <= t.threshold[node]
            stack.append((t.left[node], idx[go_left]))
            stack.append((t.right[node], idx[~go_left]))
        return out

    def predict(self, X) -> np.ndarray:
        leaves = self.apply(X)
        return np.asarray(self.tree_.value, dtype=np.float64)[leaves]

    def get_depth(self) -> int:
        check_is_fitted(self, "tree_")
        return max(self.tree_.depth[i] for i in range(len(self.tree_.value)))

    def get_n_leaves(self) -> int:
        check_is_fitted(self, "tree_")
        return sum(1 for f in self.tree_.feature if f < 0)

    def leaf_sizes(self) -> list[int]:
        check_is_fitted(self, "tree_")
        return [n for f, n in zip(self.tree_.feature, self.tree_.n_samples) if f < 0]


def fit_tree(X, y, max_depth: int = 8, min_leaf: int = 50) -> RegressionTree:
    return RegressionTree(max_depth=max_depth, min_leaf=min_leaf).fit(X, y)


@dataclass
class PDCurve:
    scope: str
    grid: list
    values: np.ndarray
    support: np.ndarray
    fixed: dict = field(default_factory=dict)

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"scope_value": self.grid, "pd_value": self.values, "support": self.support})


def scope_levels(X: pd.DataFrame, scope: str) -> list:
    col = X[scope]
    if isinstance(col.dtype, pd.CategoricalDtype):
        present = set(col.unique())
        return [c for c in col.cat.categories if c in present]
    return sorted(col.unique().tolist())


def _matches(X: pd.DataFrame, fixed: Mapping) -> np.ndarray:
    mask = np.ones(len(X), dtype=bool)
    for name, value in fixed.items():
        mask &= (X[name] == value).to_numpy()
    return mask


def _check_scope(X: pd.DataFrame, scope: str, fixed: Mapping) -> None:
    for name in [scope, *fixed]:
        if name not in X.columns:
            raise SchemaError(f"unknown feature {name!r}")


def partial_dependence(estimator, X: pd.DataFrame, scope: str, fixed: Optional[Mapping] = None) -> PDCurve:
    """Average prediction with ``scope`` forced to each observed level.

    Columns in ``fixed`` are forced to the given value as well, which yields
    one curve per level of e.g. ``coordination``. The average runs over all
    rows of ``X``; identical complement rows are evaluated once and weighted.
    ``support`` counts the rows actually observed at each level (matching
    ``fixed``).
    """
    fixed = dict(fixed or {})
    _check_scope(X, scope, fixed)
    grid = scope_levels(X, scope)
    complement = [c for c in X.columns if c != scope and c not in fixed]
    if complement:
        counted = X.groupby(complement, observed=True, sort=False).size().reset_index(name="_w")
    else:
        counted = pd.DataFrame({"_w": [len(X)]})
    weights = counted.pop("_w").to_numpy(dtype=np.float64)
    match = _matches(X, fixed)
    values, support = [], []
    for v in grid:
        forced = counted.assign(**{scope: v}, **fixed)[list(X.columns)]
        for name in [scope, *fixed]:
            if isinstance(X[name].dtype, pd.CategoricalDtype):
                forced[name] = pd.Categorical(forced[name], categories=X[name].cat.categories)
        pred = estimator.predict(forced)
        values.append(float(np.dot(pred, weights) / weights.sum()))
        support.append(int((match & (X[scope] == v).to_numpy()).sum()))
    return PDCurve(scope, grid, np.array(values), np.array(support), fixed)


def empirical_partial_dependence(X: pd.DataFrame, y, scope: str, fixed: Optional[Mapping] = None) -> PDCurve:
    """Per-level mean of the target; the model-free counterpart of :func:`partial_dependence`."""
    fixed = dict(fixed or {})
    _check_scope(X, scope, fixed)
    y = np.asarray(y, dtype=np.float64)
    match = _matches(X, fixed)
    grid = scope_levels(X, scope)
    values, support = [], []
    for v in grid:
        sel = match & (X[scope] == v).to_numpy()
        support.append(int(sel.sum()))
        values.append(float(y[sel].mean()) if sel.any() else np.nan)
    return PDCurve(scope, grid, np.array(values), np.array(support), fixed)


def round_confidence(df: pd.DataFrame, scope: str, by: str = "coordination", z: float = 1.96) -> pd.DataFrame:
    """95% half-widths of per-level means, treating rounds as the sampling unit."""
    per_round = df.groupby([scope, by, "round"], observed=True)[TARGET].mean()
    g = per_round.groupby(level=[0, 1], observed=True)
    out = pd.DataFrame({"mean": g.mean(), "half_width": z * g.std(ddof=1) / np.sqrt(g.size()), "rounds": g.size()})
    return out.reset_index()


def _panel_frame(estimator, X, scope, coordination_levels, empirical_y=None) -> pd.DataFrame:
    parts = []
    for c in coordination_levels:
        if empirical_y is None:
            curve = partial_dependence(estimator, X, scope, {"coordination": c})
        else:
            curve = empirical_partial_dependence(X, empirical_y, scope, {"coordination": c})
        frame = curve.as_frame()
        frame.insert(1, "coordination", c)
        parts.append(frame)
    return pd.concat(parts, ignore_index=True)[PDP_COLUMNS]


def panel_partial_dependence(
    df: pd.DataFrame,
    scope: str,
    per_panel: bool = True,
    max_depth: int = 8,
    min_leaf: int = 50,
    features: Sequence[str] = FEATURES,
    empirical: bool = False,
) -> dict[tuple, pd.DataFrame]:
    """Partial dependence on ``scope`` for each (k, pattern) panel and coordination mode.

    With ``per_panel`` one tree is fit per panel; otherwise a single tree is
    fit on all rows and the average runs over each panel's rows. With
    ``empirical`` the per-level target means are returned instead.
    """
    if scope not in features:
        raise SchemaError(f"scope {scope!r} is not one of the features {list(features)}")
    features = list(features)
    coords = [c for c in ("autonomous", "coordinated") if c in set(df["coordination"].astype(str))]
    pooled = None
    if not per_panel and not empirical:
        pooled = fit_tree(df[features], df[TARGET], max_depth, min_leaf)
    out = {}
    for key, panel in df.groupby(PANEL_KEYS, observed=True, sort=True):
        X = panel[features]
        if empirical:
            out[key] = _panel_frame(None, X, scope, coords, panel[TARGET].to_numpy())
            continue
        tree = pooled if pooled is not None else fit_tree(X, panel[TARGET], max_depth, min_leaf)
        out[key] = _panel_frame(tree, X, scope, coords)
    return out


def panel_filename(scope: str, key: tuple) -> str:
    k, pattern = key
    return f"pdp_{scope}_k{k}_{pattern}.csv"


def write_panels(panels: Mapping[tuple, pd.DataFrame], out_dir, scope: str, svg: bool = False) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for key, frame in panels.items():
        path = os.path.join(out_dir, panel_filename(scope, key))
        frame.to_csv(path, index=False, float_format="%.6f")
        paths.append(path)
        if svg:
            plot_panel(frame, path[:-4] + ".svg", f"K={key[0]}, {key[1]}", scope)
    return paths


def plot_panel(frame: pd.DataFrame, path: str, title: str, scope: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for coordination, part in frame.groupby("coordination", sort=True):
        ax.plot(part["scope_value"].astype(str), part["pd_value"], marker="o", label=str(coordination))
    ax.set_title(title)
    ax.set_xlabel(scope)
    ax.set_ylabel("partial dependence")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
