"""Tabular datasets: synthetic recipes, splits, scaling, and CSV files.

The bundled recipes cover the shapes the regularizer is exercised on:
a concave log curve, two sine-plus-exponential surfaces on different
input ranges, a four-node linear structural model whose causal effects
have known closed forms, and a classification task with a planted
label-leaking shortcut feature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import scm


class DataError(ValueError):
    """Malformed dataset, file, or transformation request."""


@dataclass
class Normalization:
    """Per-feature affine scaling x -> (x - shift) / scale."""

    method: str
    shift: np.ndarray
    scale: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.shift) / self.scale

    def invert(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) * self.scale + self.shift


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    target_name: str = "y"
    task: str = "regression"
    splits: dict[str, np.ndarray] | None = None
    normalization: Normalization | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y)
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError("feature matrix and target lengths differ")
        if len(self.feature_names) != self.X.shape[1]:
            raise DataError("feature name count does not match columns")
        if self.task not in ("regression", "classification"):
            raise DataError(f"unknown task {self.task!r}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if self.splits is None or name not in self.splits:
            raise DataError(f"dataset has no {name!r} split")
        idx = self.splits[name]
        return self.X[idx], self.y[idx]

    def train_xy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.part("train")

    def test_xy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.part("test")


def split(dataset: Dataset, fractions: dict[str, float], seed: int) -> Dataset:
    """Shuffled disjoint splits; the lexicographically last one takes the remainder.

    Names are processed in sorted order so that two fraction mappings with
    the same content always produce the same partition, regardless of the
    order a config file or dict literal happened to list them in.
    """
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise DataError(f"split fractions sum to {total}, expected 1")
    order = np.random.default_rng(seed).permutation(dataset.n)
    splits: dict[str, np.ndarray] = {}
    names = sorted(fractions)
    start = 0
    for i, name in enumerate(names):
        count = dataset.n - start if i == len(names) - 1 else int(fractions[name] * dataset.n)
        splits[name] = np.sort(order[start : start + count])
        start += count
    return replace(dataset, splits=splits)


def normalize(dataset: Dataset, method: str) -> Dataset:
    """Scale features; statistics come from the train split when present.

    ``minmax`` maps the fitted range onto [0, 1]; ``zscore`` centers and
    scales by the standard deviation.  Targets are never touched.
    """
    if method == "none":
        return dataset
    if dataset.normalization is not None:
        raise DataError("dataset is already normalized")
    fit_X = dataset.X[dataset.splits["train"]] if dataset.splits and "train" in dataset.splits else dataset.X
    if method == "minmax":
        shift = fit_X.min(axis=0)
        scale = fit_X.max(axis=0) - shift
    elif method == "zscore":
        shift = fit_X.mean(axis=0)
        scale = fit_X.std(axis=0)
    else:
        raise DataError(f"unknown normalization {method!r}")
    flat = np.nonzero(scale == 0.0)[0]
    if flat.size:
        raise DataError(f"feature {dataset.feature_names[flat[0]]!r} is constant; cannot scale")
    norm = Normalization(method=method, shift=shift, scale=scale)
    return replace(dataset, X=norm.apply(dataset.X), normalization=norm)


def binarize_output(dataset: Dataset) -> Dataset:
    """Label 1 where the target exceeds its (train-split) mean, else 0."""
    if dataset.task != "regression":
        raise DataError("only regression targets can be binarized")
    ref = dataset.y[dataset.splits["train"]] if dataset.splits and "train" in dataset.splits else dataset.y
    threshold = float(np.mean(ref))
    labels = (dataset.y > threshold).astype(np.int64)
    meta = dict(dataset.metadata, binarize_threshold=threshold)
    return replace(dataset, y=labels, task="classification", metadata=meta)


# -- synthetic recipes ---------------------------------------------------


def reference_scm() -> scm.CausalGraph:
    """Four-node linear model: W -> Z -> X -> Y with Z, W also direct causes.

    W ~ N(0,1); Z = -2W + N(4,1); X = 0.5Z + N(2,1);
    Y = 2X + Z + W + N(0,0.1).
    """
    return scm.CausalGraph(
        nodes=["w", "z", "x", "y"],
        noise={
            "w": scm.NoiseSpec("normal", (0.0, 1.0)),
            "z": scm.NoiseSpec("normal", (4.0, 1.0)),
            "x": scm.NoiseSpec("normal", (2.0, 1.0)),
            "y": scm.NoiseSpec("normal", (0.0, 0.1)),
        },
        edges=[("w", "z"), ("z", "x"), ("x", "y"), ("z", "y"), ("w", "y")],
        equations={
            "z": scm.StructuralEquation("z", coeffs=(-2.0,)),
            "x": scm.StructuralEquation("x", coeffs=(0.5,)),
            "y": scm.StructuralEquation("y", coeffs=(2.0, 1.0, 1.0)),
        },
    )


def _tabular1(n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    return Dataset(x[:, None], np.log(1.0 + 2.0 * x), ["x"], target_name="y")


def _tabular2(n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    y = rng.uniform(0.0, 1.0, n)
    return Dataset(np.column_stack([x, y]), np.sin(x) + np.exp(y), ["x", "y"], target_name="z")


def _tabular3(n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, -1.0, n)
    y = rng.uniform(-2.0, -1.0, n)
    return Dataset(np.column_stack([x, y]), np.sin(x) + np.exp(y), ["x", "y"], target_name="z")


def _tabular4(n: int, seed: int) -> Dataset:
    vals = reference_scm().sample(n, seed)
    X = np.column_stack([vals["x"], vals["z"], vals["w"]])
    return Dataset(X, vals["y"], ["x", "z", "w"], target_name="y")


def _spurious(n: int, seed: int) -> Dataset:
    """Binary labels caused by u and v, plus a label-leaking shortcut s.

    s is generated FROM the noisy label, so it predicts y strongly in
    any split without causing it; an unconstrained fit leans on s, and
    a zero-effect prior on s is the intended counter.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(0.0, 1.0, n)
    v = rng.normal(0.0, 1.0, n)
    margin = u - v + rng.normal(0.0, 0.5, n)
    y = (margin > 0).astype(np.int64)
    s = 0.8 * (2 * y - 1) + rng.normal(0.0, 0.6, n)
    X = np.column_stack([u, v, s])
    return Dataset(X, y, ["u", "v", "s"], target_name="y", task="classification")


_RECIPES = {
    "tabular1": (_tabular1, 1000),
    "tabular2": (_tabular2, 1000),
    "tabular3": (_tabular3, 1000),
    "tabular4": (_tabular4, 10_000),
    "spurious": (_spurious, 4000),
}


def generate(name: str, n: int | None = None, seed: int = 0) -> Dataset:
    """Build a bundled synthetic dataset by recipe name."""
    if name not in _RECIPES:
        raise DataError(f"unknown recipe {name!r}; choose from {sorted(_RECIPES)}")
    fn, default_n = _RECIPES[name]
    dataset = fn(int(n) if n is not None else default_n, seed)
    dataset.metadata.update({"recipe": name, "seed": seed, "n": dataset.n})
    return dataset


def recipe_names() -> list[str]:
    return sorted(_RECIPES)


# -- CSV -------------------------------------------------------------------


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*dataset.feature_names, dataset.target_name])
        for row, target in zip(dataset.X, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [repr(target.item())])


def load_csv(path, target: str, task: str = "regression", features: list[str] | None = None) -> Dataset:
    """Read a headed CSV; every malformed cell is reported with its line."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        if target not in header:
            raise DataError(f"{path}: target column {target!r} not in header {header}")
        names = features if features is not None else [h for h in header if h != target]
        missing = [n for n in names if n not in header]
        if missing:
            raise DataError(f"{path}: feature columns {missing} not in header")
        cols = [header.index(n) for n in names]
        tcol = header.index(target)
        rows, targets, errors = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                errors.append(f"line {lineno}: {len(row)} fields, expected {len(header)}")
                continue
            try:
                rows.append([float(row[c]) for c in cols])
                targets.append(float(row[tcol]))
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}")
        if errors:
            shown = "; ".join(errors[:5])
            more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
            raise DataError(f"{path}: {shown}{more}")
        if not rows:
            raise DataError(f"{path}: no data rows")
    y = np.asarray(targets)
    if task == "classification":
        labels = y.astype(np.int64)
        if np.any(labels != y):
            raise DataError(f"{path}: classification targets must be integer labels")
        y = labels
    return Dataset(np.asarray(rows), y, list(names), target_name=target, task=task)
