"""Post-training effect estimation and conformity against priors.

Two estimator families produce effect curves over a treatment grid:

* Monte Carlo: average model outputs over the batch with the treatment
  column pinned to each grid value; mediator columns follow the effect
  kind (factual for controlled-direct, baseline counterfactuals for
  natural-direct, treatment-tracking for total).
* Taylor: second-order expansion around the input mean, using exact
  input Hessians from a tape snapshot of the model.

Curves are anchored to read zero at the grid point nearest the baseline
treatment value, so both estimators and priors are compared shape-to-shape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as nw
from .priors import PriorEntry, PriorFunction
from .scm import MediatorModel, mediator_values

EFFECT_KINDS = ("ACDE", "ANDE", "ATCE")


@dataclass(frozen=True)
class EffectQuery:
    """What to ask of a model: which effect of which feature on which output."""

    treatment: int
    grid: tuple[float, ...]
    class_index: int = 0
    kind: str = "ACDE"
    baseline: float = 0.0

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise ValueError(f"unknown effect kind {self.kind!r}")
        if len(self.grid) < 2:
            raise ValueError("an effect grid needs at least two points")
        object.__setattr__(self, "grid", tuple(float(t) for t in self.grid))


def effect_grid(low: float, high: float, n: int = 50, baseline: float = 0.0) -> tuple[float, ...]:
    """Evenly spaced grid; the point nearest an in-range baseline becomes it."""
    ts = np.linspace(float(low), float(high), int(n))
    if low <= baseline <= high:
        ts[int(np.argmin(np.abs(ts - baseline)))] = baseline
    return tuple(ts)


@dataclass
class EffectCurve:
    """Anchored effect curve: values read zero at the point nearest baseline."""

    ts: np.ndarray
    values: np.ndarray
    baseline: float
    offset: float  # raw expectation at the anchor point

    @property
    def anchor_index(self) -> int:
        return int(np.argmin(np.abs(self.ts - self.baseline)))

    def as_points(self) -> np.ndarray:
        return np.column_stack([self.ts, self.values])


def _anchored(ts: np.ndarray, raw: np.ndarray, baseline: float) -> EffectCurve:
    anchor = int(np.argmin(np.abs(ts - baseline)))
    return EffectCurve(ts=ts, values=raw - raw[anchor], baseline=baseline, offset=float(raw[anchor]))


def _outputs(fn, X: np.ndarray) -> np.ndarray:
    out = fn.forward(X) if isinstance(fn, nw.Perceptron) else fn(X)
    return np.atleast_2d(np.asarray(out, dtype=np.float64).T).T


# -- Monte Carlo estimators ----------------------------------------------


def _interventional_inputs(
    X: np.ndarray, query: EffectQuery, t: float, mediators: MediatorModel | None
) -> np.ndarray:
    Xi = np.array(X, dtype=np.float64, copy=True)
    Xi[:, query.treatment] = t
    if query.kind != "ACDE" and mediators is not None and mediators.roles.mediators:
        if mediators.roles.treatment != query.treatment:
            raise ValueError("mediator model was fitted for a different treatment")
        at = query.baseline if query.kind == "ANDE" else t
        z = mediator_values(mediators, at)
        for k, m in enumerate(mediators.roles.mediators):
            Xi[:, m] = z[k]
    return Xi


def mc_interventional_expectation(
    fn, X: np.ndarray, query: EffectQuery, t: float, mediators: MediatorModel | None = None
) -> float:
    """Batch-averaged model output under do(treatment = t).

    Controls always keep their factual values.  Mediators keep factual
    values for ACDE, sit at baseline counterfactual means for ANDE, and
    track the intervened treatment for ATCE.
    """
    Xi = _interventional_inputs(np.atleast_2d(X), query, t, mediators)
    return float(np.mean(_outputs(fn, Xi)[:, query.class_index]))


def mc_effect_curve(
    fn, X: np.ndarray, query: EffectQuery, mediators: MediatorModel | None = None
) -> EffectCurve:
    ts = np.asarray(query.grid)
    raw = np.array(
        [mc_interventional_expectation(fn, X, query, t, mediators) for t in ts]
    )
    return _anchored(ts, raw, query.baseline)


# -- Taylor estimator ------------------------------------------------------


class ModelTape:
    """Differentiable snapshot of a model: inputs in, outputs out.

    Parameters are frozen into the tape, so gradient recordings (cached
    per output) can be reused across many evaluation points.
    """

    def __init__(self, tape: ad.Tape, x_nodes: list[ad.Node], output_nodes: list[ad.Node]):
        self.tape = tape
        self.x_nodes = x_nodes
        self.output_nodes = output_nodes

    @classmethod
    def from_perceptron(cls, model: nw.Perceptron) -> "ModelTape":
        tape = ad.Tape()
        params = [tape.constant(v) for v in model.params]
        xs = [tape.input(f"x{i}") for i in range(model.arch.n_inputs)]
        outs = nw.build_forward(tape, model.arch, params, xs)
        return cls(tape, xs, outs)

    def _bind(self, x: np.ndarray) -> dict:
        return {node: float(v) for node, v in zip(self.x_nodes, x)}

    def value(self, x: np.ndarray, class_index: int = 0) -> float:
        return ad.evaluate(self.tape, self._bind(x), self.output_nodes[class_index])

    def input_gradient(self, x: np.ndarray, class_index: int = 0) -> np.ndarray:
        root = self.output_nodes[class_index]
        ad.evaluate(self.tape, self._bind(x), root)
        return ad.gradient(self.tape, root, self.x_nodes).as_array()

    def input_hessian(self, x: np.ndarray, class_index: int = 0) -> np.ndarray:
        root = self.output_nodes[class_index]
        return ad.input_hessian(self.tape, root, self.x_nodes, bindings=self._bind(x))


def taylor_ace_curve(fn, X: np.ndarray, query: EffectQuery) -> EffectCurve:
    """Second-order interventional expectations around the batch moments.

    For each grid value the input mean gets its treatment coordinate
    pinned, treatment rows and columns of the covariance are zeroed, and
    IE = f(mean) + trace(hessian @ cov) / 2.  Exact whenever the model is
    at most quadratic; otherwise a curvature-aware approximation.
    """
    if isinstance(fn, nw.Perceptron):
        fn = ModelTape.from_perceptron(fn)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mu = X.mean(axis=0)
    # biased covariance: with it, batch-averaging a quadratic model equals
    # its second-order expansion around the batch mean exactly
    cov = np.atleast_2d(np.cov(X.T, bias=True)) if X.shape[0] > 1 else np.zeros((X.shape[1],) * 2)
    cov_t = cov.copy()
    cov_t[query.treatment, :] = 0.0
    cov_t[:, query.treatment] = 0.0
    ts = np.asarray(query.grid)
    raw = np.zeros_like(ts)
    for i, t in enumerate(ts):
        mu_t = mu.copy()
        mu_t[query.treatment] = t
        H = fn.input_hessian(mu_t, query.class_index)
        raw[i] = fn.value(mu_t, query.class_index) + 0.5 * float(np.trace(H @ cov_t))
    return _anchored(ts, raw, query.baseline)


# -- conformity ------------------------------------------------------------


def frechet_distance(P: np.ndarray, Q: np.ndarray) -> float:
    """Discrete Fréchet distance between two point sequences.

    Dynamic program over the coupling lattice: the cost of a cell is the
    larger of the local distance and the cheapest predecessor.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if P.shape[0] == 0 or Q.shape[0] == 0:
        raise ValueError("curves must contain at least one point")
    d = np.sqrt(((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=2))
    n, m = d.shape
    ca = np.empty((n, m))
    ca[0, 0] = d[0, 0]
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i, j - 1], ca[i - 1, j - 1]), d[i, j])
    return float(ca[-1, -1])


@dataclass
class ConformityReport:
    """Shape agreement between a model effect curve and its prior.

    ``pearson`` is None when either anchored curve is constant, where
    correlation is undefined.
    """

    rmse: float
    frechet: float
    pearson: float | None


def _prior_values(prior, ts: np.ndarray) -> np.ndarray:
    if isinstance(prior, PriorEntry):
        return np.asarray(prior.curve(ts), dtype=np.float64)
    if isinstance(prior, PriorFunction):
        return np.asarray(prior.value(ts), dtype=np.float64)
    raise TypeError("prior must be a PriorEntry or PriorFunction")


def prior_curve(prior, query: EffectQuery) -> EffectCurve:
    """The prior's own shape over the query grid, anchored like the model's."""
    ts = np.asarray(query.grid)
    return _anchored(ts, _prior_values(prior, ts), query.baseline)


def conformity(curve: EffectCurve, prior) -> ConformityReport:
    """Root-mean-square gap, Fréchet distance, and correlation to the prior."""
    ref = _prior_values(prior, curve.ts)
    anchor = curve.anchor_index
    ref = ref - ref[anchor]
    gap = curve.values - ref
    rmse = float(np.sqrt(np.mean(gap * gap)))
    fd = frechet_distance(curve.as_points(), np.column_stack([curve.ts, ref]))
    if np.ptp(curve.values) == 0.0 or np.ptp(ref) == 0.0:
        pearson = None
    else:
        pearson = float(np.corrcoef(curve.values, ref)[0, 1])
    return ConformityReport(rmse=rmse, frechet=fd, pearson=pearson)


# -- curve files -------------------------------------------------------------


def save_curve(curve: EffectCurve, path) -> None:
    """CSV with header ``t,effect`` and 12-significant-digit values."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "effect"])
        for t, v in zip(curve.ts, curve.values):
            writer.writerow([f"{t:.12g}", f"{v:.12g}"])


def load_curve(path, baseline: float = 0.0) -> EffectCurve:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "effect"]:
            raise ValueError(f"{path}: expected header 't,effect', got {header}")
        rows = [(float(t), float(v)) for t, v in reader]
    ts = np.array([r[0] for r in rows])
    values = np.array([r[1] for r in rows])
    return EffectCurve(ts=ts, values=values, baseline=baseline, offset=0.0)
