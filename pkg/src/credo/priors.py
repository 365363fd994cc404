"""Domain priors on causal effect shapes.

A prior states how the outcome should respond to one feature: a curve
family g(x) with closed-form derivatives.  Training matches model
gradients against g'(x); post-training conformity compares effect curves
against g(x) directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np


class PriorError(ValueError):
    """Invalid prior definition or evaluation outside its domain."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class PriorFunction:
    """One effect-shape family with value, slope, and curvature."""

    family: str
    params: tuple[float, ...] = ()
    points: tuple[tuple[float, float], ...] = ()

    @classmethod
    def zero(cls) -> "PriorFunction":
        return cls("zero")

    @classmethod
    def linear(cls, alpha: float) -> "PriorFunction":
        return cls("linear", (float(alpha),))

    @classmethod
    def quadratic(cls, a: float) -> "PriorFunction":
        return cls("quadratic", (float(a),))

    @classmethod
    def exponential_j(cls, a: float, b: float) -> "PriorFunction":
        return cls("exponential_j", (float(a), float(b)))

    @classmethod
    def cubic_diminishing(cls, a: float, b: float) -> "PriorFunction":
        return cls("cubic_diminishing", (float(a), float(b)))

    @classmethod
    def log1p(cls, a: float, b: float) -> "PriorFunction":
        return cls("log1p", (float(a), float(b)))

    @classmethod
    def exponential(cls, a: float, b: float) -> "PriorFunction":
        return cls("exponential", (float(a), float(b)))

    @classmethod
    def tabulated(cls, points) -> "PriorFunction":
        pts = tuple((float(x), float(y)) for x, y in points)
        if len(pts) < 2:
            raise PriorError("tabulated prior needs at least two points")
        xs = [p[0] for p in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise PriorError("tabulated prior abscissae must strictly increase")
        return cls("tabulated", (), pts)

    def __post_init__(self):
        expected = _FAMILY_ARITY.get(self.family)
        if expected is None:
            raise PriorError(f"unknown prior family {self.family!r}")
        if self.family != "tabulated" and len(self.params) != expected:
            raise PriorError(
                f"family {self.family!r} takes {expected} parameters, got {len(self.params)}"
            )

    def _tab_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(self.points)
        return pts[:, 0], pts[:, 1]

    def _tab_segment(self, x: np.ndarray) -> np.ndarray:
        xs, _ = self._tab_arrays()
        if np.any(x < xs[0]) or np.any(x > xs[-1]):
            raise PriorError(
                f"tabulated prior evaluated outside [{xs[0]}, {xs[-1]}]"
            )
        return np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)

    def value(self, x) -> np.ndarray:
        x = _as_array(x)
        if self.family == "zero":
            return np.zeros_like(x)
        if self.family == "linear":
            return self.params[0] * x
        if self.family == "quadratic":
            return self.params[0] * x * x
        if self.family == "exponential_j":
            a, b = self.params
            return a * np.exp(b * x * x)
        if self.family == "cubic_diminishing":
            a, b = self.params
            return -a * x**3 + b * x * x
        if self.family == "log1p":
            a, b = self.params
            arg = 1.0 + b * x
            if np.any(arg <= 0):
                raise PriorError("log1p prior evaluated where 1 + b*x <= 0")
            return a * np.log(arg)
        if self.family == "exponential":
            a, b = self.params
            return a * np.exp(b * x)
        xs, ys = self._tab_arrays()
        self._tab_segment(x)  # domain check
        return np.interp(x, xs, ys)

    def derivative(self, x) -> np.ndarray:
        x = _as_array(x)
        if self.family == "zero":
            return np.zeros_like(x)
        if self.family == "linear":
            return np.full_like(x, self.params[0])
        if self.family == "quadratic":
            return 2.0 * self.params[0] * x
        if self.family == "exponential_j":
            a, b = self.params
            return 2.0 * a * b * x * np.exp(b * x * x)
        if self.family == "cubic_diminishing":
            a, b = self.params
            return -3.0 * a * x * x + 2.0 * b * x
        if self.family == "log1p":
            a, b = self.params
            arg = 1.0 + b * x
            if np.any(arg <= 0):
                raise PriorError("log1p prior evaluated where 1 + b*x <= 0")
            return a * b / arg
        if self.family == "exponential":
            a, b = self.params
            return a * b * np.exp(b * x)
        xs, ys = self._tab_arrays()
        seg = self._tab_segment(x)
        slopes = np.diff(ys) / np.diff(xs)
        return slopes[seg]

    def second_derivative(self, x) -> np.ndarray:
        x = _as_array(x)
        if self.family in ("zero", "linear", "tabulated"):
            return np.zeros_like(x)
        if self.family == "quadratic":
            return np.full_like(x, 2.0 * self.params[0])
        if self.family == "exponential_j":
            a, b = self.params
            return 2.0 * a * b * np.exp(b * x * x) * (1.0 + 2.0 * b * x * x)
        if self.family == "cubic_diminishing":
            a, b = self.params
            return -6.0 * a * x + 2.0 * b
        if self.family == "log1p":
            a, b = self.params
            return -a * b * b / (1.0 + b * x) ** 2
        a, b = self.params
        return a * b * b * np.exp(b * x)


_FAMILY_ARITY = {
    "zero": 0,
    "linear": 1,
    "quadratic": 1,
    "exponential_j": 2,
    "cubic_diminishing": 2,
    "log1p": 2,
    "exponential": 2,
    "tabulated": 0,
}

EFFECT_KINDS = ("ACDE", "ANDE", "ATCE")


@dataclass(frozen=True)
class PriorEntry:
    """One prior attached to an (output class, input feature) pair.

    ``scale`` multiplies the whole curve; the binary-class expansion uses
    it to mirror a prior onto the opposite logit.  ``active_range``
    restricts matching to samples whose feature value falls inside it.
    """

    feature: int
    class_index: int
    fn: PriorFunction
    active_range: tuple[float, float] | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.feature < 0 or self.class_index < 0:
            raise PriorError("feature and class indices must be non-negative")
        if self.active_range is not None:
            lo, hi = self.active_range
            if hi < lo:
                raise PriorError("active range must satisfy low <= high")
            object.__setattr__(self, "active_range", (float(lo), float(hi)))

    def curve(self, x) -> np.ndarray:
        return self.scale * self.fn.value(x)

    def derivative(self, x) -> np.ndarray:
        return self.scale * self.fn.derivative(x)

    def mask(self, x) -> np.ndarray:
        x = _as_array(x)
        if self.active_range is None:
            return np.ones_like(x)
        lo, hi = self.active_range
        return ((x >= lo) & (x <= hi)).astype(np.float64)


@dataclass(frozen=True)
class PriorSpec:
    """The full set of priors matched during training.

    All entries share one effect kind and one slack ``epsilon``; entries
    are kept sorted by (class, feature) so derived matrices have a stable
    row order.
    """

    entries: tuple[PriorEntry, ...]
    effect: str = "ACDE"
    epsilon: float = 0.0

    def __post_init__(self):
        if self.effect not in EFFECT_KINDS:
            raise PriorError(f"unknown effect kind {self.effect!r}")
        if self.epsilon < 0:
            raise PriorError("epsilon must be non-negative")
        ordered = tuple(sorted(self.entries, key=lambda e: (e.class_index, e.feature)))
        keys = [(e.class_index, e.feature) for e in ordered]
        if len(set(keys)) != len(keys):
            raise PriorError("duplicate (class, feature) prior entries")
        if not ordered:
            raise PriorError("a prior specification needs at least one entry")
        object.__setattr__(self, "entries", ordered)

    def validate_for(self, n_classes: int, n_features: int) -> None:
        for e in self.entries:
            if e.feature >= n_features:
                raise PriorError(f"prior feature index {e.feature} out of range")
            if e.class_index >= n_classes:
                raise PriorError(f"prior class index {e.class_index} out of range")

    def mask(self, n_classes: int, n_features: int) -> np.ndarray:
        """(n_classes, n_features) 0/1 matrix of constrained pairs."""
        self.validate_for(n_classes, n_features)
        M = np.zeros((n_classes, n_features))
        for e in self.entries:
            M[e.class_index, e.feature] = 1.0
        return M

    def delta_g_matrix(self, X: np.ndarray) -> np.ndarray:
        """Target derivatives per entry row, evaluated at each sample."""
        X = np.atleast_2d(_as_array(X))
        return np.stack([e.derivative(X[:, e.feature]) for e in self.entries])

    def mask_matrix(self, X: np.ndarray) -> np.ndarray:
        """Per-entry, per-sample activity from the entries' ranges."""
        X = np.atleast_2d(_as_array(X))
        return np.stack([e.mask(X[:, e.feature]) for e in self.entries])


def signed_class_expansion(spec: PriorSpec, n_classes: int = 2) -> PriorSpec:
    """Mirror single-logit priors onto the opposite logit with flipped sign.

    With two logits, raising one for a feature should lower the other by
    the same amount; stating the prior on both halves symmetrizes the
    constraint.  Entries must all target the same class.
    """
    if n_classes != 2:
        raise PriorError("signed expansion is defined for two-class outputs")
    classes = {e.class_index for e in spec.entries}
    if len(classes) != 1:
        raise PriorError("signed expansion needs all entries on a single class")
    (c,) = classes
    if c > 1:
        raise PriorError("signed expansion needs class indices in {0, 1}")
    mirrored = [
        PriorEntry(e.feature, 1 - c, e.fn, e.active_range, -e.scale) for e in spec.entries
    ]
    return PriorSpec(
        entries=spec.entries + tuple(mirrored), effect=spec.effect, epsilon=spec.epsilon
    )


# -- slope search -------------------------------------------------------


@dataclass(frozen=True)
class SlopeSearchSpace:
    """Candidate prior parameters, tried in ascending order."""

    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise PriorError("slope search needs at least one candidate")
        object.__setattr__(self, "values", tuple(sorted(float(v) for v in self.values)))

    @classmethod
    def grid(cls, low: float, high: float, step: float) -> "SlopeSearchSpace":
        n = int(round((high - low) / step))
        return cls(tuple(low + i * step for i in range(n + 1)))


@dataclass
class SlopeSearchResult:
    best: float
    best_score: float
    scores: list[tuple[float, float | None]]


def slope_search(
    space: SlopeSearchSpace, evaluate_candidate: Callable[[float], float]
) -> SlopeSearchResult:
    """Pick the candidate with the highest score; ties keep the smallest.

    A candidate whose evaluation raises is recorded with a ``None`` score
    and skipped.  All candidates failing is an error.
    """
    best = None
    best_score = -np.inf
    scores: list[tuple[float, float | None]] = []
    for value in space.values:
        try:
            score = float(evaluate_candidate(value))
        except Exception:
            scores.append((value, None))
            continue
        scores.append((value, score))
        if score > best_score:
            best, best_score = value, score
    if best is None:
        raise PriorError("every slope candidate failed to evaluate")
    return SlopeSearchResult(best=best, best_score=best_score, scores=scores)


# -- JSON ----------------------------------------------------------------


_PARAM_NAMES = {
    "zero": (),
    "linear": ("alpha",),
    "quadratic": ("a",),
    "exponential_j": ("a", "b"),
    "cubic_diminishing": ("a", "b"),
    "log1p": ("a", "b"),
    "exponential": ("a", "b"),
}


def _fn_from_json(entry: dict, where: str) -> PriorFunction:
    family = entry.get("family")
    if family == "tabulated":
        points = entry.get("params", {}).get("points")
        if not points:
            raise PriorError(f"{where}: tabulated prior needs params.points")
        return PriorFunction.tabulated(points)
    names = _PARAM_NAMES.get(family)
    if names is None:
        raise PriorError(f"{where}: unknown prior family {family!r}")
    given = entry.get("params", {})
    missing = [n for n in names if n not in given]
    if missing:
        raise PriorError(f"{where}: family {family!r} missing parameters {missing}")
    return PriorFunction(family, tuple(float(given[n]) for n in names))


def load_priors(source, feature_names: list[str], n_classes: int = 1) -> PriorSpec:
    """Build a PriorSpec from a JSON file path or an already-parsed dict."""
    if isinstance(source, dict):
        blob = source
    else:
        with open(source, encoding="utf-8") as fh:
            try:
                blob = json.load(fh)
            except json.JSONDecodeError as exc:
                raise PriorError(f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    index = {name: i for i, name in enumerate(feature_names)}
    entries = []
    for i, item in enumerate(blob.get("priors", [])):
        where = f"priors[{i}]"
        feature = item.get("feature")
        if feature not in index:
            raise PriorError(f"{where}: unknown feature {feature!r}")
        class_index = int(item.get("class", 0))
        if class_index >= n_classes:
            raise PriorError(f"{where}: class {class_index} out of range for {n_classes} outputs")
        rng = item.get("range")
        entries.append(
            PriorEntry(
                feature=index[feature],
                class_index=class_index,
                fn=_fn_from_json(item, where),
                active_range=tuple(rng) if rng is not None else None,
                scale=float(item.get("scale", 1.0)),
            )
        )
    return PriorSpec(
        entries=tuple(entries),
        effect=blob.get("effect", "ACDE"),
        epsilon=float(blob.get("epsilon", 0.0)),
    )


def priors_to_json(spec: PriorSpec, feature_names: list[str]) -> dict:
    items = []
    for e in spec.entries:
        if e.fn.family == "tabulated":
            params = {"points": [list(p) for p in e.fn.points]}
        else:
            params = dict(zip(_PARAM_NAMES[e.fn.family], e.fn.params))
        item = {
            "feature": feature_names[e.feature],
            "class": e.class_index,
            "family": e.fn.family,
            "params": params,
        }
        if e.active_range is not None:
            item["range"] = list(e.active_range)
        if e.scale != 1.0:
            item["scale"] = e.scale
        items.append(item)
    return {"epsilon": spec.epsilon, "effect": spec.effect, "priors": items}


def save_priors(spec: PriorSpec, feature_names: list[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(priors_to_json(spec, feature_names), fh, indent=1)
        fh.write("\n")
