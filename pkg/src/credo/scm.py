"""Structural causal models, role assignments, and mediator regressions.

Graphs are DAGs of named nodes.  Each node carries a noise source and,
when it has parents, a structural equation; values are parent function
plus additive noise.  Interventional sampling draws the same noise stream
as factual sampling (draws for intervened nodes are discarded), so
matched seeds yield matched exogenous randomness.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np


class GraphValidationError(ValueError):
    """The graph description is inconsistent; message names the element."""


class MediatorFitError(RuntimeError):
    """A mediator regression was rank deficient or under-determined."""


@dataclass(frozen=True)
class NoiseSpec:
    dist: str
    params: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.dist not in ("normal", "uniform", "none"):
            raise GraphValidationError(f"unknown noise distribution {self.dist!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.dist == "normal" and self.params[1] < 0:
            raise GraphValidationError("normal noise needs a non-negative scale")
        if self.dist == "uniform" and self.params[1] < self.params[0]:
            raise GraphValidationError("uniform noise needs low <= high")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.dist == "normal":
            return rng.normal(self.params[0], self.params[1], size=n)
        if self.dist == "uniform":
            return rng.uniform(self.params[0], self.params[1], size=n)
        return np.zeros(n)


@dataclass(frozen=True)
class StructuralEquation:
    """Maps parent value arrays to a child value array (before noise).

    ``linear`` equations carry one coefficient per parent in parent order.
    Arbitrary mechanisms use ``closure`` with a callable on the parent
    dict; closures cannot round-trip through JSON.
    """

    child: str
    kind: str = "linear"
    coeffs: tuple[float, ...] = ()
    intercept: float = 0.0
    fn: Callable[[Mapping[str, np.ndarray]], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "closure"):
            raise GraphValidationError(f"equation for {self.child!r}: unknown kind {self.kind!r}")
        if self.kind == "closure" and self.fn is None:
            raise GraphValidationError(f"equation for {self.child!r}: closure requires fn")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    def apply(self, parents: list[str], values: Mapping[str, np.ndarray]) -> np.ndarray:
        if self.kind == "closure":
            return np.asarray(self.fn({p: values[p] for p in parents}), dtype=np.float64)
        out = np.full_like(values[parents[0]], self.intercept) if parents else None
        if out is None:
            raise GraphValidationError(f"linear equation for {self.child!r} has no parents")
        for c, p in zip(self.coeffs, parents):
            out = out + c * values[p]
        return out


@dataclass
class CausalGraph:
    """Nodes with noise, directed edges, and structural equations."""

    nodes: list[str]
    noise: dict[str, NoiseSpec]
    edges: list[tuple[str, str]]
    equations: dict[str, StructuralEquation] = field(default_factory=dict)
    outcome: str | None = None

    def __post_init__(self):
        seen = set()
        for name in self.nodes:
            if name in seen:
                raise GraphValidationError(f"duplicate node {name!r}")
            seen.add(name)
        for name in self.nodes:
            if name not in self.noise:
                raise GraphValidationError(f"node {name!r} has no noise specification")
        for parent, child in self.edges:
            for end in (parent, child):
                if end not in seen:
                    raise GraphValidationError(f"edge ({parent!r}, {child!r}) references unknown node {end!r}")
        self._parents = {name: [] for name in self.nodes}
        for parent, child in self.edges:
            self._parents[child].append(parent)
        for name in self.nodes:
            has_eq = name in self.equations
            if self._parents[name] and not has_eq:
                raise GraphValidationError(f"node {name!r} has parents but no equation")
            if has_eq and not self._parents[name]:
                raise GraphValidationError(f"node {name!r} has an equation but no parents")
            if has_eq:
                eq = self.equations[name]
                if eq.kind == "linear" and len(eq.coeffs) != len(self._parents[name]):
                    raise GraphValidationError(
                        f"equation for {name!r}: {len(eq.coeffs)} coefficients for "
                        f"{len(self._parents[name])} parents"
                    )
        self._topo = self._topo_sort()
        if self.outcome is None:
            sinks = [n for n in self.nodes if not any(p == n for p, _ in self.edges)]
            if len(sinks) == 1:
                self.outcome = sinks[0]
        elif self.outcome not in seen:
            raise GraphValidationError(f"outcome {self.outcome!r} is not a node")

    def parents(self, name: str) -> list[str]:
        return list(self._parents[name])

    def topo_order(self) -> list[str]:
        return list(self._topo)

    def _topo_sort(self) -> list[str]:
        indeg = {n: len(self._parents[n]) for n in self.nodes}
        ready = [n for n in self.nodes if indeg[n] == 0]
        order = []
        children = {n: [] for n in self.nodes}
        for p, c in self.edges:
            children[p].append(c)
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            cyclic = sorted(set(self.nodes) - set(order))
            raise GraphValidationError(f"graph has a cycle through {cyclic}")
        return order

    # -- sampling -------------------------------------------------------

    def sample(self, n: int, seed: int) -> dict[str, np.ndarray]:
        return self.intervene_sample(n, seed, {})

    def intervene_sample(
        self, n: int, seed: int, interventions: Mapping[str, float]
    ) -> dict[str, np.ndarray]:
        """Ancestral sampling with nodes in ``interventions`` pinned.

        Noise is drawn for every node in declaration order regardless of
        interventions, so runs with equal seeds share exogenous draws.
        """
        for name in interventions:
            if name not in self._parents:
                raise GraphValidationError(f"intervention on unknown node {name!r}")
        rng = np.random.default_rng(seed)
        noise = {name: self.noise[name].sample(rng, n) for name in self.nodes}
        values: dict[str, np.ndarray] = {}
        for name in self._topo:
            if name in interventions:
                values[name] = np.full(n, float(interventions[name]))
                continue
            parents = self._parents[name]
            base = self.equations[name].apply(parents, values) if parents else 0.0
            values[name] = base + noise[name]
        return values


# -- roles and mediators ------------------------------------------------


@dataclass(frozen=True)
class NamedRoles:
    """Role assignment by node name, as stored in graph files."""

    treatment: str
    mediators: tuple[str, ...] = ()
    baseline: float = 0.0


@dataclass(frozen=True)
class RoleAssignment:
    """Feature-column roles: one treatment, ordered mediators, rest controls.

    Mediator order must follow the causal ordering (earlier mediators may
    feed later ones); fitted chains and derivative recursions rely on it.
    """

    treatment: int
    mediators: tuple[int, ...] = ()
    baseline: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mediators", tuple(int(m) for m in self.mediators))
        if self.treatment in self.mediators:
            raise GraphValidationError("treatment cannot also be a mediator")
        if len(set(self.mediators)) != len(self.mediators):
            raise GraphValidationError("mediator indices must be distinct")

    def controls(self, n_features: int) -> tuple[int, ...]:
        used = {self.treatment, *self.mediators}
        return tuple(i for i in range(n_features) if i not in used)


def roles_from_names(named: NamedRoles, feature_names: list[str]) -> RoleAssignment:
    index = {name: i for i, name in enumerate(feature_names)}
    missing = [n for n in (named.treatment, *named.mediators) if n not in index]
    if missing:
        raise GraphValidationError(f"role nodes absent from features: {missing}")
    return RoleAssignment(
        treatment=index[named.treatment],
        mediators=tuple(index[m] for m in named.mediators),
        baseline=named.baseline,
    )


@dataclass
class MediatorModel:
    """Frozen linear chain: mediator k regressed on (treatment, earlier mediators)."""

    roles: RoleAssignment
    coeffs: list[np.ndarray]
    intercepts: np.ndarray

    def predict(self, t_values: np.ndarray) -> np.ndarray:
        """Nested mean predictions (n, n_mediators) for treatment values."""
        t = np.asarray(t_values, dtype=np.float64)
        out = np.zeros((t.shape[0], len(self.coeffs)))
        for k, beta in enumerate(self.coeffs):
            regressors = np.column_stack([t, out[:, :k]]) if k else t.reshape(-1, 1)
            out[:, k] = self.intercepts[k] + regressors @ beta
        return out

    def chain_derivatives(self) -> np.ndarray:
        """Total d(mediator_k)/d(treatment) through earlier mediators.

        m_k = beta_t + sum_{j<k} beta_j * m_j, accumulated in chain order.
        """
        total = np.zeros(len(self.coeffs))
        for k, beta in enumerate(self.coeffs):
            total[k] = beta[0] + beta[1 : k + 1] @ total[:k]
        return total


def fit_mediators(X: np.ndarray, roles: RoleAssignment) -> MediatorModel:
    """Least-squares fit of each mediator on (treatment, earlier mediators)."""
    X = np.asarray(X, dtype=np.float64)
    t = X[:, roles.treatment]
    coeffs = []
    intercepts = np.zeros(len(roles.mediators))
    for k, med in enumerate(roles.mediators):
        cols = [t] + [X[:, roles.mediators[j]] for j in range(k)]
        design = np.column_stack([np.ones_like(t)] + cols)
        if X.shape[0] < design.shape[1]:
            raise MediatorFitError(
                f"mediator column {med}: {X.shape[0]} rows cannot fit {design.shape[1]} coefficients"
            )
        sol, _, rank, _ = np.linalg.lstsq(design, X[:, med], rcond=None)
        if rank < design.shape[1]:
            raise MediatorFitError(f"mediator column {med}: design matrix is rank deficient")
        intercepts[k] = sol[0]
        coeffs.append(sol[1:])
    return MediatorModel(roles=roles, coeffs=coeffs, intercepts=intercepts)


def mediator_values(model: MediatorModel, t_value: float) -> np.ndarray:
    """Counterfactual mediator means under do(treatment = t_value)."""
    return model.predict(np.array([float(t_value)]))[0]


# -- JSON round trip ----------------------------------------------------


def graph_to_json(graph: CausalGraph, roles: NamedRoles | None = None) -> dict:
    for eq in graph.equations.values():
        if eq.kind != "linear":
            raise GraphValidationError(f"equation for {eq.child!r}: closures cannot be serialized")
    blob = {
        "nodes": [
            {"name": n, "noise": {"dist": graph.noise[n].dist, "params": list(graph.noise[n].params)}}
            for n in graph.nodes
        ],
        "edges": [[p, c] for p, c in graph.edges],
        "equations": [
            {
                "child": eq.child,
                "type": eq.kind,
                "coeffs": list(eq.coeffs),
                "intercept": eq.intercept,
            }
            for eq in (graph.equations[n] for n in graph.nodes if n in graph.equations)
        ],
    }
    if graph.outcome is not None:
        blob["outcome"] = graph.outcome
    if roles is not None:
        blob["roles"] = {
            "treatment": roles.treatment,
            "mediators": list(roles.mediators),
            "baseline": roles.baseline,
        }
    return blob


def graph_from_json(blob: dict) -> tuple[CausalGraph, NamedRoles | None]:
    try:
        nodes = [entry["name"] for entry in blob["nodes"]]
        noise = {
            entry["name"]: NoiseSpec(entry["noise"]["dist"], tuple(entry["noise"]["params"]))
            for entry in blob["nodes"]
        }
    except KeyError as exc:
        raise GraphValidationError(f"nodes entries need 'name' and 'noise': missing {exc}") from exc
    edges = [tuple(e) for e in blob.get("edges", [])]
    equations = {}
    for i, entry in enumerate(blob.get("equations", [])):
        if "child" not in entry:
            raise GraphValidationError(f"equations[{i}]: missing 'child'")
        kind = entry.get("type", "linear")
        if kind != "linear":
            raise GraphValidationError(f"equations[{i}]: only 'linear' equations load from JSON")
        equations[entry["child"]] = StructuralEquation(
            child=entry["child"],
            kind="linear",
            coeffs=tuple(entry.get("coeffs", ())),
            intercept=float(entry.get("intercept", 0.0)),
        )
    graph = CausalGraph(
        nodes=nodes, noise=noise, edges=edges, equations=equations, outcome=blob.get("outcome")
    )
    roles = None
    if "roles" in blob:
        r = blob["roles"]
        roles = NamedRoles(
            treatment=r["treatment"],
            mediators=tuple(r.get("mediators", ())),
            baseline=float(r.get("baseline", 0.0)),
        )
        for name in (roles.treatment, *roles.mediators):
            if name not in graph._parents:
                raise GraphValidationError(f"roles reference unknown node {name!r}")
        med_pos = {m: graph.topo_order().index(m) for m in roles.mediators}
        ordered = tuple(sorted(roles.mediators, key=med_pos.get))
        if ordered != roles.mediators:
            roles = NamedRoles(roles.treatment, ordered, roles.baseline)
    return graph, roles


def load_graph(path) -> tuple[CausalGraph, NamedRoles | None]:
    with open(path, encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return graph_from_json(blob)


def save_graph(graph: CausalGraph, path, roles: NamedRoles | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_json(graph, roles), fh, indent=1)
        fh.write("\n")
