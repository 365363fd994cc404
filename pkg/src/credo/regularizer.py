"""Hinge penalties that match model effect gradients to prior slopes.

For a batch, each sample contributes
``relu(sum_entries mask * |effect_derivative - prior_slope| - epsilon)``
and the penalty is the batch mean.  The effect derivative depends on the
effect kind:

* controlled direct: d(output_c)/d(x_i) at the sample;
* natural direct: the same partial, evaluated with mediator columns moved
  to their baseline counterfactual means;
* total: d(output_c)/d(treatment) plus mediator partials times fitted
  d(mediator)/d(treatment) chain derivatives.

Prior slopes are always evaluated at the original sample values.  The
derivative expressions are recorded onto the objective tape, so training
back-propagates through them into the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as nw
from .priors import PriorError, PriorSpec
from .scm import MediatorModel, RoleAssignment, mediator_values


@dataclass
class CredoPenalty:
    """Prior spec plus the causal context its effect kind needs."""

    spec: PriorSpec
    roles: RoleAssignment | None = None
    mediators: MediatorModel | None = None

    def __post_init__(self):
        if self.spec.effect != "ACDE":
            if self.roles is None:
                raise PriorError(f"{self.spec.effect} priors need a role assignment")
            if self.roles.mediators and self.mediators is None:
                raise PriorError(f"{self.spec.effect} priors need fitted mediator models")
            for e in self.spec.entries:
                if e.feature != self.roles.treatment:
                    raise PriorError(
                        f"{self.spec.effect} priors must target the treatment feature "
                        f"{self.roles.treatment}, got {e.feature}"
                    )

    def penalty_points(self, X: np.ndarray) -> np.ndarray:
        """Where the model derivative is taken for each sample."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.spec.effect == "ANDE" and self.roles is not None and self.roles.mediators:
            pts = X.copy()
            z_star = mediator_values(self.mediators, self.roles.baseline)
            for k, m in enumerate(self.roles.mediators):
                pts[:, m] = z_star[k]
            return pts
        return X

    def _entry_expressions(
        self, tape: ad.Tape, xpen: list[ad.Node], outputs: list[ad.Node]
    ) -> list[ad.Node]:
        chain = None
        if self.spec.effect == "ATCE" and self.roles is not None and self.roles.mediators:
            chain = self.mediators.chain_derivatives()
        grads: dict[int, dict[ad.Node, ad.Node]] = {}
        exprs = []
        for e in self.spec.entries:
            c = e.class_index
            if c not in grads:
                grads[c] = ad.record_gradient(tape, outputs[c], xpen)
            g = grads[c]
            if chain is not None:
                parts = [g[xpen[self.roles.treatment]]]
                parts += [
                    g[xpen[m]] * float(ch) for m, ch in zip(self.roles.mediators, chain)
                ]
                exprs.append(tape.sum(parts))
            else:
                exprs.append(g[xpen[e.feature]])
        return exprs

    def build_sample(
        self, tape: ad.Tape, arch: nw.Architecture, param_nodes: list[ad.Node]
    ) -> "PenaltySampleGraph":
        """Per-sample penalty subgraph with input/target/mask leaves."""
        self.spec.validate_for(arch.n_outputs, arch.n_inputs)
        xpen = [tape.input(f"p{i}") for i in range(arch.n_inputs)]
        outputs = nw.build_forward(tape, arch, param_nodes, xpen)
        exprs = self._entry_expressions(tape, xpen, outputs)
        dg_nodes = [tape.input(f"dg{k}") for k in range(len(exprs))]
        mask_nodes = [tape.input(f"pm{k}") for k in range(len(exprs))]
        terms = [m * (d - t).abs() for m, d, t in zip(mask_nodes, exprs, dg_nodes)]
        hinge = (tape.sum(terms) - tape.constant(self.spec.epsilon)).relu()
        rows = np.array(
            [n.index for n in xpen] + [n.index for n in dg_nodes] + [n.index for n in mask_nodes],
            dtype=np.int64,
        )
        return PenaltySampleGraph(
            penalty=self, node=hinge, deriv_nodes=exprs, rows=rows
        )


@dataclass
class PenaltySampleGraph:
    """The tape-side half of a penalty; values bind per batch."""

    penalty: CredoPenalty
    node: ad.Node
    deriv_nodes: list[ad.Node]
    rows: np.ndarray

    def batch_bindings(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rows and the (rows, batch) value matrix to bind for ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        pts = self.penalty.penalty_points(X)
        dg = self.penalty.spec.delta_g_matrix(X)
        mask = self.penalty.spec.mask_matrix(X)
        return self.rows, np.vstack([pts.T, dg, mask])


@dataclass
class PenaltyReport:
    """Unrolled batch penalty with per-sample diagnostics.

    ``derivatives`` holds the matched effect derivative per sample and
    entry; ``residuals`` the masked signed gaps to the prior slopes.
    ``value_at``/``param_gradient`` treat the tape as a function of the
    parameter vector alone.
    """

    tape: ad.Tape
    root: ad.Node
    param_nodes: list[ad.Node]
    data_bindings: dict
    value: float
    per_sample: np.ndarray
    residuals: np.ndarray
    derivatives: np.ndarray

    def value_at(self, theta: np.ndarray) -> float:
        bindings = dict(self.data_bindings)
        bindings.update({p: float(v) for p, v in zip(self.param_nodes, theta)})
        return ad.evaluate(self.tape, bindings, self.root)

    def param_gradient(self, theta: np.ndarray) -> np.ndarray:
        self.value_at(theta)
        return ad.gradient(self.tape, self.root, self.param_nodes).as_array()


def _sample_leaves(tape: ad.Tape, row: np.ndarray, prefix: str, bindings: dict) -> list[ad.Node]:
    """Distinct input leaves per value: differentiation targets must never
    be shared between features the way deduplicated constants are."""
    nodes = []
    for i, v in enumerate(row):
        node = tape.input(f"{prefix}{i}")
        bindings[node] = float(v)
        nodes.append(node)
    return nodes


def _unrolled_penalty(model: nw.Perceptron, X: np.ndarray, penalty: CredoPenalty):
    """Per-sample penalty subgraphs with data held in leaf bindings."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    penalty.spec.validate_for(model.arch.n_outputs, model.arch.n_inputs)
    pts = penalty.penalty_points(X)
    dg = penalty.spec.delta_g_matrix(X)
    mask = penalty.spec.mask_matrix(X)
    tape = ad.Tape()
    params = nw.make_param_nodes(tape, model.arch)
    bindings: dict = {}
    pen_nodes, deriv_rows, resid_rows = [], [], []
    for j in range(X.shape[0]):
        xpen = _sample_leaves(tape, pts[j], f"p{j}_", bindings)
        outputs = nw.build_forward(tape, model.arch, params, xpen)
        exprs = penalty._entry_expressions(tape, xpen, outputs)
        terms = []
        sample_resids = []
        for k, expr in enumerate(exprs):
            gap = expr - tape.constant(dg[k, j])
            masked = tape.constant(mask[k, j]) * gap.abs()
            terms.append(masked)
            sample_resids.append((expr, gap, mask[k, j]))
        pen_nodes.append((tape.sum(terms) - tape.constant(penalty.spec.epsilon)).relu())
        deriv_rows.append([r[0] for r in sample_resids])
        resid_rows.append([(r[1], r[2]) for r in sample_resids])
    root = tape.sum(pen_nodes) * (1.0 / X.shape[0])
    return tape, params, bindings, root, pen_nodes, deriv_rows, resid_rows


def penalty_report(model: nw.Perceptron, X: np.ndarray, penalty: CredoPenalty) -> PenaltyReport:
    """Evaluate an unrolled penalty at the model's current parameters."""
    tape, params, data, root, pen_nodes, deriv_rows, resid_rows = _unrolled_penalty(
        model, X, penalty
    )
    bindings = dict(data)
    bindings.update({p: float(v) for p, v in zip(params, model.params)})
    value = ad.evaluate(tape, bindings, root)
    vals = tape._last_values
    per_sample = np.array([vals[p.index] for p in pen_nodes])
    derivatives = np.array([[vals[d.index] for d in row] for row in deriv_rows])
    residuals = np.array([[vals[g.index] * m for g, m in row] for row in resid_rows])
    return PenaltyReport(
        tape=tape,
        root=root,
        param_nodes=params,
        data_bindings=data,
        value=value,
        per_sample=per_sample,
        residuals=residuals,
        derivatives=derivatives,
    )


def _kind_report(model, X, spec, kind, roles, mediators) -> PenaltyReport:
    if spec.effect != kind:
        raise PriorError(f"prior spec is for {spec.effect}, expected {kind}")
    return penalty_report(model, X, CredoPenalty(spec, roles, mediators))


def acde_penalty(model: nw.Perceptron, X: np.ndarray, spec: PriorSpec) -> PenaltyReport:
    """Controlled-direct-effect penalty: partials at the raw samples."""
    return _kind_report(model, X, spec, "ACDE", None, None)


def ande_penalty(
    model: nw.Perceptron,
    X: np.ndarray,
    spec: PriorSpec,
    roles: RoleAssignment,
    mediators: MediatorModel | None = None,
) -> PenaltyReport:
    """Natural-direct-effect penalty: partials with mediators at baseline."""
    return _kind_report(model, X, spec, "ANDE", roles, mediators)


def atce_penalty(
    model: nw.Perceptron,
    X: np.ndarray,
    spec: PriorSpec,
    roles: RoleAssignment,
    mediators: MediatorModel | None = None,
) -> PenaltyReport:
    """Total-effect penalty: treatment partial plus mediated chain terms."""
    return _kind_report(model, X, spec, "ATCE", roles, mediators)


def combined_objective(
    model: nw.Perceptron,
    X: np.ndarray,
    y: np.ndarray,
    penalty: CredoPenalty,
    lambda_reg: float,
) -> nw.TapeObjective:
    """mean(loss) + lambda * mean(penalty) as one differentiable root.

    Forward graphs are shared between the loss and the penalty whenever
    the penalty evaluates at the raw samples.
    """
    if lambda_reg < 0:
        raise PriorError("lambda must be non-negative")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    penalty.spec.validate_for(model.arch.n_outputs, model.arch.n_inputs)
    targets = nw._target_columns(model.arch, y)
    pts = penalty.penalty_points(X)
    shared_forward = np.array_equal(pts, X)
    dg = penalty.spec.delta_g_matrix(X)
    mask = penalty.spec.mask_matrix(X)

    tape = ad.Tape()
    params = nw.make_param_nodes(tape, model.arch)
    bindings: dict = {}
    loss_nodes, pen_nodes = [], []
    for j in range(X.shape[0]):
        x_nodes = _sample_leaves(tape, X[j], f"x{j}_", bindings)
        t_nodes = [tape.constant(v) for v in targets[j]]
        outputs = nw.build_forward(tape, model.arch, params, x_nodes)
        loss_nodes.append(nw.build_sample_loss(tape, model.arch, outputs, t_nodes))
        if shared_forward:
            xpen, pen_outputs = x_nodes, outputs
        else:
            xpen = _sample_leaves(tape, pts[j], f"p{j}_", bindings)
            pen_outputs = nw.build_forward(tape, model.arch, params, xpen)
        exprs = penalty._entry_expressions(tape, xpen, pen_outputs)
        terms = [
            tape.constant(mask[k, j]) * (expr - tape.constant(dg[k, j])).abs()
            for k, expr in enumerate(exprs)
        ]
        pen_nodes.append((tape.sum(terms) - tape.constant(penalty.spec.epsilon)).relu())
    mean_loss = tape.sum(loss_nodes) * (1.0 / X.shape[0])
    mean_pen = tape.sum(pen_nodes) * (1.0 / X.shape[0])
    root = mean_loss + tape.constant(float(lambda_reg)) * mean_pen
    return nw.TapeObjective(tape=tape, root=root, param_nodes=params, data_bindings=bindings)
