"""Penalty construction, effect-kind routing, and training integration."""

import numpy as np
import pytest

from credo import network as nw
from credo import regularizer as rg
from credo import scm
from credo.priors import PriorEntry, PriorFunction, PriorSpec, PriorError


def linear_model(weights, intercept=0.0, n_outputs=1):
    """No-hidden-layer perceptron with hand-set weights: y = w @ x + b."""
    w = np.asarray(weights, dtype=np.float64)
    arch = nw.Architecture(w.shape[0], (), n_outputs)
    model = nw.Perceptron(arch, seed=0)
    model.params = np.concatenate([w.reshape(-1), [float(intercept)]])
    return model


def spec_on(feature, fn, effect="ACDE", epsilon=0.0, class_index=0):
    return PriorSpec(
        entries=(PriorEntry(feature, class_index, fn),), effect=effect, epsilon=epsilon
    )


class TestAcdePenalty:
    def test_linear_model_closed_form(self):
        # y = 3x0 - x1: d y/d x0 = 3 everywhere, so the penalty is |3 - alpha|
        model = linear_model([3.0, -1.0])
        X = np.random.default_rng(0).normal(size=(8, 2))
        for alpha, eps in [(3.0, 0.0), (1.0, 0.0), (1.0, 1.5), (1.0, 5.0)]:
            report = rg.acde_penalty(model, X, spec_on(0, PriorFunction.linear(alpha), epsilon=eps))
            assert report.value == pytest.approx(max(abs(3.0 - alpha) - eps, 0.0), abs=1e-14)
            np.testing.assert_allclose(report.derivatives[:, 0], 3.0, atol=1e-14)

    def test_derivatives_match_forward_fd(self):
        arch = nw.Architecture(2, (6,), 1)
        model = nw.Perceptron(arch, seed=21)
        X = np.random.default_rng(1).uniform(-1, 1, size=(12, 2))
        report = rg.acde_penalty(model, X, spec_on(0, PriorFunction.zero()))
        h = 1e-6
        for j in range(X.shape[0]):
            up, dn = X[j].copy(), X[j].copy()
            up[0] += h
            dn[0] -= h
            fd = (model.forward(up)[0] - model.forward(dn)[0]) / (2 * h)
            assert report.derivatives[j, 0] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_per_sample_hinge_recomputed(self):
        arch = nw.Architecture(2, (4,), 1)
        model = nw.Perceptron(arch, seed=5)
        X = np.random.default_rng(3).normal(size=(10, 2))
        spec = PriorSpec(
            entries=(
                PriorEntry(0, 0, PriorFunction.linear(0.3)),
                PriorEntry(1, 0, PriorFunction.quadratic(0.2), active_range=(-0.5, 0.5)),
            ),
            epsilon=0.05,
        )
        report = rg.acde_penalty(model, X, spec)
        dg = spec.delta_g_matrix(X)
        mask = spec.mask_matrix(X)
        resid = np.sum(mask.T * np.abs(report.derivatives - dg.T), axis=1)
        np.testing.assert_allclose(report.per_sample, np.maximum(resid - 0.05, 0.0), atol=1e-12)
        assert report.value == pytest.approx(report.per_sample.mean(), rel=1e-12)

    def test_range_mask_zeroes_out_of_range_samples(self):
        model = linear_model([2.0])
        X = np.array([[0.5], [5.0]])
        spec = PriorSpec(
            entries=(PriorEntry(0, 0, PriorFunction.linear(0.0), active_range=(0.0, 1.0)),)
        )
        report = rg.acde_penalty(model, X, spec)
        np.testing.assert_allclose(report.per_sample, [2.0, 0.0])
        np.testing.assert_allclose(report.residuals, [[2.0], [0.0]])

    def test_param_gradient_matches_fd(self):
        arch = nw.Architecture(2, (5,), 1)
        model = nw.Perceptron(arch, seed=2)
        X = np.random.default_rng(4).uniform(0.2, 1.0, size=(6, 2))
        spec = spec_on(0, PriorFunction.linear(1.0), epsilon=0.0)
        report = rg.acde_penalty(model, X, spec)
        grad = report.param_gradient(model.params)
        h = 1e-6
        rng = np.random.default_rng(5)
        for j in rng.choice(model.arch.n_params, size=8, replace=False):
            theta = model.params.copy()
            theta[j] += h
            up = report.value_at(theta)
            theta[j] -= 2 * h
            dn = report.value_at(theta)
            assert grad[j] == pytest.approx((up - dn) / (2 * h), rel=2e-4, abs=1e-7)

    def test_equal_feature_values_keep_distinct_partials(self):
        # y = 3x0 - x1 probed at x0 == x1: the two partials must not merge
        model = linear_model([3.0, -1.0])
        X = np.array([[0.0, 0.0], [2.0, 2.0]])
        spec = PriorSpec(
            entries=(
                PriorEntry(0, 0, PriorFunction.linear(0.0)),
                PriorEntry(1, 0, PriorFunction.linear(0.0)),
            )
        )
        report = rg.acde_penalty(model, X, spec)
        np.testing.assert_allclose(report.derivatives, [[3.0, -1.0], [3.0, -1.0]], atol=1e-14)

    def test_classification_uses_logit_gradients(self):
        arch = nw.Architecture(2, (4,), 2, "classification")
        model = nw.Perceptron(arch, seed=7)
        X = np.random.default_rng(6).normal(size=(5, 2))
        spec = spec_on(1, PriorFunction.zero(), class_index=1)
        report = rg.acde_penalty(model, X, spec)
        h = 1e-6
        for j in range(X.shape[0]):
            up, dn = X[j].copy(), X[j].copy()
            up[1] += h
            dn[1] -= h
            fd = (model.forward(up)[1] - model.forward(dn)[1]) / (2 * h)
            assert report.derivatives[j, 0] == pytest.approx(fd, rel=1e-5, abs=1e-7)


class TestAndePenalty:
    def _mediator_model(self, z_const=-10.0):
        # mediator column 1 regressed on treatment column 0; data pins z
        rng = np.random.default_rng(8)
        t = rng.normal(size=50)
        X = np.column_stack([t, np.full(50, z_const)])
        roles = scm.RoleAssignment(treatment=0, mediators=(1,), baseline=0.0)
        return roles, scm.fit_mediators(X, roles)

    def test_partial_taken_at_counterfactual_mediator(self):
        # y = relu(t + z): slope in t is 1 where t + z > 0, else 0
        arch = nw.Architecture(2, (1,), 1)
        model = nw.Perceptron(arch, seed=0)
        model.params = np.array([1.0, 1.0, 0.0, 1.0, 0.0])  # W1=[1,1], b1=0, W2=[1], b2=0
        roles, med = self._mediator_model(z_const=-10.0)
        X = np.array([[1.0, 5.0], [2.0, 9.0]])  # factual t+z > 0
        spec = spec_on(0, PriorFunction.linear(1.0), effect="ANDE")
        report = rg.ande_penalty(model, X, spec, roles, med)
        # at (t, z*=-10) the unit is off, so the direct slope is 0
        np.testing.assert_allclose(report.derivatives[:, 0], 0.0, atol=1e-12)
        acde = rg.acde_penalty(model, X, spec_on(0, PriorFunction.linear(1.0)))
        np.testing.assert_allclose(acde.derivatives[:, 0], 1.0, atol=1e-12)

    def test_penalty_points_replace_mediator_columns(self):
        roles, med = self._mediator_model(z_const=3.5)
        pen = rg.CredoPenalty(spec_on(0, PriorFunction.zero(), effect="ANDE"), roles, med)
        X = np.array([[1.0, 99.0], [2.0, -7.0]])
        pts = pen.penalty_points(X)
        np.testing.assert_allclose(pts[:, 1], 3.5, atol=1e-10)
        np.testing.assert_array_equal(pts[:, 0], X[:, 0])
        # original matrix untouched
        assert X[0, 1] == 99.0


class TestAtcePenalty:
    @pytest.mark.parametrize("a,b", [(3.0, 2.0), (-2.0, 0.5), (0.7, -1.3)])
    def test_total_derivative_composes_chain(self, a, b):
        # y = t + b*z with mediator z = a*t: total dy/dt = 1 + a*b
        model = linear_model([1.0, b])
        t = np.linspace(-2, 2, 40)
        fit_X = np.column_stack([t, a * t])
        roles = scm.RoleAssignment(treatment=0, mediators=(1,), baseline=0.0)
        med = scm.fit_mediators(fit_X, roles)
        spec = spec_on(0, PriorFunction.linear(1.0 + a * b), effect="ATCE")
        X = np.random.default_rng(9).normal(size=(6, 2))
        report = rg.atce_penalty(model, X, spec, roles, med)
        np.testing.assert_allclose(report.derivatives[:, 0], 1.0 + a * b, atol=1e-10)
        assert report.value == pytest.approx(0.0, abs=1e-10)

    def test_two_step_chain(self):
        # z1 = 2t + noise, z2 = t - z1: y = t + z1 + z2 = 2t + 0, so the
        # total slope is exactly 2; the z1 estimation error cancels in the
        # recursion because d z2/d t = 1 - d z1/d t.
        rng = np.random.default_rng(20)
        t = np.linspace(-1, 3, 60)
        z1 = 2 * t + rng.normal(0, 0.1, 60)
        fit_X = np.column_stack([t, z1, t - z1])
        roles = scm.RoleAssignment(treatment=0, mediators=(1, 2), baseline=0.0)
        med = scm.fit_mediators(fit_X, roles)
        model = linear_model([1.0, 1.0, 1.0])
        spec = spec_on(0, PriorFunction.linear(0.0), effect="ATCE")
        report = rg.atce_penalty(model, np.zeros((3, 3)), spec, roles, med)
        np.testing.assert_allclose(report.derivatives[:, 0], 2.0, atol=1e-9)


class TestReductions:
    """With no mediators declared, every effect kind is the controlled one."""

    def _arms(self, effect):
        arch = nw.Architecture(3, (5,), 1)
        model = nw.Perceptron(arch, seed=13)
        X = np.random.default_rng(10).normal(size=(9, 3))
        roles = scm.RoleAssignment(treatment=1, mediators=(), baseline=0.0)
        spec = spec_on(1, PriorFunction.linear(0.4), effect=effect, epsilon=0.1)
        if effect == "ACDE":
            return rg.acde_penalty(model, X, spec)
        fn = rg.ande_penalty if effect == "ANDE" else rg.atce_penalty
        return fn(model, X, spec, roles, None)

    def test_ande_and_atce_reduce_bit_exactly(self):
        base = self._arms("ACDE")
        for effect in ("ANDE", "ATCE"):
            other = self._arms(effect)
            assert other.value == base.value
            np.testing.assert_array_equal(other.per_sample, base.per_sample)
            np.testing.assert_array_equal(other.derivatives, base.derivatives)


class TestValidation:
    def test_ande_needs_roles(self):
        with pytest.raises(PriorError, match="role"):
            rg.CredoPenalty(spec_on(0, PriorFunction.zero(), effect="ANDE"))

    def test_mediators_require_fit(self):
        roles = scm.RoleAssignment(treatment=0, mediators=(1,))
        with pytest.raises(PriorError, match="mediator"):
            rg.CredoPenalty(spec_on(0, PriorFunction.zero(), effect="ATCE"), roles)

    def test_entries_must_target_treatment(self):
        roles = scm.RoleAssignment(treatment=0, mediators=())
        with pytest.raises(PriorError, match="treatment"):
            rg.CredoPenalty(spec_on(1, PriorFunction.zero(), effect="ANDE"), roles)

    def test_kind_mismatch_rejected(self):
        model = linear_model([1.0])
        with pytest.raises(PriorError, match="ACDE"):
            rg.acde_penalty(model, np.zeros((2, 1)), spec_on(0, PriorFunction.zero(), effect="ANDE"))

    def test_out_of_range_entry_rejected_at_build(self):
        model = linear_model([1.0, 1.0])
        with pytest.raises(PriorError, match="out of range"):
            rg.acde_penalty(model, np.zeros((2, 2)), spec_on(7, PriorFunction.zero()))


class TestCombinedObjective:
    def test_value_decomposes(self):
        arch = nw.Architecture(2, (4,), 1)
        model = nw.Perceptron(arch, seed=3)
        rng = np.random.default_rng(11)
        X = rng.normal(size=(7, 2))
        y = rng.normal(size=7)
        spec = spec_on(0, PriorFunction.linear(0.5))
        pen = rg.CredoPenalty(spec)
        lam = 2.5
        combined = rg.combined_objective(model, X, y, pen, lam)
        erm = nw.erm_loss(model, X, y).value(model.params)
        pval = rg.acde_penalty(model, X, spec).value
        assert combined.value(model.params) == pytest.approx(erm + lam * pval, rel=1e-12)

    def test_gradient_matches_fd(self):
        arch = nw.Architecture(2, (3,), 1)
        model = nw.Perceptron(arch, seed=17)
        rng = np.random.default_rng(12)
        X = rng.uniform(0.1, 0.9, size=(5, 2))
        y = rng.normal(size=5)
        pen = rg.CredoPenalty(spec_on(1, PriorFunction.quadratic(0.3)))
        obj = rg.combined_objective(model, X, y, pen, 1.7)
        grad = obj.param_gradient(model.params)
        h = 1e-6
        for j in rng.choice(model.arch.n_params, size=6, replace=False):
            theta = model.params.copy()
            theta[j] += h
            up = obj.value(theta)
            theta[j] -= 2 * h
            dn = obj.value(theta)
            assert grad[j] == pytest.approx((up - dn) / (2 * h), rel=2e-4, abs=1e-7)

    def test_ande_uses_separate_penalty_forward(self):
        rng = np.random.default_rng(14)
        t = rng.normal(size=30)
        fit_X = np.column_stack([t, np.full(30, 2.0)])
        roles = scm.RoleAssignment(treatment=0, mediators=(1,), baseline=0.0)
        med = scm.fit_mediators(fit_X, roles)
        model = nw.Perceptron(nw.Architecture(2, (3,), 1), seed=1)
        X = rng.normal(size=(4, 2))
        y = rng.normal(size=4)
        pen = rg.CredoPenalty(spec_on(0, PriorFunction.zero(), effect="ANDE"), roles, med)
        combined = rg.combined_objective(model, X, y, pen, 3.0)
        erm = nw.erm_loss(model, X, y).value(model.params)
        pval = rg.penalty_report(model, X, pen).value
        assert combined.value(model.params) == pytest.approx(erm + 3.0 * pval, rel=1e-12)


class TestTrainingIntegration:
    def test_zero_prior_suppresses_spurious_slope(self):
        # x0 is a noisy copy of x1; only x1 drives the target
        rng = np.random.default_rng(15)
        x1 = rng.uniform(-1, 1, 300)
        x0 = x1 + rng.normal(0, 0.05, 300)
        X = np.column_stack([x0, x1])
        y = 2.0 * x1
        spec = spec_on(0, PriorFunction.zero())

        def mean_slope(lam):
            model = nw.Perceptron(nw.Architecture(2, (8,), 1), seed=4)
            pen = rg.CredoPenalty(spec) if lam else None
            cfg = nw.TrainingConfig(epochs=60, batch_size=32, learning_rate=1e-2, seed=2, lambda_reg=lam)
            nw.train(model, (X, y), cfg, penalty=pen)
            report = rg.acde_penalty(model, X, spec)
            return np.mean(np.abs(report.derivatives[:, 0]))

        assert mean_slope(10.0) < 0.1 < mean_slope(0.0)

    def test_lambda_zero_matches_plain_erm_bitwise(self):
        rng = np.random.default_rng(16)
        X = rng.normal(size=(40, 2))
        y = rng.normal(size=40)
        pen = rg.CredoPenalty(spec_on(0, PriorFunction.linear(1.0)))
        a = nw.Perceptron(nw.Architecture(2, (4,), 1), seed=6)
        b = nw.Perceptron(nw.Architecture(2, (4,), 1), seed=6)
        cfg = nw.TrainingConfig(epochs=8, batch_size=16, learning_rate=1e-2, seed=3, lambda_reg=0.0)
        nw.train(a, (X, y), cfg, penalty=pen)
        nw.train(b, (X, y), cfg, penalty=None)
        np.testing.assert_array_equal(a.params, b.params)

    def test_penalty_history_tracked(self):
        rng = np.random.default_rng(17)
        X = rng.normal(size=(32, 2))
        y = rng.normal(size=32)
        pen = rg.CredoPenalty(spec_on(0, PriorFunction.linear(5.0)))
        model = nw.Perceptron(nw.Architecture(2, (4,), 1), seed=2)
        cfg = nw.TrainingConfig(epochs=3, batch_size=16, learning_rate=1e-2, seed=1, lambda_reg=2.0)
        result = nw.train(model, (X, y), cfg, penalty=pen)
        assert all(h["penalty"] > 0 for h in result.history)
        assert result.history[0]["objective"] == pytest.approx(
            result.history[0]["erm"] + 2.0 * result.history[0]["penalty"], rel=1e-9
        )
