"""Stochastic integral: isometry oracles and the pathwise algebraic identities."""

import numpy as np
import pytest

from cylmvm import (
    ALWAYS,
    NEVER,
    LevyAtom,
    LevyMeasureSpec,
    MVMSpec,
    PathPredicate,
    PredictabilityError,
    SimpleIntegrand,
    StepIntegrand,
    StoppingTimeRule,
    TimeGrid,
    combine_integrands,
    fubini_check,
    integrate_ensemble,
    integrate_simple,
    integrate_step,
    isometry_report,
    lambda2_norm_sq,
    localize,
    push_operator,
    restrict_integrand,
    sample_bundle,
    simple_integral_path,
    split_independent,
    stop_integral,
)
from cylmvm.integrals import pathwise_lambda2_process

TOL = 1e-9


def wiener_spec():
    return MVMSpec.wiener_only(np.diag([1.0, 0.25]))


def levy_spec():
    return MVMSpec.levy_mvm(np.diag([1.0, 0.25]),
                            LevyMeasureSpec((LevyAtom(np.array([1.0, 0.0]), 2.0),)))


def cyl_spec():
    return MVMSpec.cylindrical_levy(np.eye(2),
                                    LevyMeasureSpec((LevyAtom(np.array([1.0, 1.0]), 1.0),)))


class TestLambda2Norm:
    def test_zero_integrand(self):
        got = lambda2_norm_sq(StepIntegrand.constant(np.zeros((2, 2))),
                              levy_spec(), TimeGrid.uniform(1.0, 10))
        assert got.value == 0.0 and got.exact

    def test_wiener_trace(self):
        got = lambda2_norm_sq(StepIntegrand.constant(np.eye(2)), wiener_spec(),
                              TimeGrid.uniform(1.0, 10))
        assert got.value == pytest.approx(1.25, rel=1e-12)
        assert got.std_error == 0.0

    def test_levy_sum(self):
        got = lambda2_norm_sq(StepIntegrand.constant(np.eye(2)), levy_spec(),
                              TimeGrid.uniform(1.0, 10))
        assert got.value == pytest.approx(3.25, rel=1e-12)

    def test_simple_with_known_predicate(self):
        Phi = SimpleIntegrand.single(0.25, 0.75, {0}, np.eye(2),
                                     PathPredicate(lambda b: True, prob=0.5))
        got = lambda2_norm_sq(Phi, wiener_spec(), TimeGrid.uniform(1.0, 4))
        assert got.value == pytest.approx(0.5 * 0.5 * 1.25, rel=1e-9)

    def test_pathwise_process_monotone(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 16), 0)
        proc = pathwise_lambda2_process(StepIntegrand.constant(np.eye(2)), bundle)
        assert np.all(np.diff(proc) >= 0)
        assert proc[-1] == pytest.approx(3.25, rel=1e-12)


class TestIntegrateSimple:
    def test_zero_operator(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 1)
        Phi = SimpleIntegrand.single(0.0, 1.0, {0, 1}, np.zeros((2, 2)))
        assert np.all(integrate_simple(Phi, bundle, 1.0) == 0.0)

    def test_wiener_window_reduction(self):
        spec = wiener_spec()
        grid = TimeGrid.uniform(1.0, 20)
        bundle = sample_bundle(spec, grid, 2)
        Phi = SimpleIntegrand.single(0.25, 0.75, {0}, np.eye(2))
        path = simple_integral_path(Phi, bundle)
        cum = bundle.wiener_cum()
        i0, i1 = grid.index_of(0.25), grid.index_of(0.75)
        for j in range(grid.n_steps + 1):
            want = cum[min(j, i1)] - cum[min(max(j, i0), i1)] \
                if False else cum[int(np.clip(j, i0, i1))] - cum[i0]
            np.testing.assert_allclose(path.values[j], want, atol=1e-12)

    def test_never_predicate_zero(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 3)
        Phi = SimpleIntegrand.single(0.0, 1.0, {0, 1}, np.eye(2), NEVER)
        assert np.all(simple_integral_path(Phi, bundle).values == 0.0)

    def test_isometry_small_ensemble(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 10)
        Phi = SimpleIntegrand.single(0.0, 1.0, {0, 1}, np.eye(2))
        n = 4000
        finals = np.array([
            simple_integral_path(Phi, sample_bundle(spec, grid, s)).values[-1]
            for s in range(n)
        ])
        m2 = np.sum(finals ** 2, axis=1)
        se = m2.std(ddof=1) / np.sqrt(n)
        assert abs(m2.mean() - 3.25) < 4.0 * se

    def test_separation_condition_enforced(self):
        from cylmvm.integrals import SimpleTerm

        t1 = SimpleTerm(0.0, 0.6, ALWAYS, ((frozenset({0}), np.eye(2)),))
        t2 = SimpleTerm(0.4, 1.0, ALWAYS, ((frozenset({0}), np.eye(2)),))
        with pytest.raises(ValueError):
            SimpleIntegrand([t1, t2], 2, 2)


class TestIntegrateStep:
    def test_zero(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 4)
        path = integrate_step(StepIntegrand.constant(np.zeros((2, 2))), bundle)
        assert np.all(path.values == 0.0)

    def test_constant_matches_simple(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 25)
        S = np.array([[1.0, 0.5], [0.0, 2.0]])
        simple = SimpleIntegrand.single(0.0, 1.0, {0, 1}, S)
        for seed in range(30):
            bundle = sample_bundle(spec, grid, seed)
            a = simple_integral_path(simple, bundle).values
            b = integrate_step(StepIntegrand.constant(S), bundle).values
            scale = 1.0 + np.max(np.abs(b))
            assert np.max(np.abs(a - b)) < 1e-12 * scale

    def test_time_linear_isometry(self):
        spec = MVMSpec.wiener_only(np.array([[1.0]]))
        grid = TimeGrid.uniform(1.0, 100)
        Phi = StepIntegrand.from_time(lambda t, mark: t * np.eye(1), 1, 1)
        discrete = float(np.sum(grid.times[:-1] ** 2 * grid.dt))
        res = integrate_ensemble(Phi, spec, grid, 20_000, 31)
        m2 = np.sum(res.final ** 2, axis=1)
        se = m2.std(ddof=1) / np.sqrt(len(m2))
        assert abs(m2.mean() - discrete) < 4.0 * se
        assert abs(discrete - 1.0 / 3.0) / (1.0 / 3.0) < 0.02

    def test_predictability_violation_raises(self):
        spec = wiener_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 5)
        peeker = StepIntegrand.general(
            lambda i, b, mark: float(b.wiener_cum()[-1, 0]) * np.eye(2), 2, 2)
        with pytest.raises(PredictabilityError):
            integrate_step(peeker, bundle)

    def test_adapted_general_integrand_ok(self):
        spec = wiener_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 6)
        adapted = StepIntegrand.general(
            lambda i, b, mark: float(b.wiener_cum()[i, 0]) * np.eye(2), 2, 2)
        integrate_step(adapted, bundle)  # must not raise


class TestIsometryReport:
    def test_zero_integrand(self):
        rep = isometry_report(StepIntegrand.constant(np.zeros((2, 2))),
                              wiener_spec(), TimeGrid.uniform(1.0, 10), 100, 0)
        assert rep.oracle == 0.0 and rep.mc_m2 == 0.0 and rep.passed

    def test_wiener_oracle(self):
        rep = isometry_report(StepIntegrand.constant(np.eye(2)), wiener_spec(),
                              TimeGrid.uniform(1.0, 50), 20_000, 1)
        assert rep.oracle == pytest.approx(1.25, rel=1e-12)
        assert rep.passed

    def test_cylindrical_levy_trace_formula(self):
        spec = cyl_spec()
        Phi = np.array([[1.0, 0.5], [0.0, 1.0]])
        from cylmvm import cylindrical_levy_covariance

        QQ = cylindrical_levy_covariance(np.eye(2), spec.levy).entries
        oracle = float(np.trace(Phi @ QQ @ Phi.T))
        rep = isometry_report(StepIntegrand.constant(Phi), spec,
                              TimeGrid.uniform(1.0, 50), 20_000, 2)
        assert rep.oracle == pytest.approx(oracle, rel=1e-12)
        assert rep.passed


class TestPushOperator:
    def test_identity(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 7)
        Phi = StepIntegrand.constant(np.eye(2))
        a = integrate_step(push_operator(np.eye(2), Phi), bundle).values
        b = integrate_step(Phi, bundle).values
        np.testing.assert_array_equal(a, b)

    def test_zero(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 8)
        Phi = StepIntegrand.constant(np.eye(2))
        path = integrate_step(push_operator(np.zeros((3, 2)), Phi), bundle)
        assert np.all(path.values == 0.0)

    def test_pathwise_identity(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 20)
        rng = np.random.default_rng(9)
        R = rng.standard_normal((3, 2))
        Phi = StepIntegrand.constant(rng.standard_normal((2, 2)))
        for seed in range(50):
            bundle = sample_bundle(spec, grid, seed)
            lhs = integrate_step(push_operator(R, Phi), bundle).values
            rhs = integrate_step(Phi, bundle).values @ R.T
            assert np.max(np.abs(lhs - rhs)) < TOL

    def test_simple_integrand_push(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 20)
        rng = np.random.default_rng(10)
        R = rng.standard_normal((2, 2))
        Phi = SimpleIntegrand.single(0.0, 1.0, {0, 1}, rng.standard_normal((2, 2)))
        bundle = sample_bundle(spec, grid, 11)
        lhs = simple_integral_path(push_operator(R, Phi), bundle).values
        rhs = simple_integral_path(Phi, bundle).values @ R.T
        assert np.max(np.abs(lhs - rhs)) < TOL


class TestRestriction:
    def test_never_event(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 12)
        Phi = StepIntegrand.constant(np.eye(2))
        path = integrate_step(restrict_integrand(Phi, 0.2, 0.8, NEVER), bundle,
                              check_predictability=False)
        assert np.all(path.values == 0.0)

    def test_full_window_unchanged(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 13)
        Phi = StepIntegrand.constant(np.eye(2))
        a = integrate_step(restrict_integrand(Phi, 0.0, 1.0, ALWAYS), bundle).values
        b = integrate_step(Phi, bundle).values
        np.testing.assert_array_equal(a, b)

    def test_window_identity(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 20)
        Phi = StepIntegrand.constant(np.array([[1.0, 0.0], [0.3, 0.5]]))
        s0, t0 = 0.25, 0.75
        i0, i1 = grid.index_of(s0), grid.index_of(t0)
        idx = np.arange(grid.n_steps + 1)
        for seed in range(50):
            bundle = sample_bundle(spec, grid, seed)
            lhs = integrate_step(restrict_integrand(Phi, s0, t0), bundle).values
            full = integrate_step(Phi, bundle).values
            rhs = full[np.minimum(idx, i1)] - full[np.minimum(idx, i0)]
            assert np.max(np.abs(lhs - rhs)) < TOL

    def test_predicate_window_identity(self):
        spec = wiener_spec()
        grid = TimeGrid.uniform(1.0, 20)
        Phi = StepIntegrand.constant(np.eye(2))
        s0, t0 = 0.5, 1.0
        F0 = PathPredicate(
            lambda b: float(b.wiener_cum()[b.grid.index_of(0.5), 0]) > 0.0,
            prob=0.5)
        i0, i1 = grid.index_of(s0), grid.index_of(t0)
        idx = np.arange(grid.n_steps + 1)
        hits = 0
        for seed in range(40):
            bundle = sample_bundle(spec, grid, seed)
            lhs = integrate_step(restrict_integrand(Phi, s0, t0, F0), bundle,
                                 check_predictability=False).values
            ind = 1.0 if F0(bundle.restricted(s0)) else 0.0
            hits += ind > 0
            full = integrate_step(Phi, bundle).values
            rhs = ind * (full[np.minimum(idx, i1)] - full[np.minimum(idx, i0)])
            assert np.max(np.abs(lhs - rhs)) < TOL
        assert 0 < hits < 40  # the event is nontrivial


class TestStopping:
    def test_deterministic_horizon(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 14)
        Phi = StepIntegrand.constant(np.eye(2))
        res = stop_integral(Phi, StoppingTimeRule("deterministic", {"time": 1.0}),
                            bundle)
        full = integrate_step(Phi, bundle).values
        np.testing.assert_array_equal(res.path.values, full)
        assert res.residual < TOL

    def test_stop_at_zero(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 15)
        Phi = StepIntegrand.constant(np.eye(2))
        res = stop_integral(Phi, StoppingTimeRule("deterministic", {"time": 0.0}),
                            bundle)
        assert np.all(res.path.values == 0.0)
        assert res.residual < TOL

    def test_jump_exit_identity(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 20)
        Phi = StepIntegrand.constant(np.eye(2))
        rule = StoppingTimeRule("jump-exit", {"min_norm": 0.5})
        stopped_early = 0
        for seed in range(60):
            bundle = sample_bundle(spec, grid, seed)
            res = stop_integral(Phi, rule, bundle)
            assert res.residual < TOL
            if res.sigma < grid.T:
                stopped_early += 1
        assert stopped_early > 0


class TestSplitIndependent:
    def test_no_jump_component(self):
        spec = MVMSpec.levy_mvm(np.diag([1.0, 0.25]), LevyMeasureSpec(()))
        res = split_independent(StepIntegrand.constant(np.eye(2)), spec,
                                TimeGrid.uniform(1.0, 10), 16)
        assert np.all(res.jump_component.values == 0.0)
        assert res.residual < TOL

    def test_wiener_plus_jump_identity(self):
        spec = levy_spec()
        Phi = StepIntegrand.constant(np.eye(2))
        for seed in range(50):
            res = split_independent(Phi, spec, TimeGrid.uniform(1.0, 20), seed)
            assert res.residual < TOL

    def test_norm_additivity(self):
        res = split_independent(StepIntegrand.constant(np.eye(2)), levy_spec(),
                                TimeGrid.uniform(1.0, 10), 17)
        assert res.norm_parts[0] == pytest.approx(1.25, rel=1e-12)
        assert res.norm_parts[1] == pytest.approx(2.0, rel=1e-12)
        assert res.norm_total == pytest.approx(sum(res.norm_parts), rel=1e-12)


class TestFubini:
    def test_single_weight_exact(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 18)
        Phi = StepIntegrand.constant(np.eye(2))
        assert fubini_check([(1.0, Phi)], bundle) == 0.0

    def test_two_weights(self):
        spec = levy_spec()
        Phi1 = StepIntegrand.constant(np.eye(2))
        Phi2 = StepIntegrand.constant(np.array([[0.0, 1.0], [1.0, 0.0]]))
        for seed in range(50):
            bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 20), seed)
            assert fubini_check([(0.3, Phi1), (0.7, Phi2)], bundle) < TOL

    def test_zero_weight_ignored(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 19)
        Phi1 = StepIntegrand.constant(np.eye(2))
        Phi2 = StepIntegrand.constant(100.0 * np.eye(2))
        lhs = integrate_step(combine_integrands([(1.0, Phi1), (0.0, Phi2)], 2, 2),
                             bundle, check_predictability=False).values
        rhs = integrate_step(Phi1, bundle).values
        np.testing.assert_array_equal(lhs, rhs)


class TestLocalize:
    def test_large_threshold_recovers_plain(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 20)
        Phi = StepIntegrand.constant(np.eye(2))
        res = localize(Phi, [100.0], bundle)
        assert res.taus == (1.0,)
        full = integrate_step(Phi, bundle).values
        np.testing.assert_array_equal(res.path.values, full)

    def test_zero_threshold(self):
        spec = levy_spec()
        bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 21)
        Phi = StepIntegrand.constant(np.eye(2))
        res = localize(Phi, [0.0], bundle)
        assert res.taus == (0.0,)
        assert np.all(res.path.values == 0.0)

    def test_blowup_scalar_compatibility(self):
        spec = MVMSpec.wiener_only(np.array([[1.0]]))
        grid = TimeGrid.uniform(1.0, 20)
        Phi = StepIntegrand.scalar_modulated(
            np.eye(1),
            scalar=lambda i, b: float(np.exp(2.0 * b.wiener_cum()[i, 0])),
            scalar_ensemble=lambda i, w: np.exp(2.0 * w[:, 0]))
        early = 0
        for seed in range(40):
            bundle = sample_bundle(spec, grid, seed)
            res = localize(Phi, [1.0, 4.0, 1e6], bundle)
            assert all(r < TOL for r in res.compat_residuals)
            assert np.all(np.diff(res.taus) >= 0)
            if res.taus[0] < grid.T:
                early += 1
        assert early > 0


class TestIntegralInvariants:
    def test_linearity_in_integrand(self):
        spec = levy_spec()
        rng = np.random.default_rng(22)
        S1, S2 = rng.standard_normal((2, 2, 2))
        a, b = 0.7, -1.3
        Phi1 = StepIntegrand.constant(S1)
        Phi2 = StepIntegrand.constant(S2)
        combo = combine_integrands([(a, Phi1), (b, Phi2)], 2, 2)
        for seed in range(30):
            bundle = sample_bundle(spec, TimeGrid.uniform(1.0, 20), seed)
            lhs = integrate_step(combo, bundle, check_predictability=False).values
            rhs = a * integrate_step(Phi1, bundle).values \
                + b * integrate_step(Phi2, bundle).values
            assert np.max(np.abs(lhs - rhs)) < TOL

    def test_martingale_property(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 20)
        mid, end = grid.index_of(0.5), grid.index_of(1.0)
        res = integrate_ensemble(StepIntegrand.constant(np.eye(2)), spec, grid,
                                 30_000, 23, keep_indices=(mid, end))
        inc = res.kept[end][:, 0] - res.kept[mid][:, 0]
        phi = np.sign(res.kept[mid][:, 0])
        prod = inc * phi
        z = prod.mean() / (prod.std(ddof=1) / np.sqrt(len(prod)))
        assert abs(z) < 4.0

    def test_doob_bound(self):
        spec = levy_spec()
        grid = TimeGrid.uniform(1.0, 50)
        res = integrate_ensemble(StepIntegrand.constant(np.eye(2)), spec, grid,
                                 30_000, 24, track_sup=True)
        e_sup = float(np.mean(res.sup_sq))
        e_final = float(np.mean(np.sum(res.final ** 2, axis=1)))
        assert e_sup <= 4.0 * e_final * 1.05

    def test_continuity_under_refinement(self):
        spec = wiener_spec()
        Phi = StepIntegrand.constant(np.eye(2))
        p99 = {}
        for steps in (25, 100):
            grid = TimeGrid.uniform(1.0, steps)
            res = integrate_ensemble(Phi, spec, grid, 20_000, 25,
                                     track_max_jump=True)
            p99[steps] = float(np.percentile(res.max_jump, 99))
        assert p99[100] < 0.75 * p99[25]
