"""Noise samplers against their closed-form moment oracles."""

import numpy as np
import pytest

from cylmvm import (
    GaussianSurrogate,
    ImpulsiveSpec,
    LevyAtom,
    LevyMeasureSpec,
    MVMSpec,
    PSDOperator,
    TimeGrid,
    compensated_poisson_integral,
    cylindrical_levy_covariance,
    mvm_apply,
    sample_bundle,
    sample_impulsive,
    sample_jumps,
    sample_mvm_ensemble,
    sample_wiener,
    second_moment_oracle,
)


def demo_nu():
    return LevyMeasureSpec((LevyAtom(np.array([1.0, 0.0]), 2.0),))


def demo_spec():
    return MVMSpec.levy_mvm(np.diag([1.0, 0.25]), demo_nu())


class TestSampleWiener:
    def test_zero_covariance(self):
        grid = TimeGrid.uniform(1.0, 10)
        inc = sample_wiener(np.zeros((2, 2)), grid, 0)
        assert np.all(inc == 0.0)

    def test_unit_variance(self):
        n = 100_000
        grid = TimeGrid(np.arange(n + 1, dtype=float))
        inc = sample_wiener(np.array([[1.0]]), grid, 1)[:, 0]
        tol = 3.0 * np.sqrt(2.0 / n)
        assert abs(np.var(inc) - 1.0) < tol

    def test_coordinates_uncorrelated(self):
        n = 100_000
        grid = TimeGrid(np.arange(n + 1, dtype=float))
        inc = sample_wiener(np.diag([1.0, 0.25]), grid, 2)
        cross = np.mean(inc[:, 0] * inc[:, 1])
        assert abs(cross) < 3.0 / np.sqrt(n)

    def test_scales_with_dt(self):
        grid = TimeGrid.uniform(1.0, 50_000)
        inc = sample_wiener(np.array([[1.0]]), grid, 3)[:, 0]
        assert abs(np.var(inc) / grid.dt[0] - 1.0) < 3.0 * np.sqrt(2.0 / 50_000)


class TestSampleJumps:
    def test_empty_measure(self):
        jl = sample_jumps(LevyMeasureSpec(()), 1.0, 0)
        assert len(jl) == 0

    def test_poisson_mean(self):
        n = 100_000
        rate, T = 2.0, 1.0
        nu = LevyMeasureSpec((LevyAtom(np.array([1.0]), rate),))
        counts = np.array([len(sample_jumps(nu, T, s)) for s in range(n)])
        tol = 3.0 * np.sqrt(rate * T / n)
        assert abs(counts.mean() - rate * T) < tol

    def test_atoms_independent(self):
        n = 30_000
        nu = LevyMeasureSpec((
            LevyAtom(np.array([1.0]), 1.0),
            LevyAtom(np.array([-1.0]), 3.0),
        ))
        c = np.zeros((n, 2))
        for s in range(n):
            jl = sample_jumps(nu, 1.0, s)
            c[s, 0] = np.sum(jl.atom_indices == 0)
            c[s, 1] = np.sum(jl.atom_indices == 1)
        cov = np.mean((c[:, 0] - c[:, 0].mean()) * (c[:, 1] - c[:, 1].mean()))
        se = np.sqrt(1.0 * 3.0 / n)
        assert abs(cov) < 4.0 * se

    def test_times_sorted_in_range(self):
        nu = LevyMeasureSpec((LevyAtom(np.array([1.0]), 50.0),))
        jl = sample_jumps(nu, 2.0, 11)
        assert np.all(np.diff(jl.times) >= 0)
        assert jl.times[0] > 0 and jl.times[-1] <= 2.0


class TestCompensatedPoissonIntegral:
    def test_compensator_only(self):
        nu = LevyMeasureSpec((LevyAtom(np.array([2.0, 1.0]), 1.5),))
        empty = sample_jumps(LevyMeasureSpec(()), 1.0, 0)
        from cylmvm.noise import JumpList
        no_jumps = JumpList(np.empty(0), np.empty(0, dtype=int), 1.0)
        val = compensated_poisson_integral(lambda v: v, {0}, no_jumps, nu, 0.7)
        np.testing.assert_allclose(val, -0.7 * 1.5 * np.array([2.0, 1.0]), rtol=1e-15)

    def test_empty_mark_set(self):
        nu = demo_nu()
        jl = sample_jumps(nu, 1.0, 5)
        val = compensated_poisson_integral(lambda v: v, set(), jl, nu, 1.0)
        assert np.all(np.asarray(val) == 0.0)

    def test_moments(self):
        n = 20_000
        nu = demo_nu()
        h = np.array([1.0, 1.0])
        t = 1.0
        vals = np.empty(n)
        for s in range(n):
            jl = sample_jumps(nu, t, s)
            vals[s] = float(compensated_poisson_integral(lambda v: v @ h, {0}, jl, nu, t))
        se = vals.std(ddof=1) / np.sqrt(n)
        assert abs(vals.mean()) < 4.0 * se
        oracle = t * 2.0 * (np.array([1.0, 0.0]) @ h) ** 2
        assert abs(np.mean(vals ** 2) - oracle) / oracle < 0.05


class TestMVMApply:
    def test_wiener_reduction(self):
        spec = demo_spec()
        grid = TimeGrid.uniform(1.0, 20)
        b = sample_bundle(spec, grid, 4)
        h = np.array([0.3, -1.1])
        got = mvm_apply(spec, b, (0.0, 0.5), {0}, h)
        cum = b.wiener_cum()
        want = float((cum[grid.index_of(0.5)] - cum[0]) @ h)
        assert got == pytest.approx(want, rel=1e-12)

    def test_finite_additivity(self):
        spec = demo_spec()
        grid = TimeGrid.uniform(1.0, 20)
        h = np.array([1.0, 2.0])
        for seed in range(20):
            b = sample_bundle(spec, grid, seed)
            whole = mvm_apply(spec, b, (0.0, 1.0), {0, 1}, h)
            parts = mvm_apply(spec, b, (0.0, 1.0), {0}, h) + \
                mvm_apply(spec, b, (0.0, 1.0), {1}, h)
            assert whole == pytest.approx(parts, abs=1e-12)

    def test_second_moment_vs_oracle(self):
        spec = demo_spec()
        grid = TimeGrid.uniform(1.0, 10)
        h = np.array([1.0, 1.0])
        A = {0, 1}
        n = 20_000
        vals = np.array([
            mvm_apply(spec, sample_bundle(spec, grid, s), (0.0, 1.0), A, h)
            for s in range(n)
        ])
        oracle = second_moment_oracle(spec, (0.0, 1.0), A, h)
        assert abs(np.mean(vals ** 2) - oracle) / oracle < 0.05

    def test_pathwise_matches_ensemble_distribution(self):
        # counts-based ensemble sampling agrees with exact-times sampling
        spec = demo_spec()
        grid = TimeGrid.uniform(1.0, 10)
        h = np.array([1.0, 1.0])
        A = {0, 1}
        exact = np.array([
            mvm_apply(spec, sample_bundle(spec, grid, s), (0.0, 1.0), A, h)
            for s in range(4000)
        ])
        fast = sample_mvm_ensemble(spec, (0.0, 1.0), A, h[:, None], 100_000, 9)[:, 0]
        oracle = second_moment_oracle(spec, (0.0, 1.0), A, h)
        for vals in (exact, fast):
            m2 = np.mean(vals ** 2)
            se = np.std(vals ** 2, ddof=1) / np.sqrt(len(vals))
            assert abs(m2 - oracle) < 4.0 * se

    def test_off_grid_interval_rejected(self):
        spec = demo_spec()
        b = sample_bundle(spec, TimeGrid.uniform(1.0, 10), 0)
        with pytest.raises(ValueError):
            mvm_apply(spec, b, (0.0, 0.123), {0}, np.array([1.0, 0.0]))


class TestSecondMomentOracle:
    def test_levy_example(self):
        got = second_moment_oracle(demo_spec(), (0.0, 1.0), {0, 1}, np.array([1.0, 1.0]))
        assert got == pytest.approx(1.25 + 2.0, rel=1e-9)

    def test_zero_vector(self):
        assert second_moment_oracle(demo_spec(), (0.0, 1.0), {0, 1},
                                    np.zeros(2)) == pytest.approx(0.0, abs=1e-15)

    def test_wiener_only_reduction(self):
        h = np.array([1.0, 1.0])
        got = second_moment_oracle(demo_spec(), (0.25, 0.75), {0}, h)
        assert got == pytest.approx(0.5 * 1.25, rel=1e-9)


class TestCylindricalLevyCovariance:
    def test_empty_measure(self):
        Q = np.diag([1.0, 2.0])
        got = cylindrical_levy_covariance(Q, LevyMeasureSpec(()))
        np.testing.assert_allclose(got.entries, Q)

    def test_rank_one_update(self):
        got = cylindrical_levy_covariance(
            np.eye(2), LevyMeasureSpec((LevyAtom(np.array([1.0, 1.0]), 1.0),)))
        np.testing.assert_allclose(got.entries, [[2.0, 1.0], [1.0, 2.0]])

    def test_always_psd(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            A = rng.standard_normal((3, 3))
            atoms = tuple(LevyAtom(rng.standard_normal(3), float(r))
                          for r in rng.uniform(0.1, 2.0, 3))
            Q = cylindrical_levy_covariance(A @ A.T, LevyMeasureSpec(atoms))
            assert np.linalg.eigvalsh(Q.entries).min() > -1e-10


class TestImpulsive:
    def spec(self):
        return ImpulsiveSpec(np.array([0.5, 1.0, 1.5]), ((1.0, 1.0), (-1.0, 2.0)))

    def test_empty_amplitudes_zero_path(self):
        imp = ImpulsiveSpec(np.array([1.0, 1.0]), ())
        grid = TimeGrid.uniform(1.0, 10)
        path = sample_impulsive(imp, grid, 0)
        assert np.all(path.path(np.array([1.0, -2.0])) == 0.0)

    def test_mean_zero(self):
        imp = self.spec()
        spec = MVMSpec.impulsive_mvm(imp)
        A = spec.mark_space().full_set()
        vals = sample_mvm_ensemble(spec, (0.0, 1.0), A, np.array([[1.0]]), 100_000, 3)[:, 0]
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean()) < 4.0 * se

    def test_second_moment_product_formula(self):
        imp = self.spec()
        grid = TimeGrid.uniform(1.0, 10)
        f = np.array([1.0, 0.5, -1.0])
        n = 4000
        vals = np.array([
            sample_impulsive(imp, grid, s).evaluate(f, 1.0) for s in range(n)
        ])
        oracle = 1.0 * float(imp.zeta @ f ** 2) * imp.amplitude_second_moment()
        m2 = np.mean(vals ** 2)
        se = np.std(vals ** 2, ddof=1) / np.sqrt(n)
        assert abs(m2 - oracle) < 4.0 * se

    def test_linearity_in_f(self):
        imp = self.spec()
        grid = TimeGrid.uniform(1.0, 10)
        path = sample_impulsive(imp, grid, 8)
        f1 = np.array([1.0, 0.0, 2.0])
        f2 = np.array([0.0, -1.0, 1.0])
        lhs = path.path(2.0 * f1 - 3.0 * f2)
        rhs = 2.0 * path.path(f1) - 3.0 * path.path(f2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_oracle_matches_product_form(self):
        imp = self.spec()
        spec = MVMSpec.impulsive_mvm(imp)
        A = spec.mark_space().full_set()
        got = second_moment_oracle(spec, (0.0, 1.0), A, np.array([1.0]))
        want = float(imp.zeta.sum()) * imp.amplitude_second_moment()
        assert got == pytest.approx(want, rel=1e-9)


class TestReproducibilityAndSurrogate:
    def test_bundle_bit_identical(self):
        spec = demo_spec()
        grid = TimeGrid.uniform(1.0, 50)
        a = sample_bundle(spec, grid, 1234)
        b = sample_bundle(spec, grid, 1234)
        np.testing.assert_array_equal(a.wiener_increments, b.wiener_increments)
        np.testing.assert_array_equal(a.jumps.times, b.jumps.times)
        np.testing.assert_array_equal(a.jumps.atom_indices, b.jumps.atom_indices)
        c = sample_bundle(spec, grid, 1235)
        assert not np.array_equal(a.wiener_increments, c.wiener_increments)

    def test_truncation_reports_tail(self):
        atoms = (LevyAtom(np.array([0.05, 0.0]), 10.0), LevyAtom(np.array([1.0, 0.0]), 1.0))
        nu = LevyMeasureSpec(atoms)
        kept, tail = nu.truncate(0.1)
        assert len(kept.atoms) == 1
        np.testing.assert_allclose(tail, 10.0 * np.outer([0.05, 0.0], [0.05, 0.0]))

    def test_surrogate_enters_oracle_and_sampling(self):
        C = PSDOperator.from_matrix(0.1 * np.eye(2))
        nu = LevyMeasureSpec((), small_jump=GaussianSurrogate(C, 0.1))
        spec = MVMSpec.levy_mvm(np.diag([1.0, 0.25]), nu)
        h = np.array([1.0, 1.0])
        oracle = second_moment_oracle(spec, (0.0, 1.0), {0}, h)
        assert oracle == pytest.approx(1.25 + 0.2, rel=1e-9)
        vals = sample_mvm_ensemble(spec, (0.0, 1.0), {0}, h[:, None], 100_000, 5)[:, 0]
        assert abs(np.mean(vals ** 2) - oracle) / oracle < 0.05


class TestTimeGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.5, 1.0]))
        with pytest.raises(ValueError):
            TimeGrid.uniform(-1.0, 10)

    def test_index_of(self):
        grid = TimeGrid.uniform(1.0, 4)
        assert grid.index_of(0.5) == 2
        with pytest.raises(ValueError):
            grid.index_of(0.3)

    def test_coarsen_refine_roundtrip(self):
        grid = TimeGrid.uniform(1.0, 8)
        spec = demo_spec()
        b = sample_bundle(spec, grid, 2)
        coarse = b.coarsen(2)
        assert coarse.grid.n_steps == 4
        np.testing.assert_allclose(
            coarse.wiener_increments,
            b.wiener_increments.reshape(4, 2, -1).sum(axis=1))
