"""Series construction of vector-valued martingales from cylindrical ones."""

import numpy as np
import pytest

from cylmvm import (
    CylindricalMartingalePaths,
    LevyAtom,
    LevyMeasureSpec,
    MVMSpec,
    TimeGrid,
    radonify,
    radonify_adjoint_check,
    sample_bundle,
    sample_mvm_ensemble,
    second_moment_oracle,
    svd_factor,
)


def demo_spec():
    return MVMSpec.levy_mvm(np.diag([1.0, 0.25]),
                            LevyMeasureSpec((LevyAtom(np.array([1.0, 0.0]), 2.0),)))


def full_set(spec):
    return spec.mark_space().full_set()


class TestSvdFactor:
    def test_diagonal(self):
        lam, hs, gs = svd_factor(np.diag([2.0, 1.0]))
        np.testing.assert_allclose(lam, [2.0, 1.0])
        np.testing.assert_allclose(np.abs(hs), np.eye(2), atol=1e-14)
        np.testing.assert_allclose(hs, gs, atol=1e-14)

    def test_zero(self):
        lam, _, _ = svd_factor(np.zeros((3, 3)))
        np.testing.assert_allclose(lam, 0.0)

    def test_reconstruction(self):
        rng = np.random.default_rng(5)
        S = rng.standard_normal((3, 3))
        lam, hs, gs = svd_factor(S)
        rebuilt = sum(lam[k] * np.outer(gs[k], hs[k]) for k in range(3))
        assert np.linalg.norm(rebuilt - S) / np.linalg.norm(S) < 1e-10
        assert np.all(np.diff(lam) <= 0) and np.all(lam >= 0)
        np.testing.assert_allclose(hs @ hs.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(gs @ gs.T, np.eye(3), atol=1e-12)


class TestRadonify:
    def cyl(self, seed=0, grid=None):
        spec = demo_spec()
        grid = grid or TimeGrid.uniform(1.0, 40)
        bundle = sample_bundle(spec, grid, seed)
        return CylindricalMartingalePaths.from_mvm(
            spec, bundle, (0.0, grid.T), full_set(spec)), bundle

    def test_zero_operator(self):
        cyl, _ = self.cyl()
        X = radonify(cyl, np.zeros((2, 2)))
        assert np.all(X.values == 0.0)

    def test_adjoint_identity_full_rank(self):
        cyl, _ = self.cyl(seed=3)
        rng = np.random.default_rng(0)
        S = rng.standard_normal((3, 2))
        X = radonify(cyl, S)
        for _ in range(25):
            g = rng.standard_normal(3)
            t = cyl.grid.times[rng.integers(0, cyl.grid.n_steps + 1)]
            rhs = abs(float(cyl.evaluate(S.T @ g)[cyl.grid.index_of(t)]))
            assert radonify_adjoint_check(X, cyl, S, g, t) < 1e-9 * (1.0 + rhs)

    def test_geometric_tail_bound(self):
        d = 16
        lam = 2.0 ** -np.arange(1, d + 1)
        S = np.diag(lam)
        grid = TimeGrid.uniform(1.0, 4)
        spec = MVMSpec.wiener_only(np.eye(d))
        bundle = sample_bundle(spec, grid, 0)
        cyl = CylindricalMartingalePaths.from_mvm(spec, bundle, (0.0, 1.0), {0})
        for n in (2, 4):
            X = radonify(cyl, S, n_terms=n, moment_bound=1.0)
            assert X.tail_bound == pytest.approx((4.0 / 3.0) * 4.0 ** -n, rel=1e-6)

    def test_truncation_residual_triangle_bound(self):
        cyl, _ = self.cyl(seed=9)
        rng = np.random.default_rng(2)
        S = rng.standard_normal((2, 2))
        lam, hs, gs = svd_factor(S)
        n = 1
        X = radonify(cyl, S, n_terms=n, moment_bound=1.0)
        for _ in range(10):
            g = rng.standard_normal(2)
            t = 1.0
            resid = radonify_adjoint_check(X, cyl, S, g, t)
            bound = sum(
                lam[k] * abs(float(cyl.evaluate(hs[k])[-1])) * abs(float(gs[k] @ g))
                for k in range(n, len(lam))
            )
            assert resid <= bound + 1e-12

    def test_linearity_in_operator(self):
        cyl, _ = self.cyl(seed=7)
        rng = np.random.default_rng(4)
        S1 = rng.standard_normal((2, 2))
        S2 = rng.standard_normal((2, 2))
        a, b = 1.7, -0.4
        lhs = radonify(cyl, a * S1 + b * S2).values
        rhs = a * radonify(cyl, S1).values + b * radonify(cyl, S2).values
        assert np.max(np.abs(lhs - rhs)) < 1e-9 * (1.0 + np.max(np.abs(rhs)))

    def test_n_terms_validation(self):
        cyl, _ = self.cyl()
        with pytest.raises(ValueError):
            radonify(cyl, np.eye(2), n_terms=5)

    def test_moment_bound_from_oracle(self):
        cyl, _ = self.cyl()
        X = radonify(cyl, np.diag([1.0, 0.5]), n_terms=1)
        # sup_k E|M_T(h_k)|^2 over the singular directions e_1, e_2
        spec = demo_spec()
        m = max(second_moment_oracle(spec, (0.0, 1.0), full_set(spec), e)
                for e in np.eye(2))
        assert X.tail_bound == pytest.approx(4.0 * m * 0.25, rel=1e-9)


class TestRadonifiedMoments:
    def test_second_moment_matches_series_oracle(self):
        spec = demo_spec()
        rng = np.random.default_rng(1)
        S = rng.standard_normal((3, 2))
        lam, hs, gs = svd_factor(S)
        # X_T = sum_k lam_k M_T(h_k) g_k with orthonormal g_k, so
        # E|X_T|^2 = sum_k lam_k^2 E|M_T(h_k)|^2
        A = full_set(spec)
        vals = sample_mvm_ensemble(spec, (0.0, 1.0), A, hs.T, 100_000, 17)
        sim = np.sum((vals * lam) ** 2, axis=1)
        oracle = sum(
            lam[k] ** 2 * second_moment_oracle(spec, (0.0, 1.0), A, hs[k])
            for k in range(len(lam))
        )
        assert abs(np.mean(sim) - oracle) / oracle < 0.05

    def test_martingale_preserved(self):
        spec = demo_spec()
        grid = TimeGrid.uniform(1.0, 20)
        rng = np.random.default_rng(3)
        S = rng.standard_normal((2, 2))
        g = rng.standard_normal(2)
        n = 3000
        inc = np.empty(n)
        past = np.empty(n)
        for p in range(n):
            bundle = sample_bundle(spec, grid, p)
            cyl = CylindricalMartingalePaths.from_mvm(
                spec, bundle, (0.0, 1.0), full_set(spec), check_linearity=False)
            X = radonify(cyl, S)
            v_mid = X.value_at(0.5) @ g
            v_end = X.value_at(1.0) @ g
            inc[p] = v_end - v_mid
            past[p] = np.sign(v_mid)
        prod = inc * past
        z = prod.mean() / (prod.std(ddof=1) / np.sqrt(n))
        assert abs(z) < 4.0

    def test_rejects_nonlinear_evaluator(self):
        grid = TimeGrid.uniform(1.0, 4)
        with pytest.raises(ValueError):
            CylindricalMartingalePaths(
                grid, lambda h: np.concatenate([[0.0], np.full(4, h @ h)]), dim=2)
