"""Estimators, martingale/orthogonality tests, and their calibration."""

import numpy as np
import pytest

from cylmvm import (
    Ensemble,
    LevyAtom,
    LevyMeasureSpec,
    MVMSpec,
    calibration_pass_rate,
    estimate_mean,
    estimate_second_moment,
    martingale_test,
    martingale_test_arrays,
    orthogonality_test,
    sample_mvm_ensemble,
)
from cylmvm.integrals import IntegralPath
from cylmvm.noise import TimeGrid


def demo_spec():
    return MVMSpec.levy_mvm(np.diag([1.0, 0.25]),
                            LevyMeasureSpec((LevyAtom(np.array([1.0, 0.0]), 2.0),)))


class TestEstimateMean:
    def test_constant_ensemble(self):
        rep = estimate_mean(Ensemble(np.full(10, 3.0)), 3.0)
        assert rep.estimate == 3.0 and rep.std_error == 0.0 and rep.passed

    def test_alternating(self):
        rep = estimate_mean(Ensemble(np.tile([1.0, -1.0], 50)), 0.0)
        assert rep.estimate == 0.0 and rep.passed

    def test_gaussian_calibrated(self):
        rng = np.random.default_rng(0)
        rep = estimate_mean(Ensemble(rng.standard_normal(100_000)), 0.0)
        assert abs(rep.z_score) < 4.0 and rep.passed

    def test_needs_two_paths(self):
        with pytest.raises(ValueError):
            Ensemble(np.array([1.0]))


class TestEstimateSecondMoment:
    def test_zero_oracle(self):
        rep = estimate_second_moment(Ensemble(np.zeros(10)), 0.0)
        assert rep.passed

    def test_unit_normals(self):
        rng = np.random.default_rng(1)
        rep = estimate_second_moment(Ensemble(rng.standard_normal(100_000)), 1.0)
        assert rep.rel_err < 0.05 and rep.passed

    def test_scaling(self):
        rng = np.random.default_rng(2)
        rep = estimate_second_moment(Ensemble(2.0 * rng.standard_normal(100_000)), 4.0)
        assert rep.estimate == pytest.approx(4.0, rel=0.05) and rep.passed

    def test_vector_ensembles_use_norm(self):
        vals = np.tile([[1.0, 1.0]], (10, 1))
        rep = estimate_second_moment(Ensemble(vals), 2.0)
        assert rep.estimate == pytest.approx(2.0) and rep.passed


class TestMartingaleTest:
    def test_deterministic_path_zero(self):
        rep = martingale_test_arrays(np.zeros(100), np.ones(100))
        assert rep.estimate == 0.0 and rep.passed

    def test_wiener_null(self):
        rng = np.random.default_rng(3)
        past = rng.standard_normal(50_000)
        inc = rng.standard_normal(50_000)
        rep = martingale_test_arrays(inc, past)
        assert rep.passed

    def test_positive_control_fails(self):
        rng = np.random.default_rng(4)
        inc = rng.standard_normal(50_000)
        rep = martingale_test_arrays(inc, inc, "non-adapted")
        assert not rep.passed and rep.z_score > 50

    def test_pathlike_interface_truncates(self):
        grid = TimeGrid.uniform(1.0, 4)
        rng = np.random.default_rng(5)
        paths = []
        for _ in range(64):
            vals = np.concatenate([[0.0], np.cumsum(rng.standard_normal(4))])
            paths.append(IntegralPath(grid, vals[:, None]))
        seen = []

        def functional(p):
            seen.append(p)
            return float(p.value_at(1.0)[0])  # reads the frozen (past) value

        rep = martingale_test(paths, 0.5, 1.0, functional)
        # truncation freezes values after s, so phi equals the value at s
        for p, orig in zip(seen, paths):
            assert np.array_equal(p.value_at(1.0), orig.value_at(0.5))
        assert rep.n_paths == 64


class TestOrthogonality:
    def test_empty_set_exact(self):
        spec = demo_spec()
        rep = orthogonality_test(spec, {0}, set(), 1.0, 1.0,
                                 np.ones(2), np.ones(2), 100, 0)
        assert rep.estimate == 0.0 and rep.passed

    def test_wiener_vs_jump_null(self):
        spec = demo_spec()
        rep = orthogonality_test(spec, {0}, {1}, 1.0, 0.5,
                                 np.ones(2), np.ones(2), 50_000, 1)
        assert rep.passed

    def test_same_set_negative_control(self):
        spec = demo_spec()
        rep = orthogonality_test(spec, {1}, {1}, 1.0, 1.0,
                                 np.array([1.0, 0.0]), np.array([1.0, 0.0]),
                                 50_000, 2, expect_nonzero=True)
        assert rep.passed  # pass here means: significantly nonzero

    def test_disjointness_enforced(self):
        spec = demo_spec()
        with pytest.raises(ValueError):
            orthogonality_test(spec, {0, 1}, {1}, 1.0, 1.0,
                               np.ones(2), np.ones(2), 100, 3)


class TestCalibrationAndDeterminism:
    def test_reports_bit_identical(self):
        spec = demo_spec()
        h = np.ones(2)
        A = spec.mark_space().full_set()
        reps = []
        for _ in range(2):
            vals = sample_mvm_ensemble(spec, (0.0, 1.0), A, h[:, None], 5000, 42)[:, 0]
            reps.append(estimate_second_moment(Ensemble(vals, 42), 3.25))
        assert reps[0] == reps[1]
        assert reps[0].to_dict() == reps[1].to_dict()

    def test_null_pass_rate(self):
        spec = demo_spec()
        h = np.ones(2)
        A = spec.mark_space().full_set()

        def one(seed):
            past = sample_mvm_ensemble(spec, (0.0, 0.5), A, h[:, None], 2000, seed)[:, 0]
            inc = sample_mvm_ensemble(spec, (0.5, 1.0), A, h[:, None], 2000, seed + 1)[:, 0]
            return martingale_test_arrays(inc, past).passed

        rate = calibration_pass_rate(one, 50, 7)
        assert rate >= 0.95
