"""Shared Monte Carlo verification machinery.

Ensembles are plain arrays of per-path scalars (or vectors); estimators
return TestReport records with estimate, standard error, z-score against an
oracle, and a pass flag. The z threshold defaults to 4 because many tests
run per suite and a loose per-test threshold controls family-wise false
alarms without a formal multiplicity correction.

Reductions use numpy sums, which accumulate pairwise, so rounding error is
bounded independently of the ensemble size and results are reproducible
bit for bit for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Ensemble",
    "TestReport",
    "Z_THRESHOLD",
    "estimate_mean",
    "estimate_second_moment",
    "mean_zscores",
    "martingale_test_arrays",
    "martingale_test",
    "orthogonality_test",
    "calibration_pass_rate",
]

Z_THRESHOLD = 4.0


@dataclass(frozen=True)
class Ensemble:
    """Per-path scalars (n,) or vectors (n, k) plus the seed that made them."""

    values: np.ndarray
    seed_base: Optional[int] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] < 2:
            raise ValueError("ensembles need at least two paths")
        if not np.all(np.isfinite(v)):
            raise ValueError("ensemble contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class TestReport:
    name: str
    estimate: float
    std_error: float
    z_score: float
    oracle: Optional[float]
    rel_err: Optional[float]
    passed: bool
    n_paths: int
    seed_base: Optional[int]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "estimate": self.estimate,
            "se": self.std_error,
            "z": self.z_score,
            "oracle": self.oracle,
            "rel_err": self.rel_err,
            "pass": bool(self.passed),
            "n_paths": self.n_paths,
            "seed_base": self.seed_base,
        }


def _mean_se(x: np.ndarray):
    n = x.shape[0]
    mean = float(np.sum(x) / n)
    var = float(np.sum((x - mean) ** 2) / (n - 1))
    return mean, float(np.sqrt(var / n))


def estimate_mean(e: Ensemble, oracle: float = 0.0, name: str = "mean",
                  z_max: float = Z_THRESHOLD) -> TestReport:
    """Sample mean with its z-score against the oracle value."""
    x = e.values
    if x.ndim != 1:
        raise ValueError("estimate_mean expects a scalar ensemble")
    mean, se = _mean_se(x)
    z = (mean - oracle) / se if se > 0 else (0.0 if mean == oracle else np.inf)
    return TestReport(name, mean, se, float(z), oracle, None,
                      bool(abs(z) < z_max), e.n_paths, e.seed_base)


def mean_zscores(values: np.ndarray) -> np.ndarray:
    """Per-coordinate z-scores of the mean of an (n, k) ensemble against 0."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[0] == 1:
        v = v.T
    n = v.shape[0]
    mean = np.sum(v, axis=0) / n
    sd = np.sqrt(np.sum((v - mean) ** 2, axis=0) / (n - 1))
    se = sd / np.sqrt(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean / se, np.where(mean == 0, 0.0, np.inf))
    return z


def estimate_second_moment(e: Ensemble, oracle: Optional[float] = None,
                           name: str = "second-moment",
                           rel_tol: float = 0.05) -> TestReport:
    """Mean squared norm of the ensemble against a closed-form oracle.

    Pass criterion: relative error below rel_tol when the oracle is
    positive, otherwise agreement within 4 standard errors.
    """
    x = e.values
    sq = x * x if x.ndim == 1 else np.sum(x * x, axis=1)
    m2, se = _mean_se(sq)
    rel = None
    if oracle is not None and oracle > 0:
        rel = abs(m2 - oracle) / oracle
        passed = rel < rel_tol
        z = (m2 - oracle) / se if se > 0 else 0.0
    elif oracle is not None:
        z = (m2 - oracle) / se if se > 0 else (0.0 if m2 == oracle else np.inf)
        passed = abs(z) < Z_THRESHOLD
    else:
        z = 0.0
        passed = True
    return TestReport(name, m2, se, float(z), oracle, rel, bool(passed),
                      e.n_paths, e.seed_base)


def martingale_test_arrays(increments: np.ndarray, phi_values: np.ndarray,
                           name: str = "martingale", seed_base=None,
                           z_max: float = Z_THRESHOLD) -> TestReport:
    """z-test of E[(value_t - value_s) * phi(past)] = 0 on precomputed arrays."""
    inc = np.asarray(increments, dtype=float)
    phi = np.asarray(phi_values, dtype=float)
    if inc.shape != phi.shape:
        raise ValueError("increments and functional values must align")
    return estimate_mean(Ensemble(inc * phi, seed_base), 0.0, name, z_max)


def martingale_test(paths: Sequence, s: float, t: float,
                    functional: Callable, name: str = "martingale",
                    seed_base=None) -> TestReport:
    """Martingale z-test on path-like objects (anything with value_at / truncated).

    The functional only ever sees the path truncated at s, so it cannot
    consume future data.
    """
    inc, phi = [], []
    for p in paths:
        inc.append(p.value_at(t) - p.value_at(s))
        phi.append(float(functional(p.truncated(s))))
    inc_arr = np.asarray(inc, dtype=float)
    if inc_arr.ndim > 1:  # vector paths: test each coordinate against phi
        phi_arr = np.asarray(phi)[:, None]
        z = mean_zscores(inc_arr * phi_arr)
        worst = float(np.max(np.abs(z)))
        return TestReport(name, float(np.mean(inc_arr * phi_arr)), 0.0, worst,
                          0.0, None, bool(worst < Z_THRESHOLD), len(paths), seed_base)
    return martingale_test_arrays(inc_arr, np.asarray(phi), name, seed_base)


def orthogonality_test(spec, A, B, t: float, s: float, h1, h2,
                       n_paths: int, seed: int,
                       name: str = "orthogonality",
                       expect_nonzero: bool = False) -> TestReport:
    """z-test of E[M(t,A)(h1) M(s,B)(h2)] = 0 for disjoint mark sets A, B.

    The two functionals are evaluated on shared draws (same paths), as the
    orthogonality statement requires. With expect_nonzero=True the report
    passes only if the product mean is significantly nonzero (negative
    control calibration).
    """
    from .noise import sample_mvm_ensemble

    A, B = frozenset(A), frozenset(B)
    if not expect_nonzero and (A & B):
        raise ValueError("mark sets must be disjoint")
    if not B or not A:
        return TestReport(name, 0.0, 0.0, 0.0, 0.0, None, True, n_paths, seed)
    hi, lo = (t, s) if t >= s else (s, t)
    H = np.column_stack([np.asarray(h1, dtype=float), np.asarray(h2, dtype=float)])
    # sample the shared (0, lo] segment and the disjoint remainder segments
    seg1 = sample_mvm_ensemble(spec, (0.0, lo), A, H, n_paths, seed)
    seg1b = sample_mvm_ensemble(spec, (0.0, lo), B, H, n_paths, seed + 1) if A != B else seg1
    rest_a = sample_mvm_ensemble(spec, (lo, t), A, H, n_paths, seed + 2) if t > lo else 0.0
    rest_b = sample_mvm_ensemble(spec, (lo, s), B, H, n_paths, seed + 3) if s > lo else 0.0
    va = seg1[:, 0] + (rest_a[:, 0] if np.ndim(rest_a) else 0.0)
    vb = seg1b[:, 1] + (rest_b[:, 1] if np.ndim(rest_b) else 0.0)
    rep = estimate_mean(Ensemble(va * vb, seed), 0.0, name)
    if expect_nonzero:
        return TestReport(name, rep.estimate, rep.std_error, rep.z_score, 0.0,
                          None, bool(abs(rep.z_score) >= Z_THRESHOLD), n_paths, seed)
    return rep


def calibration_pass_rate(run_one: Callable[[int], bool], n_reps: int,
                          seed: int) -> float:
    """Fraction of repetitions (independent seeds) whose test passes."""
    passes = 0
    for rep in range(n_reps):
        if run_one(seed + 1000 * rep):
            passes += 1
    return passes / n_reps
