"""Named builders for covariance families, noise specs, integrands, and
SPDE coefficient sets.

Experiment configs refer to these by registered name plus a parameter
dict; custom entries can be registered at runtime (the CLI does this for
families declared inline in a config).
"""

from __future__ import annotations

import math
from typing import Callable, Dict

import numpy as np

from .noise import ImpulsiveSpec, LevyAtom, LevyMeasureSpec, MVMSpec
from .spaces import CovarianceFamily, MeasureSpec, PSDOperator, TruncatedSpace
from .integrals import StepIntegrand
from .spde import SemigroupSpec, SPDEProblem

__all__ = ["register", "build", "list_registry", "registered_names"]

_REGISTRY: Dict[str, Dict[str, Callable]] = {
    "family": {},
    "spec": {},
    "integrand": {},
    "coeff": {},
}


def register(category: str, name: str, builder: Callable) -> None:
    if category not in _REGISTRY:
        raise KeyError(f"unknown registry category {category!r}")
    _REGISTRY[category][name] = builder


def build(category: str, name: str, params: dict | None = None):
    try:
        builder = _REGISTRY[category][name]
    except KeyError:
        raise KeyError(f"no {category!r} named {name!r} in the registry") from None
    return builder(**(params or {}))


def registered_names(category: str):
    return sorted(_REGISTRY[category])


def list_registry():
    """Stable sorted listing of every registered entry as category/name."""
    out = []
    for cat in sorted(_REGISTRY):
        out.extend(f"{cat}/{name}" for name in sorted(_REGISTRY[cat]))
    return out


# ---------------------------------------------------------------------------
# covariance families


def _family_const(Q: np.ndarray) -> CovarianceFamily:
    space = TruncatedSpace(Q.shape[0], "H")
    op = PSDOperator(space, Q)
    return CovarianceFamily(
        evaluator=lambda r, u: op,
        time_measure=MeasureSpec.lebesgue(0.0, 1.0),
        mark_measure=MeasureSpec.atomic(((0, 1.0),)),
        dim=Q.shape[0],
    )


def _family_identity(dim: int = 2) -> CovarianceFamily:
    return _family_const(np.eye(dim))


def _family_diag(diag=(1.0, 0.25)) -> CovarianceFamily:
    return _family_const(np.diag(np.asarray(diag, dtype=float)))


def _family_time_scaled_diag(diag=(1.0, 1.0), rate: float = 1.0) -> CovarianceFamily:
    base = np.diag(np.asarray(diag, dtype=float))
    space = TruncatedSpace(base.shape[0], "H")
    return CovarianceFamily(
        evaluator=lambda r, u: PSDOperator(space, (1.0 + rate * r) * base),
        time_measure=MeasureSpec.lebesgue(0.0, 1.0),
        mark_measure=MeasureSpec.atomic(((0, 1.0),)),
        dim=base.shape[0],
    )


register("family", "identity", _family_identity)
register("family", "diag", _family_diag)
register("family", "time-scaled-diag", _family_time_scaled_diag)


# ---------------------------------------------------------------------------
# noise specs


def _spec_wiener_unit_1d() -> MVMSpec:
    return MVMSpec.wiener_only(np.array([[1.0]]))


def _spec_wiener_diag(diag=(1.0, 0.25)) -> MVMSpec:
    return MVMSpec.wiener_only(np.diag(np.asarray(diag, dtype=float)))


def _atoms_from(params) -> LevyMeasureSpec:
    atoms = tuple(
        LevyAtom(np.asarray(a["vector"], dtype=float), float(a["rate"]))
        for a in params
    )
    return LevyMeasureSpec(atoms)


def _spec_levy_mvm_demo(diag=(1.0, 0.25), atoms=None) -> MVMSpec:
    atoms = atoms if atoms is not None else [{"vector": [1.0, 0.0], "rate": 2.0}]
    return MVMSpec.levy_mvm(np.diag(np.asarray(diag, dtype=float)), _atoms_from(atoms))


def _spec_cyl_levy_demo(dim: int = 2, atoms=None) -> MVMSpec:
    atoms = atoms if atoms is not None else [{"vector": [1.0, 1.0], "rate": 1.0}]
    return MVMSpec.cylindrical_levy(np.eye(dim), _atoms_from(atoms))


def _spec_impulsive_demo(zeta=(0.5, 1.0, 1.5), amplitudes=None) -> MVMSpec:
    amplitudes = amplitudes if amplitudes is not None else [[1.0, 1.0], [-1.0, 2.0]]
    imp = ImpulsiveSpec(np.asarray(zeta, dtype=float),
                        tuple((float(b), float(r)) for b, r in amplitudes))
    return MVMSpec.impulsive_mvm(imp)


register("spec", "wiener-unit-1d", _spec_wiener_unit_1d)
register("spec", "wiener-diag", _spec_wiener_diag)
register("spec", "levy-mvm-demo", _spec_levy_mvm_demo)
register("spec", "cyl-levy-demo", _spec_cyl_levy_demo)
register("spec", "impulsive-demo", _spec_impulsive_demo)


# ---------------------------------------------------------------------------
# integrands


def _integrand_constant_identity(dim: int = 2) -> StepIntegrand:
    return StepIntegrand.constant(np.eye(dim), name="constant-identity")


def _integrand_constant(matrix) -> StepIntegrand:
    return StepIntegrand.constant(np.asarray(matrix, dtype=float), name="constant")


def _integrand_time_linear(dim: int = 1) -> StepIntegrand:
    eye = np.eye(dim)
    return StepIntegrand.from_time(lambda t, mark: t * eye, dim, dim,
                                   name="time-linear")


def _integrand_wiener_sine(matrix=((1.0,),), coord: int = 0,
                           driver_var: float | None = None) -> StepIntegrand:
    """sin(<W_t, e_coord>) times a fixed matrix; predictable by construction.

    With driver_var = Var of the watched Wiener coordinate per unit time,
    the squared scalar has the closed mean (1 - exp(-2 var t)) / 2, giving
    an exact norm oracle.
    """
    S = np.asarray(matrix, dtype=float)

    def scalar(i, bundle):
        return math.sin(bundle.wiener_cum()[i, coord])

    def scalar_ensemble(i, w_cum):
        return np.sin(w_cum[:, coord])

    scalar_m2 = None
    if driver_var is not None:
        def scalar_m2(i, grid, _v=float(driver_var)):
            t = grid.times[i]
            return 0.5 * (1.0 - math.exp(-2.0 * _v * t))

    return StepIntegrand.scalar_modulated(S, scalar, scalar_ensemble, scalar_m2,
                                          name="wiener-sine")


register("integrand", "constant-identity", _integrand_constant_identity)
register("integrand", "constant", _integrand_constant)
register("integrand", "time-linear", _integrand_time_linear)
register("integrand", "wiener-sine", _integrand_wiener_sine)


# ---------------------------------------------------------------------------
# SPDE coefficient sets


def _coeff_ou_linear(a: float = 1.0, sigma: float = 0.5, xi: float = 1.0,
                     horizon: float = 1.0) -> SPDEProblem:
    """Scalar linear equation with additive unit-Wiener noise (exact moments)."""
    spec = MVMSpec.wiener_only(np.array([[1.0]]))
    sg = SemigroupSpec(np.array([-float(a)]))
    S = np.array([[float(sigma)]])
    return SPDEProblem(
        semigroup=sg,
        B=lambda t, x: np.zeros(1),
        F=lambda t, m, x: S,
        xi=np.array([float(xi)]),
        spec=spec,
        horizon=float(horizon),
        a_curve=lambda r: 0.0,
        b_curve=lambda r: float(sigma),
        B_ens=lambda t, X: np.zeros_like(X),
        F_ens=lambda t, m, X: S,
    )


def _coeff_heat_additive(dim: int = 4, sigma: float = 0.5, xi_scale: float = 1.0,
                         horizon: float = 1.0) -> SPDEProblem:
    """Diagonal heat-type generator -k^2 with additive diagonal noise."""
    eig = -np.arange(1, dim + 1, dtype=float) ** 2
    sg = SemigroupSpec(eig)
    spec = MVMSpec.wiener_only(np.eye(dim))
    S = float(sigma) * np.eye(dim)
    xi = xi_scale / np.arange(1, dim + 1, dtype=float)
    b_val = float(np.sqrt(sigma ** 2 * dim))
    return SPDEProblem(
        semigroup=sg,
        B=lambda t, x: np.zeros(dim),
        F=lambda t, m, x: S,
        xi=xi,
        spec=spec,
        horizon=float(horizon),
        a_curve=lambda r: 0.0,
        b_curve=lambda r: b_val,
        B_ens=lambda t, X: np.zeros_like(X),
        F_ens=lambda t, m, X: S,
    )


def _coeff_lipschitz_sin(dim: int = 2, drift_scale: float = 0.3,
                         noise_scale: float = 0.3, xi: float = 1.0,
                         horizon: float = 1.0, jump_rate: float = 2.0,
                         jump_size: float = 0.5) -> SPDEProblem:
    """Nonlinear Lipschitz coefficients over a jump-diffusion noise.

    B(t,x) = drift_scale * sin(x) coordinatewise, F(t,u,x) multiplies a
    fixed matrix by cos(x_0), so both bounds hold with constant curves.
    """
    eig = -np.arange(1, dim + 1, dtype=float)
    sg = SemigroupSpec(eig)
    atom = LevyAtom(jump_size * np.ones(dim) / math.sqrt(dim), float(jump_rate))
    spec = MVMSpec.levy_mvm(0.5 * np.eye(dim), LevyMeasureSpec((atom,)))
    S = float(noise_scale) * np.eye(dim)
    # |cos| <= 1, so b^2 = noise_scale^2 (trace Q + sum rate |a|^2) dominates
    mark_mass = float(np.trace(spec.mark_operator(0)))
    for k, a in enumerate(spec.levy.atoms):
        mark_mass += a.rate * float(a.vector @ a.vector)
    b_val = noise_scale * math.sqrt(mark_mass)

    def B(t, x):
        return drift_scale * np.sin(x)

    def F(t, m, x):
        return math.cos(x[0]) * S

    def B_ens(t, X):
        return drift_scale * np.sin(X)

    def F_ens(t, m, X):
        return np.cos(X[:, 0])[:, None, None] * S[None, :, :]

    return SPDEProblem(
        semigroup=sg, B=B, F=F, xi=float(xi) * np.ones(dim), spec=spec,
        horizon=float(horizon),
        a_curve=lambda r: float(drift_scale),
        b_curve=lambda r: float(b_val),
        B_ens=B_ens, F_ens=F_ens,
    )


def _coeff_levy_patch_demo(small_size: float = 0.5, small_rate: float = 3.0,
                           large_size: float = 1.5, large_rate: float = 1.0,
                           horizon: float = 1.0) -> SPDEProblem:
    """Jump diffusion with one atom outside the unit ball (patching target)."""
    atoms = (
        LevyAtom(np.array([small_size]), float(small_rate)),
        LevyAtom(np.array([large_size]), float(large_rate)),
    )
    spec = MVMSpec.levy_mvm(np.array([[0.2]]), LevyMeasureSpec(atoms))
    sg = SemigroupSpec(np.array([-1.0]))

    def F(t, m, x):
        return np.array([[0.3 * math.cos(x[0])]])

    return SPDEProblem(
        semigroup=sg,
        B=lambda t, x: 0.1 * np.sin(x),
        F=F,
        xi=np.array([1.0]),
        spec=spec,
        horizon=float(horizon),
        a_curve=lambda r: 0.1,
        b_curve=lambda r: 0.8,
    )


register("coeff", "ou-linear", _coeff_ou_linear)
register("coeff", "heat-additive", _coeff_heat_additive)
register("coeff", "lipschitz-sin", _coeff_lipschitz_sin)
register("coeff", "levy-patch-demo", _coeff_levy_patch_demo)
