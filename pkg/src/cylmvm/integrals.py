"""Stochastic integrals of operator-valued integrands against sampled noise.

Two integrand classes are supported:

* :class:`SimpleIntegrand` -- finitely many terms 1_{(s_i,t_i]} 1_{F_i}
  1_{A_j} S_ij; integrated exactly by radonifying each windowed noise
  process (this is the defining construction, and the reference for all
  identities).
* :class:`StepIntegrand` -- predictable step processes evaluated at the
  left endpoint of each grid step and applied to that step's noise
  increments, with the Wiener channel at mark 0 and jump marks routed
  through their atoms.

The discrete weighted-norm accumulator matches the integral's second
moment exactly in expectation, so Monte Carlo isometry checks have a
closed-form target. Pathwise identity tolerances are algebraic (1e-9),
not statistical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .noise import (
    MVMSpec,
    NoisePathBundle,
    TimeGrid,
    derive_rng,
    sample_bundle,
)
from .radon import CylindricalMartingalePaths, radonify
from .spaces import DimensionMismatchError, _as_array, psd_sqrt
from .verify import Ensemble, TestReport, estimate_second_moment, mean_zscores

__all__ = [
    "PathPredicate",
    "ALWAYS",
    "NEVER",
    "SimpleTerm",
    "SimpleIntegrand",
    "StepIntegrand",
    "IntegralPath",
    "PredictabilityError",
    "Lambda2Result",
    "IsometryReport",
    "StoppingTimeRule",
    "integrate_simple",
    "simple_integral_path",
    "integrate_step",
    "lambda2_norm_sq",
    "pathwise_lambda2_process",
    "isometry_report",
    "push_operator",
    "restrict_integrand",
    "stop_integral",
    "split_independent",
    "fubini_check",
    "localize",
    "combine_integrands",
    "integrate_ensemble",
]

PATHWISE_TOL = 1e-9


class PredictabilityError(RuntimeError):
    """An integrand's value at step i changed when the future was scrambled."""


@dataclass(frozen=True)
class PathPredicate:
    """Event predicate measurable at a fixed time: sees only the truncated path."""

    fn: Callable[[NoisePathBundle], bool]
    prob: Optional[float] = None
    name: str = "predicate"

    def __call__(self, bundle: NoisePathBundle) -> bool:
        return bool(self.fn(bundle))


ALWAYS = PathPredicate(lambda b: True, prob=1.0, name="always")
NEVER = PathPredicate(lambda b: False, prob=0.0, name="never")


@dataclass(frozen=True)
class SimpleTerm:
    """One window (s, t] x F with mark-set/operator pairs."""

    s: float
    t: float
    predicate: PathPredicate
    parts: tuple  # ((mark_set frozenset, matrix), ...)

    def __post_init__(self):
        if not 0 <= self.s < self.t:
            raise ValueError("term window must satisfy 0 <= s < t")
        parts = tuple((frozenset(A), np.atleast_2d(np.asarray(S, dtype=float)))
                      for A, S in self.parts)
        object.__setattr__(self, "parts", parts)

    def mark_matrix(self, mark_id: int, out_dim: int, in_dim: int) -> np.ndarray:
        M = np.zeros((out_dim, in_dim))
        for A, S in self.parts:
            if mark_id in A:
                M = M + S
        return M


class SimpleIntegrand:
    """Finite sum of windowed constant-operator terms.

    Overlapping windows of distinct terms must be identical (the separation
    condition); disjointness of their predicates on equal windows is the
    caller's obligation and cannot be checked structurally.
    """

    def __init__(self, terms: Sequence[SimpleTerm], in_dim: int, out_dim: int):
        self.terms = tuple(terms)
        self.in_dim = in_dim
        self.out_dim = out_dim
        for term in self.terms:
            for _, S in term.parts:
                if S.shape != (out_dim, in_dim):
                    raise DimensionMismatchError(
                        f"part shape {S.shape} != ({out_dim}, {in_dim})")
        for i, a in enumerate(self.terms):
            for b in self.terms[i + 1:]:
                overlap = min(a.t, b.t) - max(a.s, b.s)
                if overlap > 0 and not (a.s == b.s and a.t == b.t):
                    raise ValueError(
                        "overlapping windows of distinct terms must be equal")

    @staticmethod
    def single(s, t, A, S, predicate: PathPredicate = ALWAYS) -> "SimpleIntegrand":
        S = np.atleast_2d(np.asarray(S, dtype=float))
        term = SimpleTerm(s, t, predicate, ((frozenset(A), S),))
        return SimpleIntegrand([term], S.shape[1], S.shape[0])


class StepIntegrand:
    """Predictable step process: value at step i may use path data up to t_i.

    ``kind`` selects how much structure the ensemble fast path can exploit:
    "deterministic" (matrix per (step, mark)), "scalar" (deterministic
    matrix scaled by a predictable scalar), or "general" (arbitrary map of
    the past path; per-path integration only).
    """

    def __init__(self, in_dim: int, out_dim: int, kind: str,
                 value: Optional[Callable] = None,
                 det_value: Optional[Callable] = None,
                 scalar: Optional[Callable] = None,
                 scalar_ensemble: Optional[Callable] = None,
                 scalar_m2: Optional[Callable] = None,
                 name: str = "step-integrand"):
        if kind not in ("deterministic", "scalar", "general"):
            raise ValueError(f"unknown integrand kind {kind!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.kind = kind
        self._value = value
        self._det = det_value
        self._scalar = scalar
        self.scalar_ensemble = scalar_ensemble
        self.scalar_m2 = scalar_m2
        self.name = name

    # -- constructors --------------------------------------------------
    @staticmethod
    def constant(S, name: str = "constant") -> "StepIntegrand":
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return StepIntegrand(S.shape[1], S.shape[0], "deterministic",
                             det_value=lambda i, grid, mark, _S=S: _S, name=name)

    @staticmethod
    def from_time(fn: Callable[[float, int], np.ndarray], in_dim: int,
                  out_dim: int, name: str = "time-dependent") -> "StepIntegrand":
        """fn(t_i, mark) -> matrix, deterministic in time."""
        return StepIntegrand(in_dim, out_dim, "deterministic",
                             det_value=lambda i, grid, mark: fn(grid.times[i], mark),
                             name=name)

    @staticmethod
    def scalar_modulated(S, scalar: Callable, scalar_ensemble=None,
                         scalar_m2=None, name: str = "scalar-modulated") -> "StepIntegrand":
        """scalar(i, bundle) times the fixed matrix S; scalar must be predictable."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return StepIntegrand(S.shape[1], S.shape[0], "scalar",
                             det_value=lambda i, grid, mark, _S=S: _S,
                             scalar=scalar, scalar_ensemble=scalar_ensemble,
                             scalar_m2=scalar_m2, name=name)

    @staticmethod
    def general(fn: Callable, in_dim: int, out_dim: int,
                name: str = "general") -> "StepIntegrand":
        """fn(i, bundle, mark) -> matrix; may use bundle data up to t_i only."""
        return StepIntegrand(in_dim, out_dim, "general", value=fn, name=name)

    # -- evaluation ----------------------------------------------------
    def det_matrix(self, i: int, grid: TimeGrid, mark: int) -> np.ndarray:
        return np.atleast_2d(np.asarray(self._det(i, grid, mark), dtype=float))

    def scalar_value(self, i: int, bundle: NoisePathBundle) -> float:
        return float(self._scalar(i, bundle))

    def matrix(self, i: int, bundle: NoisePathBundle, mark: int) -> np.ndarray:
        if self.kind == "deterministic":
            return self.det_matrix(i, bundle.grid, mark)
        if self.kind == "scalar":
            return self.scalar_value(i, bundle) * self.det_matrix(i, bundle.grid, mark)
        return np.atleast_2d(np.asarray(self._value(i, bundle, mark), dtype=float))


@dataclass(frozen=True)
class IntegralPath:
    """Adapted G-valued path on the grid, zero at time zero."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if not np.all(np.isfinite(v)):
            raise ValueError("integral path contains non-finite values")
        if np.any(v[0] != 0.0):
            raise ValueError("integral path must start at zero")
        object.__setattr__(self, "values", v)

    def value_at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]

    def truncated(self, t: float) -> "IntegralPath":
        idx = self.grid.index_of(t)
        vals = self.values.copy()
        vals[idx + 1:] = vals[idx]
        return IntegralPath(self.grid, vals)

    def sup_sq(self) -> float:
        return float(np.max(np.sum(self.values ** 2, axis=1)))

    def max_step_jump(self) -> float:
        return float(np.max(np.linalg.norm(np.diff(self.values, axis=0), axis=1)))

    def to_csv(self) -> str:
        import io

        buf = io.StringIO()
        d = self.values.shape[1]
        buf.write("time," + ",".join(f"coord_{i}" for i in range(d)) + "\n")
        for t, row in zip(self.grid.times, self.values):
            buf.write(f"{t!r}," + ",".join(repr(float(x)) for x in row) + "\n")
        return buf.getvalue()


def _max_norm_diff(a: IntegralPath, b: IntegralPath) -> float:
    return float(np.max(np.linalg.norm(a.values - b.values, axis=1)))


# ---------------------------------------------------------------------------
# simple integrands: exact construction via radonified windows


def simple_integral_path(Phi: SimpleIntegrand, paths: NoisePathBundle) -> IntegralPath:
    """Integral path of a simple integrand, exact at grid points."""
    spec = paths.spec
    n = paths.grid.n_steps + 1
    values = np.zeros((n, Phi.out_dim))
    for term in Phi.terms:
        if not term.predicate(paths.restricted(term.s)):
            continue
        for A, S in term.parts:
            cyl = CylindricalMartingalePaths.from_mvm(
                spec, paths, (term.s, term.t), A, check_linearity=False)
            values += radonify(cyl, S).values
    return IntegralPath(paths.grid, values)


def integrate_simple(Phi: SimpleIntegrand, paths: NoisePathBundle, t: float) -> np.ndarray:
    """Value of the simple integral at a grid time t."""
    return simple_integral_path(Phi, paths).value_at(t)


# ---------------------------------------------------------------------------
# step integrands: left-point evaluation against step noise increments


def _check_predictability(Phi: StepIntegrand, paths: NoisePathBundle, marks):
    n = paths.grid.n_steps
    probes = sorted({1, n // 2, max(n - 1, 1)} & set(range(1, n)))
    for i in probes:
        t_i = paths.grid.times[i]
        scrambled = paths.scrambled_after(t_i, paths.rng_seed + 1_000_003 + i)
        for mark in marks:
            a = Phi.matrix(i, paths, mark)
            b = Phi.matrix(i, scrambled, mark)
            scale = 1.0 + float(np.max(np.abs(a)))
            if float(np.max(np.abs(a - b))) > 1e-12 * scale:
                raise PredictabilityError(
                    f"integrand at step {i} depends on path data after t={t_i}")


def integrate_step(Phi: StepIntegrand, paths: NoisePathBundle,
                   check_predictability: bool = True) -> IntegralPath:
    """Left-point integral of a predictable step integrand.

    Per step i and mark u, Phi(t_i, path up to t_i, u) is applied to the
    noise increment of (t_i, t_{i+1}] at mark u. A violation of
    predictability (value changes when the future is scrambled) is a hard
    error.
    """
    spec = paths.spec
    grid = paths.grid
    if Phi.in_dim != spec.dim:
        raise DimensionMismatchError("integrand domain does not match the noise")
    marks = spec.mark_space().ids()
    if check_predictability and Phi.kind != "deterministic":
        _check_predictability(Phi, paths, marks)
    values = np.zeros((grid.n_steps + 1, Phi.out_dim))
    dt = grid.dt
    comp = spec.compensator_rate()
    jump_sums = paths.jump_step_sums() if spec.levy is not None else None
    counts = paths.jump_step_counts() if spec.levy is not None else None
    acc = np.zeros(Phi.out_dim)
    for i in range(grid.n_steps):
        inc = np.zeros(Phi.out_dim)
        if spec.kind == "impulsive":
            m1 = spec.impulsive.amplitude_mean()
            ev = paths.impulse_step_events(i)
            for time, x, amp in zip(ev.times, ev.site_indices, ev.amplitudes):
                inc += Phi.matrix(i, paths, int(x))[:, 0] * amp
            for x in range(spec.impulsive.n_sites):
                w = float(spec.impulsive.zeta[x])
                if w:
                    inc -= dt[i] * w * m1 * Phi.matrix(i, paths, x)[:, 0]
        else:
            M0 = Phi.matrix(i, paths, 0)
            chan0 = np.zeros(spec.dim)
            if paths.wiener_increments is not None:
                chan0 = chan0 + paths.wiener_increments[i]
            if spec.kind == "cylindrical-levy" and jump_sums is not None:
                chan0 = chan0 + jump_sums[i] - dt[i] * comp
            inc += M0 @ chan0
            if spec.kind == "levy-mvm" and spec.levy is not None:
                for k, atom in enumerate(spec.levy.atoms):
                    coeff = counts[i, k] - dt[i] * atom.rate
                    if coeff:
                        inc += coeff * (Phi.matrix(i, paths, k + 1) @ atom.vector)
        acc = acc + inc
        values[i + 1] = acc
    return IntegralPath(grid, values)


# ---------------------------------------------------------------------------
# weighted norms


@dataclass(frozen=True)
class Lambda2Result:
    value: float
    std_error: float
    exact: bool


def _mark_base(Phi_matrix: Callable[[int], np.ndarray], spec: MVMSpec) -> float:
    """sum_u w_u trace(Phi_u Q_u Phi_u^T) for one time point."""
    total = 0.0
    for u in spec.mark_space().ids():
        w = spec.mark_weight(u)
        if w == 0.0:
            continue
        M = Phi_matrix(u)
        Q = spec.mark_operator(u)
        total += w * float(np.einsum("ij,jk,ik->", M, Q, M))
    return total


def _simple_term_window_integral(term: SimpleTerm, Phi: SimpleIntegrand,
                                 spec: MVMSpec, T: float) -> float:
    from scipy.integrate import quad

    s, t = max(0.0, term.s), min(T, term.t)
    if t <= s:
        return 0.0
    base = _mark_base(lambda u: term.mark_matrix(u, Phi.out_dim, Phi.in_dim), spec)
    # the shipped specs are time-homogeneous, so the quadrature is exact
    val, _ = quad(lambda r: base, s, t, limit=50)
    return float(val)


def lambda2_norm_sq(Phi, spec: MVMSpec, grid: TimeGrid,
                    n_paths: int = 0, seed: int = 0) -> Lambda2Result:
    """Weighted squared norm of an integrand against a noise spec.

    Deterministic integrands are computed exactly (zero CI width); path
    dependence is averaged over a Monte Carlo ensemble of bundles.
    """
    if isinstance(Phi, SimpleIntegrand):
        window = [
            _simple_term_window_integral(term, Phi, spec, grid.T) for term in Phi.terms
        ]
        probs = [term.predicate.prob for term in Phi.terms]
        if all(p is not None for p in probs):
            return Lambda2Result(float(np.dot(probs, window)), 0.0, True)
        if n_paths < 2:
            raise ValueError("path-dependent predicates need an ensemble")
        vals = np.zeros(n_paths)
        for p in range(n_paths):
            bundle = sample_bundle(spec, grid, seed + p)
            vals[p] = sum(
                w for w, term in zip(window, Phi.terms)
                if term.predicate(bundle.restricted(term.s))
            )
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(n_paths))
        return Lambda2Result(mean, se, False)

    dt = grid.dt
    bases = np.array([
        _mark_base(lambda u: Phi.det_matrix(i, grid, u), spec)
        if Phi.kind != "general" else 0.0
        for i in range(grid.n_steps)
    ])
    if Phi.kind == "deterministic":
        return Lambda2Result(float(np.sum(bases * dt)), 0.0, True)
    if Phi.kind == "scalar" and Phi.scalar_m2 is not None:
        m2 = np.array([Phi.scalar_m2(i, grid) for i in range(grid.n_steps)])
        return Lambda2Result(float(np.sum(m2 * bases * dt)), 0.0, True)
    if n_paths < 2:
        raise ValueError("path-dependent integrands need an ensemble")
    vals = np.zeros(n_paths)
    for p in range(n_paths):
        bundle = sample_bundle(spec, grid, seed + p)
        vals[p] = pathwise_lambda2_process(Phi, bundle)[-1]
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_paths))
    return Lambda2Result(mean, se, False)


def pathwise_lambda2_process(Phi: StepIntegrand, paths: NoisePathBundle) -> np.ndarray:
    """Cumulative discrete weighted norm of Phi along one path (per grid point)."""
    grid = paths.grid
    spec = paths.spec
    out = np.zeros(grid.n_steps + 1)
    for i in range(grid.n_steps):
        base = _mark_base(lambda u: Phi.matrix(i, paths, u), spec)
        out[i + 1] = out[i] + base * grid.dt[i]
    return out


# ---------------------------------------------------------------------------
# vectorized ensemble integration (for large-N moment estimates)


@dataclass
class EnsembleIntegral:
    final: np.ndarray             # (n_paths, out_dim) at T
    kept: dict                    # grid index -> (n_paths, out_dim)
    sup_sq: Optional[np.ndarray]  # per-path sup_t |I_t|^2
    max_jump: Optional[np.ndarray]


def integrate_ensemble(Phi: StepIntegrand, spec: MVMSpec, grid: TimeGrid,
                       n_paths: int, seed: int, keep_indices: Sequence[int] = (),
                       track_sup: bool = False,
                       track_max_jump: bool = False) -> EnsembleIntegral:
    """n_paths independent integral paths, vectorized across paths.

    Jump channels use per-step Poisson counts (equal in distribution to
    exact event times at grid resolution). Supports deterministic and
    scalar-modulated integrands; general integrands need per-path bundles.
    """
    if Phi.kind == "general":
        raise ValueError("general integrands have no ensemble fast path")
    if Phi.kind == "scalar" and Phi.scalar_ensemble is None:
        raise ValueError("scalar integrand lacks an ensemble evaluator")
    rng = derive_rng(seed, 11)
    dt = grid.dt
    out = np.zeros((n_paths, Phi.out_dim))
    kept = {}
    sup_sq = np.zeros(n_paths) if track_sup else None
    max_jump = np.zeros(n_paths) if track_max_jump else None
    has_w = spec.has_wiener()
    root = psd_sqrt(spec.effective_wiener_cov()) if has_w else None
    atoms = spec.levy.atoms if spec.levy is not None else ()
    w_cum = np.zeros((n_paths, spec.dim))
    keep_set = set(int(k) for k in keep_indices)
    if 0 in keep_set:
        kept[0] = out.copy()
    for i in range(grid.n_steps):
        scal = None
        if Phi.kind == "scalar":
            scal = np.asarray(Phi.scalar_ensemble(i, w_cum), dtype=float)
        delta = np.zeros_like(out)
        if spec.kind == "impulsive":
            imp = spec.impulsive
            for x in range(imp.n_sites):
                zx = float(imp.zeta[x])
                if zx == 0.0:
                    continue
                col = Phi.det_matrix(i, grid, x)[:, 0]
                for beta, rate in imp.scalar_atoms:
                    lam = dt[i] * zx * rate
                    c = rng.poisson(lam, size=n_paths)
                    coeff = (c - lam) * beta
                    delta += np.outer(coeff, col)
        else:
            dW = None
            if has_w:
                z = rng.standard_normal((n_paths, spec.dim))
                dW = math.sqrt(dt[i]) * z @ root.T
            chan0 = dW if dW is not None else np.zeros((n_paths, spec.dim))
            jump_counts = None
            if atoms:
                jump_counts = np.column_stack([
                    rng.poisson(a.rate * dt[i], size=n_paths) for a in atoms
                ])
            if spec.kind == "cylindrical-levy" and atoms:
                A_mat = np.stack([a.vector for a in atoms])
                rates = np.array([a.rate for a in atoms])
                chan0 = chan0 + (jump_counts - rates * dt[i]) @ A_mat
            M0 = Phi.det_matrix(i, grid, 0)
            delta += chan0 @ M0.T
            if spec.kind == "levy-mvm" and atoms:
                for k, a in enumerate(atoms):
                    vec = Phi.det_matrix(i, grid, k + 1) @ a.vector
                    coeff = jump_counts[:, k] - a.rate * dt[i]
                    delta += np.outer(coeff, vec)
        if scal is not None:
            delta *= scal[:, None]
        out += delta
        if has_w and spec.kind != "impulsive":
            w_cum += dW
        if track_max_jump:
            np.maximum(max_jump, np.linalg.norm(delta, axis=1), out=max_jump)
        if track_sup:
            np.maximum(sup_sq, np.sum(out * out, axis=1), out=sup_sq)
        if (i + 1) in keep_set:
            kept[i + 1] = out.copy()
    return EnsembleIntegral(out, kept, sup_sq, max_jump)


@dataclass(frozen=True)
class IsometryReport:
    """Primary verification artifact: MC moments of I_T against the oracle."""

    oracle: float
    oracle_se: float
    mc_mean_z: float
    mc_m2: float
    mc_m2_se: float
    rel_err: float
    n_paths: int
    seed: int
    passed: bool

    def to_dict(self) -> dict:
        return {
            "oracle": self.oracle,
            "oracle_se": self.oracle_se,
            "mc_mean_z": self.mc_mean_z,
            "mc_m2": self.mc_m2,
            "rel_err": self.rel_err,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "pass": bool(self.passed),
        }


def isometry_report(Phi, spec: MVMSpec, grid: TimeGrid, n_paths: int,
                    seed: int, rel_tol: float = 0.05) -> IsometryReport:
    """Monte Carlo check of the integral's mean-zero and second-moment laws."""
    norm = lambda2_norm_sq(Phi, spec, grid, n_paths=min(n_paths, 2000), seed=seed + 7)
    if isinstance(Phi, SimpleIntegrand):
        finals = np.zeros((n_paths, Phi.out_dim))
        for p in range(n_paths):
            bundle = sample_bundle(spec, grid, seed + p)
            finals[p] = simple_integral_path(Phi, bundle).values[-1]
    else:
        try:
            finals = integrate_ensemble(Phi, spec, grid, n_paths, seed).final
        except ValueError:
            finals = np.zeros((n_paths, Phi.out_dim))
            for p in range(n_paths):
                bundle = sample_bundle(spec, grid, seed + p)
                finals[p] = integrate_step(Phi, bundle,
                                           check_predictability=(p == 0)).values[-1]
    z = mean_zscores(finals)
    mean_z = float(np.max(np.abs(z)))
    m2_rep = estimate_second_moment(Ensemble(finals, seed), oracle=norm.value,
                                    rel_tol=rel_tol)
    if norm.value > 0:
        rel = abs(m2_rep.estimate - norm.value) / norm.value
        ok = rel < rel_tol and mean_z < 4.0
    else:
        rel = abs(m2_rep.estimate - norm.value)
        ok = rel < 1e-12 and mean_z < 4.0
    return IsometryReport(norm.value, norm.std_error, mean_z, m2_rep.estimate,
                          m2_rep.std_error, float(rel), n_paths, seed, bool(ok))


# ---------------------------------------------------------------------------
# algebraic identities


def push_operator(R, Phi):
    """Compose an operator on the codomain with the integrand: values R o Phi."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if isinstance(Phi, SimpleIntegrand):
        if R.shape[1] != Phi.out_dim:
            raise DimensionMismatchError("push operator has wrong domain")
        terms = [
            SimpleTerm(t.s, t.t, t.predicate, tuple((A, R @ S) for A, S in t.parts))
            for t in Phi.terms
        ]
        return SimpleIntegrand(terms, Phi.in_dim, R.shape[0])
    if R.shape[1] != Phi.out_dim:
        raise DimensionMismatchError("push operator has wrong domain")
    det = (lambda i, grid, mark: R @ Phi.det_matrix(i, grid, mark)) \
        if Phi.kind != "general" else None
    value = (lambda i, bundle, mark: R @ Phi.matrix(i, bundle, mark)) \
        if Phi.kind == "general" else None
    return StepIntegrand(Phi.in_dim, R.shape[0], Phi.kind, value=value,
                         det_value=det, scalar=Phi._scalar,
                         scalar_ensemble=Phi.scalar_ensemble,
                         scalar_m2=Phi.scalar_m2, name=f"pushed-{Phi.name}")


def restrict_integrand(Phi, s0: float, t0: float,
                       F0: PathPredicate = ALWAYS):
    """Restriction 1_{(s0,t0] x F0} Phi.

    For step integrands a grid step is active when its interval lies inside
    (s0, t0]; the window endpoints should be grid points for the pathwise
    identity to be exact.
    """
    if not 0 <= s0 < t0:
        raise ValueError("window must satisfy 0 <= s0 < t0")
    if isinstance(Phi, SimpleIntegrand):
        terms = []
        for term in Phi.terms:
            s, t = max(term.s, s0), min(term.t, t0)
            if t <= s:
                continue
            if F0 is ALWAYS:
                pred = term.predicate
            else:
                base = term.predicate
                prob = 0.0 if F0.prob == 0.0 or base.prob == 0.0 else None
                pred = PathPredicate(
                    lambda b, _b=base, _s=term.s, _f=F0, _s0=s0:
                        _b(b.restricted(min(_s, b.grid.T)))
                        and _f(b.restricted(min(_s0, b.grid.T))),
                    prob=prob, name=f"{base.name}&{F0.name}")
            terms.append(SimpleTerm(s, t, pred, term.parts))
        return SimpleIntegrand(terms, Phi.in_dim, Phi.out_dim)

    cache: dict = {}

    def active(i, bundle):
        grid = bundle.grid
        inside = grid.times[i] >= s0 - 1e-12 and grid.times[i + 1] <= t0 + 1e-12
        if not inside:
            return False
        key = id(bundle)
        if key not in cache:
            cache[key] = bool(F0(bundle.restricted(s0)))
        return cache[key]

    if Phi.kind != "general" and F0.prob == 1.0:
        def det(i, grid, mark):
            inside = grid.times[i] >= s0 - 1e-12 and grid.times[i + 1] <= t0 + 1e-12
            M = Phi.det_matrix(i, grid, mark)
            return M if inside else np.zeros_like(M)
        return StepIntegrand(Phi.in_dim, Phi.out_dim, Phi.kind, det_value=det,
                             scalar=Phi._scalar, scalar_ensemble=Phi.scalar_ensemble,
                             scalar_m2=Phi.scalar_m2, name=f"restricted-{Phi.name}")

    def value(i, bundle, mark):
        if active(i, bundle):
            return Phi.matrix(i, bundle, mark)
        return np.zeros((Phi.out_dim, Phi.in_dim))

    return StepIntegrand(Phi.in_dim, Phi.out_dim, "general", value=value,
                         name=f"restricted-{Phi.name}")


@dataclass(frozen=True)
class StoppingTimeRule:
    """Grid-valued stopping rules that only see past path data."""

    kind: str  # "deterministic" | "threshold-on-lambda2" | "jump-exit"
    params: dict = field(default_factory=dict)

    def evaluate(self, bundle: NoisePathBundle, Phi: Optional[StepIntegrand] = None) -> float:
        grid = bundle.grid
        if self.kind == "deterministic":
            return grid.times[grid.index_of(self.params["time"])]
        if self.kind == "threshold-on-lambda2":
            if Phi is None:
                raise ValueError("threshold rule needs the integrand")
            proc = pathwise_lambda2_process(Phi, bundle)
            hits = np.nonzero(proc >= self.params["threshold"] - 1e-15)[0]
            return grid.times[hits[0]] if hits.size else grid.T
        if self.kind == "jump-exit":
            level = self.params.get("min_norm", 0.0)
            if bundle.jumps is None or not len(bundle.jumps):
                return grid.T
            for t, k in zip(bundle.jumps.times, bundle.jumps.atom_indices):
                if np.linalg.norm(bundle.spec.levy.atoms[k].vector) >= level:
                    idx = int(np.searchsorted(grid.times, t - 1e-15, side="left"))
                    return grid.times[min(idx, grid.n_steps)]
            return grid.T
        raise ValueError(f"unknown stopping rule {self.kind!r}")


@dataclass(frozen=True)
class StopResult:
    path: IntegralPath
    sigma: float
    residual: float


def stop_integral(Phi: StepIntegrand, sigma: StoppingTimeRule,
                  paths: NoisePathBundle) -> StopResult:
    """Stopped integral, checking 1_{[0,sigma]} Phi against I_{t ^ sigma}."""
    grid = paths.grid
    stop_t = sigma.evaluate(paths, Phi)
    idx = grid.index_of(stop_t)

    def value(i, bundle, mark):
        if bundle.grid.times[i + 1] <= stop_t + 1e-12:
            return Phi.matrix(i, bundle, mark)
        return np.zeros((Phi.out_dim, Phi.in_dim))

    lhs = integrate_step(StepIntegrand(Phi.in_dim, Phi.out_dim, "general",
                                       value=value, name=f"stopped-{Phi.name}"),
                         paths, check_predictability=False)
    full = integrate_step(Phi, paths, check_predictability=False)
    clamped = full.values[np.minimum(np.arange(grid.n_steps + 1), idx)]
    rhs = IntegralPath(grid, clamped)
    return StopResult(rhs, stop_t, _max_norm_diff(lhs, rhs))


@dataclass(frozen=True)
class SplitResult:
    total: IntegralPath
    wiener_component: IntegralPath
    jump_component: IntegralPath
    residual: float
    norm_total: float
    norm_parts: tuple


def split_independent(Phi: StepIntegrand, spec: MVMSpec, grid: TimeGrid,
                      seed: int) -> SplitResult:
    """Integral against the sum noise versus the sum of component integrals.

    The Wiener and jump parts of one bundle come from distinct RNG
    substreams, hence are independent; the identity is checked pathwise
    under that shared noise.
    """
    bundle = sample_bundle(spec, grid, seed)
    total = integrate_step(Phi, bundle, check_predictability=False)
    wien = integrate_step(Phi, bundle.without_jumps(), check_predictability=False)
    jump = integrate_step(Phi, bundle.without_wiener(), check_predictability=False)
    summed = IntegralPath(grid, wien.values + jump.values)
    res = _max_norm_diff(total, summed)
    n_tot = lambda2_norm_sq(Phi, spec, grid)
    n_w = lambda2_norm_sq(Phi, spec.wiener_part(), grid)
    n_j = lambda2_norm_sq(Phi, spec.jump_part(), grid)
    return SplitResult(total, wien, jump, res, n_tot.value, (n_w.value, n_j.value))


def combine_integrands(weighted: Sequence, in_dim: int, out_dim: int) -> StepIntegrand:
    """Weighted sum of step integrands (the mixed integrand of Fubini checks)."""
    weighted = [(float(w), phi) for w, phi in weighted]
    if all(phi.kind == "deterministic" for _, phi in weighted):
        def det(i, grid, mark):
            out = np.zeros((out_dim, in_dim))
            for w, phi in weighted:
                if w:
                    out = out + w * phi.det_matrix(i, grid, mark)
            return out
        return StepIntegrand(in_dim, out_dim, "deterministic", det_value=det,
                             name="combined")

    def value(i, bundle, mark):
        out = np.zeros((out_dim, in_dim))
        for w, phi in weighted:
            if w:
                out = out + w * phi.matrix(i, bundle, mark)
        return out

    return StepIntegrand(in_dim, out_dim, "general", value=value, name="combined")


def fubini_check(weighted: Sequence, paths: NoisePathBundle) -> float:
    """Residual of swapping the parameter average with the stochastic integral.

    `weighted` is a finite family (weight, integrand); returns the max over
    grid times of the norm difference between integrating the averaged
    integrand and averaging the individual integrals, under shared noise.
    """
    weighted = list(weighted)
    in_dim = weighted[0][1].in_dim
    out_dim = weighted[0][1].out_dim
    mixed = combine_integrands(weighted, in_dim, out_dim)
    lhs = integrate_step(mixed, paths, check_predictability=False)
    rhs = np.zeros_like(lhs.values)
    for w, phi in weighted:
        if w:
            rhs += w * integrate_step(phi, paths, check_predictability=False).values
    return _max_norm_diff(lhs, IntegralPath(paths.grid, rhs))


@dataclass(frozen=True)
class LocalizeResult:
    taus: tuple
    path: IntegralPath
    compat_residuals: tuple


def localize(Phi: StepIntegrand, thresholds: Sequence[float],
             paths: NoisePathBundle) -> LocalizeResult:
    """Localization by norm-threshold stopping times.

    For each threshold n, tau_n is the first grid time where the pathwise
    weighted norm reaches n; the compatibility residual compares stopping
    the integral at tau_n with integrating the truncated integrand.
    """
    taus = []
    residuals = []
    last = None
    for n in thresholds:
        rule = StoppingTimeRule("threshold-on-lambda2", {"threshold": float(n)})
        result = stop_integral(Phi, rule, paths)
        taus.append(result.sigma)
        residuals.append(result.residual)
        last = result.path
    if any(b < a - 1e-15 for a, b in zip(taus, taus[1:])):
        raise RuntimeError("stopping times must be nondecreasing in the threshold")
    return LocalizeResult(tuple(taus), last, tuple(residuals))
