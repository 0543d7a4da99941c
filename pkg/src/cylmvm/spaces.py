"""Finite-dimensional Hilbert-space algebra on explicit truncations.

Everything in this package works in coordinates with respect to a fixed
orthonormal basis of a d-dimensional truncation of a separable Hilbert
space. Vectors are plain float arrays, operators are dense matrices, and
the Hilbert-Schmidt norm is the Frobenius norm. Covariance families map a
(time, mark) pair to a positive semidefinite operator and carry the time
and mark measures used by all second-moment formulas.

Truncation is explicit: the dimension d is a user parameter, nothing
pretends to be infinite dimensional, and tail errors are reported by the
callers that incur them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "TruncatedSpace",
    "HVec",
    "HSOperator",
    "PSDOperator",
    "MeasureSpec",
    "Mark",
    "MarkSpace",
    "CovarianceFamily",
    "NotSymmetricError",
    "DimensionMismatchError",
    "hs_norm",
    "psd_sqrt",
    "seminorm_eval",
    "weighted_hs_norm_sq",
    "uniform_seminorm_bound",
]

SYMMETRY_TOL = 1e-12
EIGENVALUE_FLOOR = -1e-10


class NotSymmetricError(ValueError):
    """Raised when a claimed-symmetric matrix exceeds the asymmetry tolerance."""


class DimensionMismatchError(ValueError):
    """Raised when vector/operator dimensions do not line up."""


def _as_array(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(getattr(x, "coords", getattr(x, "entries", x)), dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class TruncatedSpace:
    """A d-dimensional truncation of a separable Hilbert space."""

    dim: int
    label: str = "H"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("truncation dimension must be >= 1")


@dataclass(frozen=True)
class HVec:
    """Coordinates of a vector with respect to the truncation basis."""

    space: TruncatedSpace
    coords: np.ndarray

    def __post_init__(self):
        arr = _as_array(self.coords, "coords")
        if arr.shape != (self.space.dim,):
            raise DimensionMismatchError(
                f"expected shape ({self.space.dim},), got {arr.shape}"
            )
        object.__setattr__(self, "coords", arr)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))

    def dot(self, other: "HVec") -> float:
        if other.space.dim != self.space.dim:
            raise DimensionMismatchError("inner product across different truncations")
        return float(self.coords @ other.coords)


@dataclass(frozen=True)
class HSOperator:
    """A (Hilbert-Schmidt) operator as a dense codomain.dim x domain.dim matrix."""

    domain: TruncatedSpace
    codomain: TruncatedSpace
    entries: np.ndarray

    def __post_init__(self):
        arr = _as_array(self.entries, "entries")
        expected = (self.codomain.dim, self.domain.dim)
        if arr.shape != expected:
            raise DimensionMismatchError(f"expected shape {expected}, got {arr.shape}")
        object.__setattr__(self, "entries", arr)

    def apply(self, h: Union[HVec, np.ndarray]) -> np.ndarray:
        return self.entries @ _as_array(h, "vector")

    def adjoint_entries(self) -> np.ndarray:
        return self.entries.T


@dataclass(frozen=True)
class PSDOperator:
    """Positive semidefinite operator (covariance) on one truncation.

    Symmetry is enforced to SYMMETRY_TOL and eigenvalues may dip to
    EIGENVALUE_FLOOR (scaled by the matrix magnitude) before construction
    fails; tiny negative eigenvalues are clamped to zero by psd_sqrt.
    """

    space: TruncatedSpace
    entries: np.ndarray

    def __post_init__(self):
        arr = _as_array(self.entries, "entries")
        d = self.space.dim
        if arr.shape != (d, d):
            raise DimensionMismatchError(f"expected shape ({d}, {d}), got {arr.shape}")
        scale = max(1.0, float(np.abs(arr).max()) if arr.size else 1.0)
        asym = float(np.abs(arr - arr.T).max()) if arr.size else 0.0
        if asym > SYMMETRY_TOL * scale:
            raise NotSymmetricError(f"asymmetry {asym:.3e} exceeds tolerance")
        w = np.linalg.eigvalsh(arr)
        if w.min() < EIGENVALUE_FLOOR * scale:
            raise ValueError(f"matrix is not PSD: min eigenvalue {w.min():.3e}")
        object.__setattr__(self, "entries", arr)

    @staticmethod
    def from_matrix(entries, label: str = "H") -> "PSDOperator":
        arr = np.atleast_2d(np.asarray(entries, dtype=float))
        return PSDOperator(TruncatedSpace(arr.shape[0], label), arr)

    @staticmethod
    def zero(dim: int, label: str = "H") -> "PSDOperator":
        return PSDOperator(TruncatedSpace(dim, label), np.zeros((dim, dim)))

    def quad_form(self, h) -> float:
        v = _as_array(h, "vector")
        return float(v @ self.entries @ v)


@dataclass(frozen=True)
class MeasureSpec:
    """Either Lebesgue measure on an interval or a finite atomic measure.

    Atoms are (mark, weight) pairs; marks are opaque (integers for mark
    measures, floats for atomic time measures).
    """

    kind: str  # "lebesgue" | "atomic"
    atoms: tuple = ()
    interval: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("lebesgue", "atomic"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.kind == "atomic":
            if any(w < 0 for _, w in self.atoms):
                raise ValueError("atomic weights must be nonnegative")
            object.__setattr__(self, "atoms", tuple(self.atoms))
        else:
            if self.interval is None or self.interval[1] <= self.interval[0]:
                raise ValueError("lebesgue measure needs a nondegenerate interval")

    @staticmethod
    def lebesgue(t0: float, t1: float) -> "MeasureSpec":
        return MeasureSpec("lebesgue", interval=(float(t0), float(t1)))

    @staticmethod
    def atomic(atoms: Sequence) -> "MeasureSpec":
        return MeasureSpec("atomic", atoms=tuple(atoms))

    def total_mass(self) -> float:
        if self.kind == "atomic":
            return float(sum(w for _, w in self.atoms))
        return float(self.interval[1] - self.interval[0])


@dataclass(frozen=True)
class Mark:
    """One point of the mark space U: the zero mark (Wiener channel), a jump
    atom with its vector, or a spatial site (payload = site index)."""

    id: int
    kind: str  # "zero" | "atom" | "site"
    vector: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("zero", "atom", "site"):
            raise ValueError(f"unknown mark kind {self.kind!r}")
        if self.vector is not None:
            object.__setattr__(self, "vector", np.asarray(self.vector, dtype=float))


@dataclass(frozen=True)
class MarkSpace:
    """Descriptor of U for a samplable noise spec: a finite list of marks."""

    marks: tuple

    def ids(self):
        return tuple(m.id for m in self.marks)

    def get(self, mark_id: int) -> Mark:
        for m in self.marks:
            if m.id == mark_id:
                return m
        raise KeyError(f"no mark with id {mark_id}")

    def zero_id(self) -> Optional[int]:
        for m in self.marks:
            if m.kind == "zero":
                return m.id
        return None

    def atom_ids(self):
        return tuple(m.id for m in self.marks if m.kind != "zero")

    def full_set(self) -> frozenset:
        return frozenset(self.ids())


@dataclass(frozen=True)
class CovarianceFamily:
    """Operator-induced seminorm family: (r, u) -> PSD covariance on H.

    The evaluator is a map, not a stored table, so time- and mark-dependent
    families are supported without discretizing (r, u) up front. The time
    and mark measures carried here drive every second-moment quadrature.
    """

    evaluator: Callable[[float, int], PSDOperator]
    time_measure: MeasureSpec
    mark_measure: MeasureSpec
    mark_space: Optional[MarkSpace] = None
    dim: int = 0

    def operator(self, r: float, u) -> PSDOperator:
        q = self.evaluator(r, u)
        if self.dim and q.space.dim != self.dim:
            raise DimensionMismatchError(
                f"family returned operator of dim {q.space.dim}, expected {self.dim}"
            )
        return q


# ---------------------------------------------------------------------------
# operations


def hs_norm(S) -> float:
    """Hilbert-Schmidt (Frobenius) norm of an operator."""
    return float(np.linalg.norm(_as_array(S, "operator")))


def psd_sqrt(Q) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalue jitter below zero is clamped so the root never goes complex.
    Raises NotSymmetricError when the input is meaningfully asymmetric.
    """
    arr = np.atleast_2d(_as_array(Q, "matrix"))
    scale = max(1.0, float(np.abs(arr).max()) if arr.size else 1.0)
    if float(np.abs(arr - arr.T).max()) > SYMMETRY_TOL * scale:
        raise NotSymmetricError("psd_sqrt needs a symmetric matrix")
    w, v = np.linalg.eigh(arr)
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.T
    return 0.5 * (root + root.T)


def seminorm_eval(fam: CovarianceFamily, r: float, u, h1, h2) -> float:
    """Bilinear seminorm value <h1, Q_{r,u} h2>."""
    q = fam.operator(r, u)
    a = _as_array(h1, "h1")
    b = _as_array(h2, "h2")
    if a.shape != b.shape or a.shape[0] != q.space.dim:
        raise DimensionMismatchError("seminorm_eval: dimension mismatch")
    return float(a @ q.entries @ b)


def weighted_hs_norm_sq(Phi, Q) -> float:
    """Squared HS norm of Phi composed with the square root of Q.

    Equals trace(Phi Q Phi^T); this is the pointwise integrand of the
    weighted-norm formula used by all isometry oracles.
    """
    A = np.atleast_2d(_as_array(Phi, "Phi"))
    B = np.atleast_2d(_as_array(Q, "Q"))
    if A.shape[1] != B.shape[0]:
        raise DimensionMismatchError("weighted_hs_norm_sq: dimension mismatch")
    return float(np.einsum("ij,jk,ik->", A, B, A))


def uniform_seminorm_bound(fam: CovarianceFamily, T: float, probe_grid) -> float:
    """Empirical uniform bound C with q_{r,u} <= C ||.||, probed on a grid.

    Returns the max over the probes of the spectral norm sqrt(lambda_max)
    of the covariance operator.
    """
    probes = list(probe_grid)
    if not probes:
        raise ValueError("probe grid must be nonempty")
    best = 0.0
    for r, u in probes:
        if not 0.0 <= r <= T:
            raise ValueError(f"probe time {r} outside [0, {T}]")
        w = np.linalg.eigvalsh(fam.operator(r, u).entries)
        best = max(best, float(np.sqrt(max(w.max(), 0.0))))
    return best
