"""Upgrade cylindrical martingale paths to vector-valued paths.

A cylindrical martingale is known only through its scalar evaluations
h -> M(h). Composing with a Hilbert-Schmidt operator S = sum_k l_k g_k h_k^T
produces a genuine vector-valued path X_t = sum_k l_k M_t(h_k) g_k whose
defining property is <X_t, g> = M_t(S^T g). Truncating the series after n
terms leaves a tail controlled by 4 * sup_k E|M_T(h_k)|^2 * sum_{k>n} l_k^2.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .noise import MVMSpec, NoisePathBundle, TimeGrid, mvm_window_process, second_moment_oracle
from .spaces import _as_array

__all__ = [
    "CylindricalMartingalePaths",
    "RadonifiedPath",
    "svd_factor",
    "radonify",
    "radonify_adjoint_check",
]

LINEARITY_TOL = 1e-10


class CylindricalMartingalePaths:
    """One sampled path of a cylindrical square-integrable martingale.

    Wraps an evaluator h -> (values over the grid) that must be linear in h
    pathwise; linearity is checked on random triples at construction.
    """

    def __init__(self, grid: TimeGrid, evaluator: Callable[[np.ndarray], np.ndarray],
                 dim: int, check_linearity: bool = True,
                 moment_oracle: Optional[Callable[[np.ndarray], float]] = None,
                 _rng_seed: int = 0):
        self.grid = grid
        self.dim = dim
        self._eval = evaluator
        self.moment_oracle = moment_oracle
        if check_linearity:
            self._check_linearity(_rng_seed)

    def evaluate(self, h) -> np.ndarray:
        vals = np.asarray(self._eval(_as_array(h, "h")), dtype=float)
        if vals.shape != (self.grid.n_steps + 1,):
            raise ValueError("evaluator must return one value per grid point")
        if vals[0] != 0.0:
            raise ValueError("cylindrical martingale must start at zero")
        return vals

    def _check_linearity(self, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(91,)))
        for _ in range(3):
            h1 = rng.standard_normal(self.dim)
            h2 = rng.standard_normal(self.dim)
            a, b = rng.standard_normal(2)
            lhs = self.evaluate(a * h1 + b * h2)
            rhs = a * self.evaluate(h1) + b * self.evaluate(h2)
            scale = 1.0 + np.max(np.abs(rhs))
            if np.max(np.abs(lhs - rhs)) > LINEARITY_TOL * scale:
                raise ValueError("evaluator is not linear in h")

    @staticmethod
    def from_mvm(spec: MVMSpec, paths: NoisePathBundle, window, A,
                 check_linearity: bool = True) -> "CylindricalMartingalePaths":
        """Windowed noise process r -> M((s ^ r, t ^ r], A)(h) as a
        cylindrical martingale path."""
        s, t = window
        A = frozenset(A)

        def evaluator(h):
            return mvm_window_process(spec, paths, s, t, A, h)

        def moment(h):
            return second_moment_oracle(spec, (s, t), A, h)

        return CylindricalMartingalePaths(
            paths.grid, evaluator, spec.dim, check_linearity,
            moment_oracle=moment, _rng_seed=paths.rng_seed,
        )


@dataclass(frozen=True)
class RadonifiedPath:
    """Vector-valued path on the grid plus the series tail bound."""

    grid: TimeGrid
    values: np.ndarray  # (n_grid, dim_G)
    tail_bound: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("path contains non-finite values")
        if np.any(v[0] != 0.0):
            raise ValueError("path must start at zero")
        object.__setattr__(self, "values", v)

    def value_at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]

    def truncated(self, t: float) -> "RadonifiedPath":
        idx = self.grid.index_of(t)
        vals = self.values.copy()
        vals[idx + 1:] = vals[idx]
        return RadonifiedPath(self.grid, vals, self.tail_bound)

    def to_csv(self) -> str:
        buf = io.StringIO()
        d = self.values.shape[1]
        buf.write("time," + ",".join(f"coord_{i}" for i in range(d)) + "\n")
        for t, row in zip(self.grid.times, self.values):
            buf.write(f"{t!r}," + ",".join(repr(float(x)) for x in row) + "\n")
        return buf.getvalue()


def svd_factor(S):
    """Singular factorization S = sum_k l_k g_k h_k^T.

    Returns (singular values descending, right vectors h_k as rows, left
    vectors g_k as rows).
    """
    arr = np.atleast_2d(_as_array(S, "S"))
    g, lam, ht = np.linalg.svd(arr, full_matrices=False)
    return lam, ht, g.T


def radonify(cyl: CylindricalMartingalePaths, S, n_terms: Optional[int] = None,
             moment_bound: Optional[float] = None) -> RadonifiedPath:
    """Vector-valued version of the cylindrical path through the operator S.

    X_t = sum_{k <= n_terms} l_k M_t(h_k) g_k. The reported tail bound is
    4 * (sup_k E|M_T(h_k)|^2) * sum_{k > n_terms} l_k^2, with the moment
    either supplied by the caller or taken from the closed-form oracle when
    the path came from a noise spec.
    """
    arr = np.atleast_2d(_as_array(S, "S"))
    if arr.shape[1] != cyl.dim:
        raise ValueError("operator domain does not match the cylindrical path")
    lam, hs, gs = svd_factor(arr)
    rank = lam.shape[0]
    if n_terms is None:
        n_terms = rank
    if not 0 <= n_terms <= rank:
        raise ValueError(f"n_terms must lie in [0, {rank}]")
    values = np.zeros((cyl.grid.n_steps + 1, arr.shape[0]))
    moments = []
    for k in range(rank):
        if lam[k] == 0.0:
            moments.append(0.0)
            continue
        if k < n_terms:
            values += lam[k] * np.outer(cyl.evaluate(hs[k]), gs[k])
        if moment_bound is None and cyl.moment_oracle is not None:
            moments.append(cyl.moment_oracle(hs[k]))
    if moment_bound is None:
        moment_bound = max(moments) if moments else 0.0
    tail = float(np.sum(lam[n_terms:] ** 2))
    return RadonifiedPath(cyl.grid, values, 4.0 * moment_bound * tail)


def radonify_adjoint_check(X: RadonifiedPath, cyl: CylindricalMartingalePaths,
                           S, g, t: float) -> float:
    """Residual |<X_t, g> - M_t(S^T g)| of the defining identity."""
    arr = np.atleast_2d(_as_array(S, "S"))
    g = _as_array(g, "g")
    idx = X.grid.index_of(t)
    lhs = float(X.values[idx] @ g)
    rhs = float(cyl.evaluate(arr.T @ g)[idx])
    return abs(lhs - rhs)
