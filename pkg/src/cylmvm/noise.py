"""Sampling of the driving-noise objects on a time grid.

Supported noise kinds (field ``kind`` of :class:`MVMSpec`):

* ``wiener-only``      -- a Q-Wiener process; the mark space is {0}.
* ``levy-mvm``         -- Wiener part plus compensated Poisson jumps with a
  finite atomic jump measure; marks are {0} and one id per jump atom.
* ``cylindrical-levy`` -- Wiener plus compensated jumps folded into the
  single mark 0, with covariance Q + sum rate_k a_k a_k^T.
* ``impulsive``        -- space-time impulses on a finite site grid with
  scalar jump amplitudes; the state dimension is 1, marks are the sites.

Each spec derives the covariance family of its second moments, so the
closed-form oracle E|M((s,t],A)(h)|^2 is always available alongside the
sampled paths. One RNG stream per path is split deterministically into
(wiener, jumps, impulse) substreams so that coupled pathwise identities can
reuse the same noise.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .spaces import (
    CovarianceFamily,
    DimensionMismatchError,
    Mark,
    MarkSpace,
    MeasureSpec,
    PSDOperator,
    TruncatedSpace,
    _as_array,
    psd_sqrt,
)

__all__ = [
    "LevyAtom",
    "GaussianSurrogate",
    "LevyMeasureSpec",
    "TimeGrid",
    "JumpList",
    "ImpulsiveSpec",
    "ImpulsiveEvents",
    "ImpulsivePath",
    "MVMSpec",
    "NoisePathBundle",
    "derive_rng",
    "sample_wiener",
    "sample_jumps",
    "sample_bundle",
    "compensated_poisson_integral",
    "mvm_apply",
    "second_moment_oracle",
    "cylindrical_levy_covariance",
    "sample_impulsive",
    "sample_mvm_ensemble",
]

# fixed substream keys so bundles are reproducible field by field
_WIENER_KEY = 0
_JUMP_KEY = 1
_IMPULSE_KEY = 2


def derive_rng(seed: int, *spawn_key: int) -> np.random.Generator:
    """Deterministic generator for (seed, substream-key) pairs."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))


@dataclass(frozen=True)
class LevyAtom:
    vector: np.ndarray
    rate: float

    def __post_init__(self):
        v = _as_array(self.vector, "atom vector")
        if not np.any(v):
            raise ValueError("jump atoms must be nonzero")
        if self.rate <= 0:
            raise ValueError("atom rates must be positive")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class GaussianSurrogate:
    """Matched-covariance Gaussian stand-in for compensated small jumps."""

    covariance: PSDOperator
    cutoff: float


@dataclass(frozen=True)
class LevyMeasureSpec:
    """Finite atomic jump measure, optionally with a small-jump surrogate."""

    atoms: tuple = ()
    small_jump: Optional[GaussianSurrogate] = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        dims = {a.vector.shape[0] for a in self.atoms}
        if len(dims) > 1:
            raise DimensionMismatchError("atoms live in different dimensions")

    @property
    def dim(self) -> Optional[int]:
        if self.atoms:
            return self.atoms[0].vector.shape[0]
        if self.small_jump is not None:
            return self.small_jump.covariance.space.dim
        return None

    def total_rate(self) -> float:
        return float(sum(a.rate for a in self.atoms))

    def second_moment_operator(self, dim: int) -> np.ndarray:
        """sum_k rate_k a_k a_k^T (plus the surrogate covariance if present)."""
        out = np.zeros((dim, dim))
        for a in self.atoms:
            out += a.rate * np.outer(a.vector, a.vector)
        if self.small_jump is not None:
            out += self.small_jump.covariance.entries
        return out

    def truncate(self, eps: float):
        """Drop atoms with norm below eps.

        Returns (kept spec, tail operator sum_{|a|<eps} rate a a^T). The tail
        operator is the quadratic form of the discarded second moment, i.e.
        the approximation error <h, tail h> reported to the caller.
        """
        kept, dropped = [], []
        for a in self.atoms:
            (kept if np.linalg.norm(a.vector) >= eps else dropped).append(a)
        dim = self.dim or 1
        tail = np.zeros((dim, dim))
        for a in dropped:
            tail += a.rate * np.outer(a.vector, a.vector)
        return LevyMeasureSpec(tuple(kept), self.small_jump), tail


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid 0 = t_0 < ... < t_n = T."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.shape[0] < 2:
            raise ValueError("grid needs at least two points")
        if t[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @staticmethod
    def uniform(T: float, n_steps: int) -> "TimeGrid":
        if T <= 0:
            raise ValueError("horizon must be positive")
        return TimeGrid(np.linspace(0.0, float(T), n_steps + 1))

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"time {t} is not a grid point")
        return idx

    def refine(self, factor: int) -> "TimeGrid":
        pieces = [
            np.linspace(self.times[i], self.times[i + 1], factor, endpoint=False)
            for i in range(self.n_steps)
        ]
        return TimeGrid(np.concatenate(pieces + [self.times[-1:]]))


@dataclass(frozen=True)
class JumpList:
    """Sorted jump events (time in (0,T], atom index into the jump measure)."""

    times: np.ndarray
    atom_indices: np.ndarray
    horizon: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        k = np.asarray(self.atom_indices, dtype=int)
        if t.shape != k.shape:
            raise ValueError("times and atom indices must align")
        if t.size and (np.any(np.diff(t) < 0) or t[0] <= 0 or t[-1] > self.horizon):
            raise ValueError("jump times must be sorted inside (0, T]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "atom_indices", k)

    def __len__(self) -> int:
        return self.times.shape[0]

    def marks(self, nu: LevyMeasureSpec):
        return [nu.atoms[k].vector for k in self.atom_indices]

    def restricted(self, t: float) -> "JumpList":
        keep = self.times <= t + 1e-12 * max(1.0, self.horizon)
        return JumpList(self.times[keep], self.atom_indices[keep], self.horizon)

    def to_csv(self, nu: LevyMeasureSpec) -> str:
        dim = nu.dim or 1
        buf = io.StringIO()
        buf.write("time," + ",".join(f"coord_{i}" for i in range(dim)) + "\n")
        for t, k in zip(self.times, self.atom_indices):
            v = nu.atoms[k].vector
            buf.write(f"{t!r}," + ",".join(repr(float(x)) for x in v) + "\n")
        return buf.getvalue()


@dataclass(frozen=True)
class ImpulsiveSpec:
    """Space-time impulses: site weights zeta and scalar amplitude atoms."""

    zeta: np.ndarray
    scalar_atoms: tuple  # (beta, rate) pairs

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=float)
        if z.ndim != 1 or np.any(z < 0) or not np.any(z > 0):
            raise ValueError("site weights must be nonnegative with positive mass")
        if any(r <= 0 for _, r in self.scalar_atoms):
            raise ValueError("amplitude rates must be positive")
        object.__setattr__(self, "zeta", z)
        object.__setattr__(self, "scalar_atoms", tuple(self.scalar_atoms))

    @property
    def n_sites(self) -> int:
        return self.zeta.shape[0]

    def amplitude_rate(self) -> float:
        return float(sum(r for _, r in self.scalar_atoms))

    def amplitude_mean(self) -> float:
        return float(sum(b * r for b, r in self.scalar_atoms))

    def amplitude_second_moment(self) -> float:
        return float(sum(b * b * r for b, r in self.scalar_atoms))


@dataclass(frozen=True)
class ImpulsiveEvents:
    times: np.ndarray
    site_indices: np.ndarray
    amplitudes: np.ndarray

    def restricted(self, t: float) -> "ImpulsiveEvents":
        keep = self.times <= t + 1e-12
        return ImpulsiveEvents(
            self.times[keep], self.site_indices[keep], self.amplitudes[keep]
        )


class ImpulsivePath:
    """Evaluator f -> (L(t) f over the grid) for one sampled impulse path.

    L(t)f is the sum of f(site) * amplitude over events up to t minus the
    compensator t * sum_x zeta_x f(x) * (mean amplitude rate); linear in f.
    """

    def __init__(self, spec: ImpulsiveSpec, grid: TimeGrid, events: ImpulsiveEvents):
        self.spec = spec
        self.grid = grid
        self.events = events

    def evaluate(self, f, t: float) -> float:
        fx = self._site_values(f)
        keep = self.events.times <= t + 1e-12
        raw = float(np.sum(fx[self.events.site_indices[keep]] * self.events.amplitudes[keep]))
        comp = t * float(self.spec.zeta @ fx) * self.spec.amplitude_mean()
        return raw - comp

    def path(self, f) -> np.ndarray:
        return np.array([self.evaluate(f, t) for t in self.grid.times])

    def _site_values(self, f) -> np.ndarray:
        if callable(f):
            return np.array([float(f(x)) for x in range(self.spec.n_sites)])
        fx = np.asarray(f, dtype=float)
        if fx.shape != (self.spec.n_sites,):
            raise DimensionMismatchError("site function has wrong length")
        return fx


@dataclass(frozen=True)
class MVMSpec:
    """Specification of one samplable martingale-valued-measure noise."""

    kind: str
    dim: int
    wiener_cov: Optional[PSDOperator] = None
    levy: Optional[LevyMeasureSpec] = None
    impulsive: Optional[ImpulsiveSpec] = None

    _KINDS = ("wiener-only", "levy-mvm", "cylindrical-levy", "impulsive")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown spec kind {self.kind!r}")
        if self.wiener_cov is not None and self.wiener_cov.space.dim != self.dim:
            raise DimensionMismatchError("wiener covariance has wrong dimension")
        if self.levy is not None and self.levy.dim not in (None, self.dim):
            raise DimensionMismatchError("jump atoms have wrong dimension")
        if self.kind == "impulsive":
            if self.impulsive is None:
                raise ValueError("impulsive spec needs site/amplitude data")
            if self.dim != 1:
                raise ValueError("impulsive noise lives on a 1-dimensional state")

    # -- constructors -------------------------------------------------
    @staticmethod
    def wiener_only(Q) -> "MVMSpec":
        Q = Q if isinstance(Q, PSDOperator) else PSDOperator.from_matrix(Q)
        return MVMSpec("wiener-only", Q.space.dim, wiener_cov=Q)

    @staticmethod
    def levy_mvm(Q, nu: LevyMeasureSpec) -> "MVMSpec":
        if Q is None:
            if nu.dim is None:
                raise ValueError("need a dimension from Q or the atoms")
            return MVMSpec("levy-mvm", nu.dim, wiener_cov=None, levy=nu)
        Q = Q if isinstance(Q, PSDOperator) else PSDOperator.from_matrix(Q)
        return MVMSpec("levy-mvm", Q.space.dim, wiener_cov=Q, levy=nu)

    @staticmethod
    def cylindrical_levy(Q, nu: LevyMeasureSpec) -> "MVMSpec":
        Q = Q if isinstance(Q, PSDOperator) else PSDOperator.from_matrix(Q)
        return MVMSpec("cylindrical-levy", Q.space.dim, wiener_cov=Q, levy=nu)

    @staticmethod
    def impulsive_mvm(imp: ImpulsiveSpec) -> "MVMSpec":
        return MVMSpec("impulsive", 1, impulsive=imp)

    # -- derived structure --------------------------------------------
    def mark_space(self) -> MarkSpace:
        if self.kind == "impulsive":
            return MarkSpace(
                tuple(Mark(x, "site") for x in range(self.impulsive.n_sites))
            )
        marks = [Mark(0, "zero", np.zeros(self.dim))]
        if self.kind == "levy-mvm" and self.levy is not None:
            marks += [
                Mark(k + 1, "atom", a.vector) for k, a in enumerate(self.levy.atoms)
            ]
        return MarkSpace(tuple(marks))

    def mark_weight(self, mark_id: int) -> float:
        """mu-weight of one mark (delta_0 carries weight 1)."""
        if self.kind == "impulsive":
            return float(self.impulsive.zeta[mark_id])
        if mark_id == 0:
            return 1.0
        return self.levy.atoms[mark_id - 1].rate

    def mark_operator(self, mark_id: int) -> np.ndarray:
        """Covariance operator Q_{r,u} of one mark (time-homogeneous)."""
        if self.kind == "impulsive":
            return np.array([[self.impulsive.amplitude_second_moment()]])
        if mark_id == 0:
            Q = np.zeros((self.dim, self.dim))
            if self.wiener_cov is not None:
                Q = Q + self.wiener_cov.entries
            if self.levy is not None and self.levy.small_jump is not None:
                Q = Q + self.levy.small_jump.covariance.entries
            if self.kind == "cylindrical-levy" and self.levy is not None:
                for a in self.levy.atoms:
                    Q = Q + a.rate * np.outer(a.vector, a.vector)
            return Q
        a = self.levy.atoms[mark_id - 1]
        return np.outer(a.vector, a.vector)

    def covariance_family(self, horizon: float = np.inf) -> CovarianceFamily:
        space = TruncatedSpace(self.dim, "H")
        mark_space = self.mark_space()

        def evaluate(r, u):
            return PSDOperator(space, self.mark_operator(u))

        atoms = tuple((m, self.mark_weight(m)) for m in mark_space.ids())
        end = horizon if np.isfinite(horizon) else 1.0
        return CovarianceFamily(
            evaluator=evaluate,
            time_measure=MeasureSpec.lebesgue(0.0, end),
            mark_measure=MeasureSpec.atomic(atoms),
            mark_space=mark_space,
            dim=self.dim,
        )

    def has_wiener(self) -> bool:
        return self.wiener_cov is not None or (
            self.levy is not None and self.levy.small_jump is not None
        )

    def has_jumps(self) -> bool:
        return self.levy is not None and len(self.levy.atoms) > 0

    def effective_wiener_cov(self) -> np.ndarray:
        Q = np.zeros((self.dim, self.dim))
        if self.wiener_cov is not None:
            Q = Q + self.wiener_cov.entries
        if self.levy is not None and self.levy.small_jump is not None:
            Q = Q + self.levy.small_jump.covariance.entries
        return Q

    def wiener_part(self) -> "MVMSpec":
        return replace(self, levy=LevyMeasureSpec() if self.levy else None)

    def jump_part(self) -> "MVMSpec":
        return replace(self, wiener_cov=None)

    def compensator_rate(self) -> np.ndarray:
        """sum_k rate_k a_k, the per-unit-time jump compensator drift."""
        out = np.zeros(self.dim)
        if self.levy is not None:
            for a in self.levy.atoms:
                out += a.rate * a.vector
        return out


@dataclass(frozen=True)
class NoisePathBundle:
    """All sampled driving noise of one path on one grid.

    Immutable; `restricted(t)` returns a copy with everything after t
    dropped (used to hand predictable functionals only their past), and
    `scrambled_after(t, seed)` swaps the future for fresh noise (used to
    detect integrands that peek ahead).
    """

    grid: TimeGrid
    spec: MVMSpec
    rng_seed: int
    wiener_increments: Optional[np.ndarray] = None  # (n_steps, dim)
    jumps: Optional[JumpList] = None
    impulse_events: Optional[ImpulsiveEvents] = None
    restricted_to: Optional[float] = None

    def wiener_cum(self) -> np.ndarray:
        """Wiener path at grid points, shape (n_steps + 1, dim)."""
        if self.wiener_increments is None:
            return np.zeros((self.grid.n_steps + 1, self.spec.dim))
        out = np.zeros((self.grid.n_steps + 1, self.spec.dim))
        np.cumsum(self.wiener_increments, axis=0, out=out[1:])
        return out

    def jump_step_sums(self) -> np.ndarray:
        """Per-step sums of jump vectors, shape (n_steps, dim)."""
        out = np.zeros((self.grid.n_steps, self.spec.dim))
        if self.jumps is not None and len(self.jumps):
            steps = np.searchsorted(self.grid.times, self.jumps.times, side="left") - 1
            steps = np.clip(steps, 0, self.grid.n_steps - 1)
            for s, k in zip(steps, self.jumps.atom_indices):
                out[s] += self.spec.levy.atoms[k].vector
        return out

    def jump_step_counts(self) -> np.ndarray:
        """Per-step, per-atom jump counts, shape (n_steps, n_atoms)."""
        n_atoms = len(self.spec.levy.atoms) if self.spec.levy else 0
        out = np.zeros((self.grid.n_steps, n_atoms))
        if self.jumps is not None and len(self.jumps):
            steps = np.searchsorted(self.grid.times, self.jumps.times, side="left") - 1
            steps = np.clip(steps, 0, self.grid.n_steps - 1)
            np.add.at(out, (steps, self.jumps.atom_indices), 1.0)
        return out

    def impulse_step_events(self, i: int) -> ImpulsiveEvents:
        ev = self.impulse_events
        lo, hi = self.grid.times[i], self.grid.times[i + 1]
        keep = (ev.times > lo) & (ev.times <= hi + 1e-15)
        return ImpulsiveEvents(ev.times[keep], ev.site_indices[keep], ev.amplitudes[keep])

    def restricted(self, t: float) -> "NoisePathBundle":
        idx = self.grid.index_of(t)
        w = None
        if self.wiener_increments is not None:
            w = self.wiener_increments.copy()
            w[idx:] = 0.0
        jumps = self.jumps.restricted(t) if self.jumps is not None else None
        imp = self.impulse_events.restricted(t) if self.impulse_events is not None else None
        return replace(
            self, wiener_increments=w, jumps=jumps, impulse_events=imp, restricted_to=t
        )

    def scrambled_after(self, t: float, seed: int) -> "NoisePathBundle":
        idx = self.grid.index_of(t)
        fresh = sample_bundle(self.spec, self.grid, seed)
        w = self.wiener_increments
        if w is not None:
            w = w.copy()
            w[idx:] = fresh.wiener_increments[idx:]
        jumps = self.jumps
        if jumps is not None:
            past = jumps.restricted(t)
            future = fresh.jumps
            keep = future.times > t
            jumps = JumpList(
                np.concatenate([past.times, future.times[keep]]),
                np.concatenate([past.atom_indices, future.atom_indices[keep]]),
                self.grid.T,
            )
        imp = self.impulse_events
        if imp is not None:
            past = imp.restricted(t)
            fut = fresh.impulse_events
            keep = fut.times > t
            imp = ImpulsiveEvents(
                np.concatenate([past.times, fut.times[keep]]),
                np.concatenate([past.site_indices, fut.site_indices[keep]]),
                np.concatenate([past.amplitudes, fut.amplitudes[keep]]),
            )
        return replace(
            self, wiener_increments=w, jumps=jumps, impulse_events=imp
        )

    def without_jumps(self) -> "NoisePathBundle":
        empty = JumpList(np.empty(0), np.empty(0, dtype=int), self.grid.T)
        return replace(self, jumps=empty if self.jumps is not None else None,
                       spec=self.spec.wiener_part())

    def without_wiener(self) -> "NoisePathBundle":
        w = None
        if self.wiener_increments is not None:
            w = np.zeros_like(self.wiener_increments)
        return replace(self, wiener_increments=w, spec=self.spec.jump_part())

    def coarsen(self, factor: int) -> "NoisePathBundle":
        n = self.grid.n_steps
        if n % factor:
            raise ValueError("step count not divisible by coarsening factor")
        coarse = TimeGrid(self.grid.times[::factor])
        w = None
        if self.wiener_increments is not None:
            w = self.wiener_increments.reshape(n // factor, factor, -1).sum(axis=1)
        return replace(self, grid=coarse, wiener_increments=w)

    def increments_to_csv(self) -> str:
        buf = io.StringIO()
        d = self.spec.dim
        buf.write("time," + ",".join(f"coord_{i}" for i in range(d)) + "\n")
        if self.wiener_increments is not None:
            for t, row in zip(self.grid.times[1:], self.wiener_increments):
                buf.write(f"{t!r}," + ",".join(repr(float(x)) for x in row) + "\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# sampling


def sample_wiener(Q, grid: TimeGrid, seed) -> np.ndarray:
    """Per-step Q-Wiener increments with covariance dt_i * Q.

    Uses the symmetric square root of Q against standard normals, which is
    exact in distribution at the truncation level.
    """
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, _WIENER_KEY)
    Qm = np.atleast_2d(_as_array(Q, "Q"))
    root = psd_sqrt(Qm)
    z = rng.standard_normal((grid.n_steps, Qm.shape[0]))
    return (z * np.sqrt(grid.dt)[:, None]) @ root.T


def sample_jumps(nu: LevyMeasureSpec, T: float, seed) -> JumpList:
    """Merged Poisson event lists, one independent process per atom."""
    if T <= 0:
        raise ValueError("horizon must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, _JUMP_KEY)
    times, idx = [], []
    for k, atom in enumerate(nu.atoms):
        n = rng.poisson(atom.rate * T)
        if n:
            t = (1.0 - rng.random(n)) * T  # lands in (0, T]
            times.append(t)
            idx.append(np.full(n, k, dtype=int))
    if not times:
        return JumpList(np.empty(0), np.empty(0, dtype=int), T)
    t = np.concatenate(times)
    k = np.concatenate(idx)
    order = np.lexsort((k, t))
    return JumpList(t[order], k[order], T)


def _sample_impulse_events(imp: ImpulsiveSpec, T: float, rng) -> ImpulsiveEvents:
    zeta_tot = float(imp.zeta.sum())
    amp_rate = imp.amplitude_rate()
    n = rng.poisson(T * zeta_tot * amp_rate)
    times = np.sort((1.0 - rng.random(n)) * T)
    sites = rng.choice(imp.n_sites, size=n, p=imp.zeta / zeta_tot)
    betas = np.array([b for b, _ in imp.scalar_atoms])
    rates = np.array([r for _, r in imp.scalar_atoms])
    amp = betas[rng.choice(len(betas), size=n, p=rates / rates.sum())] if n else np.empty(0)
    return ImpulsiveEvents(times, sites, amp)


def sample_bundle(spec: MVMSpec, grid: TimeGrid, seed: int) -> NoisePathBundle:
    """Sample every noise component of one path; bit-reproducible from seed."""
    w = None
    if spec.has_wiener():
        w = sample_wiener(spec.effective_wiener_cov(), grid, derive_rng(seed, _WIENER_KEY))
    jumps = None
    if spec.levy is not None:
        jumps = sample_jumps(spec.levy, grid.T, derive_rng(seed, _JUMP_KEY))
    impulses = None
    if spec.kind == "impulsive":
        impulses = _sample_impulse_events(spec.impulsive, grid.T, derive_rng(seed, _IMPULSE_KEY))
    return NoisePathBundle(
        grid=grid,
        spec=spec,
        rng_seed=seed,
        wiener_increments=w,
        jumps=jumps,
        impulse_events=impulses,
    )


def sample_impulsive(imp: ImpulsiveSpec, grid: TimeGrid, seed: int) -> ImpulsivePath:
    """Impulsive path evaluator f -> L(.)f on the grid."""
    events = _sample_impulse_events(imp, grid.T, derive_rng(seed, _IMPULSE_KEY))
    return ImpulsivePath(imp, grid, events)


# ---------------------------------------------------------------------------
# pathwise evaluation and closed-form second moments


def compensated_poisson_integral(f, A, jumps: JumpList, nu: LevyMeasureSpec, t: float):
    """sum_{jumps <= t, atom in A} f(mark) - t * sum_{atoms in A} rate * f(mark).

    `A` is a set of atom indices into `nu`; `f` maps a mark vector to a
    vector value.
    """
    A = frozenset(A)
    if not nu.atoms:
        return 0.0
    out = np.zeros_like(np.asarray(f(nu.atoms[0].vector), dtype=float))
    for time, k in zip(jumps.times, jumps.atom_indices):
        if time <= t + 1e-15 and k in A:
            out = out + np.asarray(f(nu.atoms[k].vector), dtype=float)
    for k, atom in enumerate(nu.atoms):
        if k in A:
            out = out - t * atom.rate * np.asarray(f(atom.vector), dtype=float)
    return out


def _check_mark_set(spec: MVMSpec, A) -> frozenset:
    A = frozenset(A)
    valid = set(spec.mark_space().ids())
    if not A <= valid:
        raise ValueError(f"mark set {sorted(A)} not inside the mark space {sorted(valid)}")
    return A


def mvm_apply(spec: MVMSpec, paths: NoisePathBundle, interval, A, h) -> float:
    """Sampled value of M((s,t], A)(h); additive in disjoint A pathwise."""
    s, t = interval
    A = _check_mark_set(spec, A)
    h = _as_array(h, "h")
    i0, i1 = paths.grid.index_of(s), paths.grid.index_of(t)
    if i1 < i0:
        raise ValueError("interval must satisfy s <= t")
    out = 0.0
    if spec.kind == "impulsive":
        ev = paths.impulse_events
        keep = (ev.times > s) & (ev.times <= t + 1e-15)
        sel = keep & np.isin(ev.site_indices, list(A))
        raw = float(ev.amplitudes[sel].sum())
        comp = (t - s) * float(spec.impulsive.zeta[list(A)].sum()) * spec.impulsive.amplitude_mean()
        return float(h[0]) * (raw - comp)
    if 0 in A:
        cum = paths.wiener_cum()
        out += float((cum[i1] - cum[i0]) @ h)
        if spec.kind == "cylindrical-levy" and paths.jumps is not None:
            atoms = frozenset(range(len(spec.levy.atoms)))
            val = compensated_poisson_integral(lambda v: v @ h, atoms, paths.jumps, spec.levy, t)
            val -= compensated_poisson_integral(lambda v: v @ h, atoms, paths.jumps, spec.levy, s)
            out += float(val)
    if spec.kind == "levy-mvm" and paths.jumps is not None:
        atom_ids = frozenset(k - 1 for k in A if k != 0)
        if atom_ids:
            val = compensated_poisson_integral(lambda v: v @ h, atom_ids, paths.jumps, spec.levy, t)
            val -= compensated_poisson_integral(lambda v: v @ h, atom_ids, paths.jumps, spec.levy, s)
            out += float(val)
    return out


def mvm_window_process(spec, paths, s, t, A, h) -> np.ndarray:
    """r -> M((s ^ r, t ^ r], A)(h) over all grid points, vectorized."""
    grid = paths.grid
    A = _check_mark_set(spec, A)
    h = _as_array(h, "h")
    i0, i1 = grid.index_of(s), grid.index_of(t)
    scalar_cum = np.zeros(grid.n_steps + 1)
    if spec.kind == "impulsive":
        ev = paths.impulse_events
        steps = np.searchsorted(grid.times, ev.times, side="left") - 1
        steps = np.clip(steps, 0, grid.n_steps - 1)
        sel = np.isin(ev.site_indices, list(A))
        per_step = np.zeros(grid.n_steps)
        np.add.at(per_step, steps[sel], ev.amplitudes[sel])
        rate = float(spec.impulsive.zeta[list(A)].sum()) * spec.impulsive.amplitude_mean()
        scalar_cum[1:] = np.cumsum(per_step - rate * grid.dt)
        scalar_cum *= float(h[0])
    else:
        if 0 in A:
            scalar_cum += paths.wiener_cum() @ h
        atom_ids: tuple = ()
        if spec.kind == "cylindrical-levy" and 0 in A and spec.levy is not None:
            atom_ids = tuple(range(len(spec.levy.atoms)))
        elif spec.kind == "levy-mvm":
            atom_ids = tuple(sorted(k - 1 for k in A if k != 0))
        if spec.levy is not None and atom_ids:
            counts = paths.jump_step_counts()[:, atom_ids]
            inner = np.array([spec.levy.atoms[k].vector @ h for k in atom_ids])
            rates = np.array([spec.levy.atoms[k].rate for k in atom_ids])
            per_step = counts @ inner - grid.dt * (rates @ inner)
            scalar_cum[1:] += np.cumsum(per_step)
    clipped_hi = np.minimum(np.arange(grid.n_steps + 1), i1)
    clipped = np.maximum(clipped_hi, i0)
    vals = scalar_cum[clipped] - scalar_cum[i0]
    return vals


def second_moment_oracle(spec: MVMSpec, interval, A, h) -> float:
    """Closed-form E|M((s,t],A)(h)|^2 by quadrature over the derived family."""
    from scipy.integrate import quad

    s, t = interval
    if t < s:
        raise ValueError("interval must satisfy s <= t")
    A = _check_mark_set(spec, A)
    h = _as_array(h, "h")
    fam = spec.covariance_family()

    def mark_sum(r):
        return sum(
            w * float(h @ fam.operator(r, u).entries @ h)
            for u, w in fam.mark_measure.atoms
            if u in A
        )

    if fam.time_measure.kind == "atomic":
        return float(sum(w * mark_sum(r) for r, w in fam.time_measure.atoms if s < r <= t))
    val, _ = quad(mark_sum, s, t, limit=200)
    return float(val)


def cylindrical_levy_covariance(Q, nu: LevyMeasureSpec) -> PSDOperator:
    """Covariance of a square-integrable cylindrical Levy process:
    Q plus sum rate_k a_k a_k^T."""
    Q = Q if isinstance(Q, PSDOperator) else PSDOperator.from_matrix(Q)
    return PSDOperator(Q.space, Q.entries + nu.second_moment_operator(Q.space.dim))


# ---------------------------------------------------------------------------
# vectorized ensemble sampling (distribution level, for large-N estimates)


def sample_mvm_ensemble(spec, interval, A, H, n_paths: int, seed: int) -> np.ndarray:
    """n_paths i.i.d. draws of (M((s,t],A)(h_j))_j for the columns h_j of H.

    Jump channels are sampled as per-interval Poisson counts, which agrees
    in distribution with exact event times at interval resolution. Shares
    the underlying draws across the h_j, so joint statistics are honest.
    """
    s, t = interval
    A = _check_mark_set(spec, A)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[0] != spec.dim:
        H = H.T
    if H.shape[0] != spec.dim:
        raise DimensionMismatchError("probe vectors have wrong dimension")
    rng = derive_rng(seed, 7)
    span = t - s
    out = np.zeros((n_paths, H.shape[1]))
    if spec.kind == "impulsive":
        for x in sorted(A):
            w = float(spec.impulsive.zeta[x])
            for beta, rate in spec.impulsive.scalar_atoms:
                lam = span * w * rate
                c = rng.poisson(lam, size=n_paths)
                out += np.outer((c - lam) * beta, H[0])
        return out
    if 0 in A and spec.has_wiener():
        root = psd_sqrt(spec.effective_wiener_cov())
        z = rng.standard_normal((n_paths, spec.dim))
        out += np.sqrt(span) * z @ root.T @ H
    atom_ids: tuple = ()
    if spec.kind == "cylindrical-levy" and 0 in A and spec.levy is not None:
        atom_ids = tuple(range(len(spec.levy.atoms)))
    elif spec.kind == "levy-mvm":
        atom_ids = tuple(sorted(k - 1 for k in A if k != 0))
    for k in atom_ids:
        atom = spec.levy.atoms[k]
        lam = atom.rate * span
        c = rng.poisson(lam, size=n_paths)
        out += np.outer(c - lam, atom.vector @ H)
    return out
