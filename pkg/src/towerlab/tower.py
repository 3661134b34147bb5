"""Finite full-branch towers: exact transfer iteration, Kac density, TV decay.

A model has branches i = 1..N with base mass p_i and return time R_i.  The
tower has cells (i, l), 0 <= l < R_i, each of reference mass p_i.  The map
climbs one level per step; from the top of branch i it lands on the ground
spread over branch j with weight p_j.  Densities that are constant on cells
stay constant on cells, so iteration is exact linear algebra.

Cells are stored flat: cell (i, l) sits at ``offsets[i] + l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, reduce

import numpy as np

from ._io import write_csv
from .errors import ConfigError, PeriodicTower, ProbeTooShort

__all__ = [
    "FiniteTowerModel",
    "TowerStateIndex",
    "DensityVector",
    "power_law_model",
    "random_model",
    "bundled_model",
    "from_cells",
    "step_density",
    "push_forward",
    "invariant_density",
    "tv_distance",
    "tv_decay",
    "hat_R",
    "hat_R_tail",
    "return_tail",
    "ground_return_masses",
    "find_n0_gamma0",
    "shrink_surrogate",
    "write_tower_csv",
    "write_tv_csv",
]


@dataclass(frozen=True)
class FiniteTowerModel:
    p: np.ndarray
    R: np.ndarray
    # open mass folded into p when built from a truncated partition
    redistributed_mass: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.int64)
        if p.ndim != 1 or p.shape != R.shape or p.size == 0:
            raise ConfigError("p and R must be nonempty 1-d arrays of equal length")
        if np.any(p <= 0):
            raise ConfigError("branch masses must be positive")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError(f"branch masses sum to {p.sum()!r}, not 1")
        if np.any(R < 1):
            raise ConfigError("return times must be >= 1")
        p.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "R", R)

    @property
    def n_branches(self) -> int:
        return int(self.p.size)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.R)[:-1]]).astype(np.int64)

    @property
    def n_cells(self) -> int:
        return int(self.R.sum())

    @cached_property
    def tops(self) -> np.ndarray:
        return self.offsets + self.R - 1

    @cached_property
    def cell_mass(self) -> np.ndarray:
        """Reference mass of each flat cell (p_i on every level of branch i)."""
        return np.repeat(self.p, self.R)

    @cached_property
    def cell_branch(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_branches), self.R)

    @cached_property
    def cell_level(self) -> np.ndarray:
        return np.arange(self.n_cells) - np.repeat(self.offsets, self.R)

    @cached_property
    def ground_mask(self) -> np.ndarray:
        return self.cell_level == 0

    @cached_property
    def mean_return(self) -> float:
        return float(self.p @ self.R)

    @cached_property
    def gcd(self) -> int:
        return int(reduce(math.gcd, (int(r) for r in self.R)))

    def index(self, s: "TowerStateIndex") -> int:
        if not (0 <= s.branch < self.n_branches and 0 <= s.level < self.R[s.branch]):
            raise ValueError(f"invalid tower state {s}")
        return int(self.offsets[s.branch] + s.level)


@dataclass(frozen=True)
class TowerStateIndex:
    branch: int  # 0-based
    level: int


@dataclass
class DensityVector:
    """Cell values of a density with respect to the reference measure."""

    model: FiniteTowerModel = field(repr=False)
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.model.n_cells,):
            raise ValueError("density has the wrong number of cells")
        if np.any(self.values < 0):
            raise ValueError("densities are nonnegative")

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.model.cell_mass

    @property
    def mass(self) -> float:
        return float(self.masses.sum())

    @classmethod
    def point_mass(cls, model, state: TowerStateIndex):
        """Unit mass spread uniformly over one cell."""
        v = np.zeros(model.n_cells)
        i = model.index(state)
        v[i] = 1.0 / model.cell_mass[i]
        return cls(model, v)

    @classmethod
    def ground(cls, model):
        """Reference measure restricted to the ground level (mass 1)."""
        return cls(model, model.ground_mask.astype(np.float64))

    @classmethod
    def uniform(cls, model):
        return cls(model, np.full(model.n_cells, 1.0 / model.mean_return))

    @classmethod
    def random(cls, model, rng: np.random.Generator):
        m = rng.random(model.n_cells)
        return cls(model, m / (m @ model.cell_mass))


# ---------------------------------------------------------------------------
# constructors


def power_law_model(n_branches: int, zeta: float) -> FiniteTowerModel:
    """R_i = i and p_i proportional to i^-(zeta+1), so m{R > n} ~ n^-zeta."""
    i = np.arange(1, n_branches + 1, dtype=np.float64)
    w = i ** -(zeta + 1.0)
    return FiniteTowerModel(w / w.sum(), i.astype(np.int64))


def bundled_model() -> FiniteTowerModel:
    """Small aperiodic model used for exact coupling audits."""
    return FiniteTowerModel([0.4, 0.3, 0.2, 0.1], [1, 2, 3, 5])


def random_model(rng: np.random.Generator, n_branches: int, max_return: int = 20) -> FiniteTowerModel:
    """Random aperiodic model; R_1 = 1 keeps the gcd at 1."""
    w = rng.random(n_branches) + 0.05
    R = rng.integers(1, max_return + 1, size=n_branches)
    R[0] = 1
    return FiniteTowerModel(w / w.sum(), R)


def from_cells(cells, aggregate: bool = True) -> FiniteTowerModel:
    """Model from the closed cells of a first-return partition.

    Base masses are cell lengths over the total closed length, which spreads
    the open (truncated) mass proportionally; that mass is recorded.  With
    ``aggregate`` cells sharing a return time merge into one branch, which
    leaves every cell-constant quantity unchanged.
    """
    idx = cells.closed_indices()
    lens = np.asarray(cells.lengths[idx], dtype=np.float64)
    R = np.asarray(cells.r_star[idx], dtype=np.int64)
    total = float(np.asarray(cells.lengths, dtype=np.float64).sum())
    open_mass = total - float(lens.sum())
    if aggregate:
        R, inv = np.unique(R, return_inverse=True)
        lens = np.bincount(inv, weights=lens)
    return FiniteTowerModel(lens / lens.sum(), R, redistributed_mass=open_mass / total)


# ---------------------------------------------------------------------------
# transfer iteration


def step_density(model: FiniteTowerModel, d: DensityVector) -> DensityVector:
    """Exact push-forward of a cell-constant density by one step."""
    vals = np.empty(model.n_cells)
    vals[1:] = d.values[:-1]
    inflow = float(d.masses[model.tops].sum())
    vals[model.offsets] = inflow
    return DensityVector(model, vals)


def push_forward(model: FiniteTowerModel, d: DensityVector, n: int) -> DensityVector:
    for _ in range(n):
        d = step_density(model, d)
    return d


def invariant_density(model: FiniteTowerModel) -> DensityVector:
    """Kac density: the constant 1 / sum_i p_i R_i on every cell."""
    if model.gcd != 1:
        raise PeriodicTower(f"gcd of return times is {model.gcd}; no mixing invariant density")
    return DensityVector.uniform(model)


def tv_distance(model: FiniteTowerModel, a: DensityVector, b: DensityVector) -> float:
    """L1 distance of the two densities with respect to the reference measure."""
    return float(np.abs(a.values - b.values) @ model.cell_mass)


def tv_decay(model: FiniteTowerModel, lam: DensityVector, lam2: DensityVector, n_max: int) -> np.ndarray:
    """|F^n lam - F^n lam2| for n = 0..n_max.

    The difference is propagated directly, since the step is linear.
    """
    diff = lam.masses - lam2.masses
    out = np.empty(n_max + 1)
    tops, offs, p = model.tops, model.offsets, model.p
    for n in range(n_max + 1):
        out[n] = np.abs(diff).sum()
        inflow = diff[tops].sum()
        diff[1:] = diff[:-1].copy()
        diff[offs] = p * inflow
    return out


# ---------------------------------------------------------------------------
# return times


def hat_R(model: FiniteTowerModel, s: TowerStateIndex) -> int:
    """Steps until the ground: 0 on the ground, R_i - l above it."""
    model.index(s)
    return 0 if s.level == 0 else int(model.R[s.branch] - s.level)


def return_tail(model: FiniteTowerModel, n_max: int) -> np.ndarray:
    """m{R > n} on the base, for n = 0..n_max."""
    n = np.arange(n_max + 1)
    return np.array([model.p[model.R > k].sum() for k in n])


def hat_R_tail(model: FiniteTowerModel, n_max: int, direct: bool = True) -> np.ndarray:
    """Reference mass of {hat R > n} on the tower, n = 0..n_max.

    ``direct`` counts cells; otherwise the sum over l > n of m{R > l} is used.
    """
    if direct:
        hr = np.where(model.ground_mask, 0, model.R[model.cell_branch] - model.cell_level)
        return np.array([model.cell_mass[hr > n].sum() for n in range(n_max + 1)])
    # m{R > l} for l up to max R; beyond that it vanishes
    rt = return_tail(model, int(model.R.max()) + 1)
    return np.array([rt[n + 1:].sum() for n in range(n_max + 1)])


def ground_return_masses(model: FiniteTowerModel, n_probe: int) -> np.ndarray:
    """u_n = m(F^-n(ground) intersected with ground) for n = 0..n_probe."""
    mu = DensityVector.ground(model).masses
    out = np.empty(n_probe + 1)
    tops, offs, p, g = model.tops, model.offsets, model.p, model.offsets
    for n in range(n_probe + 1):
        out[n] = mu[g].sum()
        inflow = mu[tops].sum()
        mu[1:] = mu[:-1].copy()
        mu[offs] = p * inflow
    return out


def find_n0_gamma0(model: FiniteTowerModel, n_probe: int = 1000) -> tuple[int, float]:
    """Smallest n0 >= 1 with u_n >= gamma0 for all n0 <= n <= n_probe.

    gamma0 is half the mixing limit m(ground) * nu(ground) = 1 / sum p_i R_i.
    """
    if model.gcd != 1:
        raise PeriodicTower(f"gcd of return times is {model.gcd}")
    u = ground_return_masses(model, n_probe)
    limit = 1.0 / model.mean_return
    gamma0 = 0.5 * limit
    bad = np.nonzero(u[1:] < gamma0)[0]
    n0 = int(bad[-1]) + 2 if bad.size else 1
    tail = u[max(n0, n_probe // 2):]
    if n0 > n_probe // 2 or np.max(np.abs(tail - limit)) > 0.25 * limit:
        raise ProbeTooShort(f"return masses have not settled by n = {n_probe}")
    return n0, gamma0


# ---------------------------------------------------------------------------
# shrinking of projected tower cells


@dataclass
class ShrinkReport:
    k: np.ndarray
    measured: np.ndarray  # max |pi(cell)| over tower cells with hat R > k
    envelope: np.ndarray  # max(beta^k, delta_k)
    ratio: np.ndarray


def shrink_surrogate(cells, delta, beta: float) -> ShrinkReport:
    """Projected cell sizes on the example tower against max(beta^k, delta_k).

    The tower cell (P, l) projects to f^l(P); its size is measured by pushing
    the endpoints of every closed cell forward, independently of the
    regrouping behind ``delta``.
    """
    from . import circle_map as cm

    params = cells.params
    idx = cells.closed_indices()
    a = np.asarray(cells.a[idx], dtype=np.longdouble)
    b = np.asarray(cells.b[idx], dtype=np.longdouble)
    R = np.asarray(cells.r_star[idx], dtype=np.int64)
    k_max = int(delta.k[-1])
    measured = np.zeros(k_max + 1)
    for ell in range(int(R.max())):
        live = R > ell
        if not live.any():
            break
        lens = np.asarray(np.mod(b[live] - a[live], np.longdouble(1)), dtype=np.float64)
        rem = R[live] - ell
        # a cell at level l with hat R = rem counts for every k < rem
        top = np.minimum(rem - 1, k_max)
        order = np.argsort(top)
        best = np.maximum.accumulate(lens[order][::-1])[::-1]
        ks = np.arange(1, k_max + 1)
        pos = np.searchsorted(top[order], ks, side="left")
        ok = pos < order.size
        measured[1:][ok] = np.maximum(measured[1:][ok], best[pos[ok]])
        a[live] = cm.eval(params, a[live])
        b[live] = cm.eval(params, b[live])
        a, b = a.copy(), b.copy()
    ks = np.asarray(delta.k)
    env = np.maximum(beta ** ks, np.asarray(delta.delta))
    meas = measured[ks]
    return ShrinkReport(ks, meas, env, meas / env)


def write_tower_csv(path, model: FiniteTowerModel):
    rows = ((i + 1, float(p), int(r)) for i, (p, r) in enumerate(zip(model.p, model.R)))
    return write_csv(path, ["i", "p_i", "R_i"], rows)


def write_tv_csv(path, tv):
    return write_csv(path, ["n", "tv"], ((n, float(v)) for n, v in enumerate(tv)))
