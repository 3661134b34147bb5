"""Degree-d intermittent circle map with a neutral fixed point at 0.

The circle is parameterized by [-1/2, 1/2).  On that chart the lift is

    F(x) = x * (1 + (d - 1) * (2|x|)**gamma),   |x| <= 1/2,

extended by F(x + 1) = F(x) + d, and the map is f = F mod 1.  For d = 2 this
is x(1 + (2|x|)**gamma).  f(0) = 0, f'(0) = 1 and f' > 1 elsewhere.

All array routines keep the dtype of their input, so the same code runs in
float64 or in np.longdouble when tiny intervals need the extra digits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

from .errors import ConfigError, OutOfBranchImage

__all__ = [
    "CircleMapParams",
    "Branch",
    "BoundarySequences",
    "lift",
    "eval",
    "deriv",
    "reduce_circle",
    "branch_of",
    "inverse_lift",
    "inverse_branch",
    "boundary_sequences",
]


@dataclass(frozen=True)
class Branch:
    """One fundamental domain, in extended chart coordinates.

    ``lo``/``hi`` may exceed 1/2 only for the middle branch of an odd degree,
    which straddles the chart seam.  The lift maps [lo, hi] increasingly onto
    [k, k + 1].
    """

    index: int
    lo: float
    hi: float
    k: int

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class CircleMapParams:
    gamma: float
    degree: int = 2

    def __post_init__(self):
        g = self.gamma
        if not isinstance(g, (int, float)) or not math.isfinite(g) or g <= 0:
            raise ConfigError(f"gamma must be a finite positive number, got {g!r}")
        if int(self.degree) != self.degree or self.degree < 2:
            raise ConfigError(f"degree must be an integer >= 2, got {self.degree!r}")
        object.__setattr__(self, "gamma", float(g))
        object.__setattr__(self, "degree", int(self.degree))

    @cached_property
    def branches(self) -> tuple[Branch, ...]:
        """Fundamental domains I_1..I_d; I_1 starts at 0 and I_d ends at 0."""
        return _fundamental_domains(self)

    @property
    def x0(self) -> float:
        """Non-zero endpoint of I_1."""
        return self.branches[0].hi

    @property
    def x0_prime(self) -> float:
        """Non-zero endpoint of I_d (negative)."""
        return self.branches[-1].lo


def _as_array(x, dtype=None):
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


def _restore(arr, like):
    """Hand back a Python float for float scalar input, else an array."""
    arr = np.asarray(arr)
    if np.ndim(like) == 0 and not isinstance(like, np.ndarray):
        return arr.item() if arr.dtype == np.float64 else arr[()]
    return arr


def _reduce(a):
    return a - np.floor(a + a.dtype.type(0.5))


def reduce_circle(x):
    """Reduce chart coordinates to [-1/2, 1/2)."""
    return _restore(_reduce(_as_array(x)), x)


def _lift_core(gamma, dm1, a):
    """Lift on the extended chart: values beyond 1/2 use F(x) = F(x - 1) + d."""
    one = a.dtype.type(1)
    two = a.dtype.type(2)
    g = a.dtype.type(gamma)
    shift = np.where(a > a.dtype.type(0.5), one, a.dtype.type(0))
    u = a - shift
    val = u * (one + a.dtype.type(dm1) * (two * np.abs(u)) ** g)
    return val + shift * a.dtype.type(dm1 + 1)


def lift(params: CircleMapParams, x):
    """Lift F on the extended chart [-1/2, 3/2)."""
    a = _as_array(x)
    return _restore(_lift_core(params.gamma, params.degree - 1, a), x)


def eval(params: CircleMapParams, x):  # noqa: A001  (operation name)
    """f(x) reduced to [-1/2, 1/2); exact fixed point at 0."""
    a = _as_array(x)
    y = _lift_core(params.gamma, params.degree - 1, _reduce(a))
    return _restore(_reduce(y), x)


def deriv(params: CircleMapParams, x):
    """f'(x) = 1 + (d - 1)(1 + gamma)(2|x|)**gamma."""
    a = _reduce(_as_array(x))
    t = a.dtype.type
    val = t(1) + t((params.degree - 1) * (1.0 + params.gamma)) * (t(2) * np.abs(a)) ** t(params.gamma)
    return _restore(val, x)


@numba.njit(cache=True)
def _f_ext_nb(gamma, dm1, x):
    if x > 0.5:
        u = x - 1.0
        return u * (1.0 + dm1 * (2.0 * abs(u)) ** gamma) + dm1 + 1.0
    return x * (1.0 + dm1 * (2.0 * abs(x)) ** gamma)


@numba.njit(cache=True)
def _scalar_inverse_lift_nb(gamma, dm1, lo, hi, t):
    """Bisection for F(x) = t on [lo, hi] in float64."""
    for _ in range(4000):
        mid = lo + 0.5 * (hi - lo)
        if mid <= lo or mid >= hi:
            break
        if _f_ext_nb(gamma, dm1, mid) < t:
            lo = mid
        else:
            hi = mid
    if abs(_f_ext_nb(gamma, dm1, lo) - t) <= abs(_f_ext_nb(gamma, dm1, hi) - t):
        return lo
    return hi


def _bisect_lift(params, lo, hi, t):
    """Vectorized bisection for F(x) = t with lo <= x <= hi, in t's dtype.

    Runs until no bracket can shrink further in the working precision.
    """
    gamma, dm1 = params.gamma, params.degree - 1
    shape = np.shape(t)
    t = np.atleast_1d(t)
    lo = np.array(lo, dtype=t.dtype, copy=True)
    hi = np.array(hi, dtype=t.dtype, copy=True)
    lo, hi, _ = np.broadcast_arrays(lo, hi, t)
    lo, hi = lo.copy(), hi.copy()
    half = t.dtype.type(0.5)
    active = np.ones(t.shape, dtype=bool)
    for _ in range(4000):
        idx = np.nonzero(active)
        if idx[0].size == 0:
            break
        l, h = lo[idx], hi[idx]
        mid = l + half * (h - l)
        done = (mid <= l) | (mid >= h)
        below = _lift_core(gamma, dm1, mid) < t[idx]
        nl = np.where(below & ~done, mid, l)
        nh = np.where(~below & ~done, mid, h)
        lo[idx], hi[idx] = nl, nh
        sub = active[idx]
        sub[done] = False
        active[idx] = sub
    flo = np.abs(_lift_core(gamma, dm1, lo) - t)
    fhi = np.abs(_lift_core(gamma, dm1, hi) - t)
    return np.where(flo <= fhi, lo, hi).reshape(shape)


def inverse_lift(params: CircleMapParams, branch: int, t, dtype=None):
    """Solve F(x) = t for x in fundamental domain ``branch`` (1-based).

    ``t`` is a lifted target in [k, k + 1] for that branch.  The result is in
    extended chart coordinates (it may exceed 1/2 only on a seam-straddling
    branch); use :func:`reduce_circle` to get a circle point.
    """
    br = _get_branch(params, branch)
    tt = _as_array(t, dtype)
    tol = 64 * np.finfo(tt.dtype).eps
    if np.any(~np.isfinite(tt)) or np.any(tt < br.k - tol) or np.any(tt > br.k + 1 + tol):
        raise OutOfBranchImage(
            f"lifted target outside [{br.k}, {br.k + 1}] for branch {branch}"
        )
    tt = np.clip(tt, tt.dtype.type(br.k), tt.dtype.type(br.k + 1))
    lo, hi = _branch_bounds(params, br, tt.dtype)
    if tt.dtype == np.float64 and tt.ndim == 0:
        x = _scalar_inverse_lift_nb(params.gamma, float(params.degree - 1), float(lo), float(hi), float(tt))
        return _restore(np.asarray(x), t)
    return _restore(_bisect_lift(params, lo, hi, tt), t)


def inverse_branch(params: CircleMapParams, branch: int, y, dtype=None):
    """The unique x in fundamental domain ``branch`` with f(x) = y.

    ``y`` must be a circle point in [-1/2, 1/2].  Each branch maps onto the
    whole circle, so the only failure is a target off the chart.
    """
    br = _get_branch(params, branch)
    yy = _as_array(y, dtype)
    if np.any(~np.isfinite(yy)) or np.any(np.abs(yy) > yy.dtype.type(0.5)):
        raise OutOfBranchImage(f"target {y!r} is not a circle point in [-1/2, 1/2]")
    k = yy.dtype.type(br.k)
    t = k + np.mod(yy, yy.dtype.type(1))
    x = _as_array(inverse_lift(params, branch, t, dtype))
    return _restore(_reduce(x), y)


def _get_branch(params, branch) -> Branch:
    if int(branch) != branch or not 1 <= branch <= params.degree:
        raise ValueError(f"branch must be in 1..{params.degree}, got {branch!r}")
    return params.branches[int(branch) - 1]


def _branch_bounds(params, br: Branch, dtype):
    """Branch endpoints in the requested precision.

    Interior endpoints are themselves roots of the lift, so recompute them in
    the working dtype rather than rounding the float64 values.
    """
    if dtype == np.float64:
        return br.lo, br.hi
    cuts = _cuts(params, dtype)
    d = params.degree
    j = br.index
    lo_u, hi_u = cuts[j - 1], cuts[j]
    one, half = dtype.type(1), dtype.type(0.5)
    if j == 1:
        return dtype.type(0), hi_u if hi_u <= half else hi_u
    if j == d:
        return lo_u - one, dtype.type(0)
    if hi_u <= half:
        return lo_u, hi_u
    if lo_u >= half:
        return lo_u - one, hi_u - one
    return lo_u, hi_u


_CUT_CACHE: dict = {}


def _cuts(params: CircleMapParams, dtype):
    """c_0 = 0 < c_1 < ... < c_d = 1 with F_lift(c_j) = j on [0, 1]."""
    key = (params.gamma, params.degree, np.dtype(dtype).str)
    if key in _CUT_CACHE:
        return _CUT_CACHE[key]
    d = params.degree
    t = np.dtype(dtype).type
    half = t(0.5)
    cuts = [t(0)]
    for j in range(1, d):
        if 2 * j == d:
            cuts.append(half)
        elif 2 * j < d:
            cuts.append(_bisect_lift(params, t(0), half, np.asarray(t(j)))[()])
        else:
            # F(u - 1) + d = j with u - 1 in [-1/2, 0]
            cuts.append(t(1) + _bisect_lift(params, -half, t(0), np.asarray(t(j - d)))[()])
    cuts.append(t(1))
    _CUT_CACHE[key] = cuts
    return cuts


def _fundamental_domains(params: CircleMapParams) -> tuple[Branch, ...]:
    cuts = [float(c) for c in _cuts(params, np.float64)]
    d = params.degree
    out = []
    for j in range(1, d + 1):
        a, b = cuts[j - 1], cuts[j]
        if j == 1:
            out.append(Branch(1, 0.0, b, 0))
        elif j == d:
            out.append(Branch(d, a - 1.0, 0.0, -1))
        elif b <= 0.5:
            out.append(Branch(j, a, b, j - 1))
        elif a >= 0.5:
            out.append(Branch(j, a - 1.0, b - 1.0, j - 1 - d))
        else:
            out.append(Branch(j, a, b, j - 1))
    return tuple(out)


def branch_of(params: CircleMapParams, x) -> int:
    """Index of the fundamental domain containing circle point x.

    Shared endpoints go to the lower index, except 0 which belongs to I_1.
    """
    xr = float(reduce_circle(float(x)))
    if xr >= 0.0 and xr <= params.branches[0].hi:
        return 1
    if xr < 0.0 and xr >= params.branches[-1].lo:
        return params.degree
    for br in params.branches[1:-1]:
        u = xr if xr >= br.lo else xr + 1.0
        if br.lo <= u <= br.hi:
            return br.index
    raise AssertionError("point not covered by any fundamental domain")


@dataclass(frozen=True)
class BoundarySequences:
    """x_0 > x_1 > ... in I_1 and the mirror sequence x'_n in I_d.

    ``xs[n]`` is x_n for n = 0..n_max, with f(x_{n+1}) = x_n.  ``xs_prime``
    holds the negative sequence in I_d.  J_n = [xs[n+1], xs[n]].
    """

    xs: np.ndarray
    xs_prime: np.ndarray
    n_max: int

    @property
    def j_lengths(self) -> np.ndarray:
        return self.xs[:-1] - self.xs[1:]

    @property
    def j_prime_lengths(self) -> np.ndarray:
        return self.xs_prime[1:] - self.xs_prime[:-1]


def boundary_sequences(params: CircleMapParams, n_max: int, dtype=np.float64) -> BoundarySequences:
    """Pull x_0 back along I_1 (and x'_0 along I_d) n_max times."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    dtype = np.dtype(dtype)
    first, last = params.branches[0], params.branches[-1]
    if dtype == np.float64:
        xs = _chain_float(params.gamma, float(params.degree - 1), first.hi, 0.0, n_max)
        xp = _chain_float(params.gamma, float(params.degree - 1), last.lo, 0.0, n_max)
    else:
        lo1, hi1 = _branch_bounds(params, first, dtype)
        lod, hid = _branch_bounds(params, last, dtype)
        xs = np.empty(n_max + 1, dtype=dtype)
        xp = np.empty(n_max + 1, dtype=dtype)
        xs[0], xp[0] = hi1, lod
        for n in range(n_max):
            # x_{n+1} lies in [0, x_n] and x'_{n+1} in [x'_n, 0]
            xs[n + 1] = _bisect_lift(params, dtype.type(0), xs[n], xs[n : n + 1])[0]
            xp[n + 1] = _bisect_lift(params, xp[n], dtype.type(0), xp[n : n + 1])[0]
    return BoundarySequences(xs=xs, xs_prime=xp, n_max=n_max)


@numba.njit(cache=True)
def _chain_float(gamma, dm1, start, zero, n_max):
    out = np.empty(n_max + 1)
    out[0] = start
    for n in range(n_max):
        a, b = (zero, out[n]) if out[n] > zero else (out[n], zero)
        out[n + 1] = _scalar_inverse_lift_nb(gamma, dm1, a, b, out[n])
    return out
