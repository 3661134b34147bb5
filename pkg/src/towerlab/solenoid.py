"""Skew product g on the solid torus S^1 x D^2 over the intermittent circle map.

    g(x, y, z) = (f(x), c*y + a*cos(2 pi x), c*z + a*sin(2 pi x))

with contraction c = 1/10 and amplitude a = 1/2.  Vertical disks {x} x D^2
are stable leaves; unstable leaves are graphs over the circle whose slope
s = (dy/dx, dz/dx) obeys s' = (w(x) + c*s) / f'(x) with
w(x) = 2*pi*a*(-sin 2 pi x, cos 2 pi x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels as K
from . import circle_map as cm
from ._io import write_csv
from .circle_map import CircleMapParams
from .errors import ConfigError, DepthTooSmall

__all__ = [
    "SolenoidParams",
    "Point3",
    "OrbitSample",
    "Observable",
    "OBSERVABLES",
    "get_observable",
    "g_eval",
    "g_inverse",
    "fixed_point",
    "leaf_point",
    "random_points",
    "orbit",
    "birkhoff_average",
    "escape_averages",
    "unstable_slope",
    "u_hat_truncated",
    "u_hat_limit",
    "return_jacobian",
    "write_orbit_csv",
]


@dataclass(frozen=True)
class SolenoidParams:
    circle: CircleMapParams
    contraction: float = 0.1
    amplitude: float = 0.5
    angle_scale: float = 2.0 * math.pi

    def __post_init__(self):
        if not 0 < self.contraction < 1:
            raise ConfigError("contraction must lie in (0, 1)")
        if self.amplitude < 0 or self.contraction + self.amplitude > 1:
            raise ConfigError("need contraction + amplitude <= 1 so the image stays in the disk")
        if self.angle_scale != 2.0 * math.pi:
            # the compiled loops hard-code one turn per circle length
            raise ConfigError("only angle_scale = 2*pi keeps g continuous on the chart")

    @property
    def _kargs(self):
        return (self.circle.gamma, float(self.circle.degree - 1), self.contraction, self.amplitude)


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass
class OrbitSample:
    points: np.ndarray  # (n, 3)
    seed: int | None
    burn_in: int


def fixed_point(params: SolenoidParams) -> Point3:
    """(0, a/(1 - c), 0): the point over the neutral fixed point."""
    return Point3(0.0, params.amplitude / (1.0 - params.contraction), 0.0)


def g_eval(params: SolenoidParams, p) -> Point3 | np.ndarray:
    """One step of g; accepts a Point3 or an (n, 3) array."""
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    x, y, z = arr[:, 0], arr[:, 1], arr[:, 2]
    c, a = params.contraction, params.amplitude
    ang = params.angle_scale * x
    out = np.column_stack([cm.eval(params.circle, x), c * y + a * np.cos(ang), c * z + a * np.sin(ang)])
    return Point3(*out[0]) if single else out


def g_inverse(params: SolenoidParams, p, tol: float = 1e-9, clamp: bool = False) -> Point3:
    """The unique preimage of p inside S^1 x D^2.

    Each branch gives a candidate; the disks g({x'} x D^2) for different
    preimages x' are disjoint, so at most one candidate lies in the disk.
    Inversion amplifies (y, z) errors tenfold per step; with ``clamp`` the
    nearest candidate is projected into the disk instead of raising, which
    keeps long backward walks bounded.
    """
    x, y, z = p
    c, a = params.contraction, params.amplitude
    best = None
    for br in range(1, params.circle.degree + 1):
        xp = cm.inverse_branch(params.circle, br, x)
        yp = (y - a * math.cos(params.angle_scale * xp)) / c
        zp = (z - a * math.sin(params.angle_scale * xp)) / c
        r = math.hypot(yp, zp)
        if best is None or r < best[0]:
            best = (r, Point3(xp, yp, zp))
    r, q = best
    if clamp and r > 1.0:
        return Point3(q.x, q.y / r, q.z / r)
    if r > 1.0 + tol:
        raise ValueError(f"point {tuple(p)} has no preimage in the solid torus")
    return best[1]


def leaf_point(params: SolenoidParams, x: float, itinerary) -> Point3:
    """The attractor point over x whose backward orbit follows ``itinerary``.

    itinerary[k] is the branch of the (k+1)-th preimage; (y, z) is the
    contracted sum of the amplitudes along that backward x-orbit, so no
    forward iteration (and no error growth) is involved.
    """
    c, a = params.contraction, params.amplitude
    xb = float(x)
    y = z = 0.0
    w = 1.0
    for b in itinerary:
        xb = cm.inverse_branch(params.circle, int(b), xb)
        y += w * a * math.cos(params.angle_scale * xb)
        z += w * a * math.sin(params.angle_scale * xb)
        w *= c
    return Point3(float(x), y, z)


def random_points(rng: np.random.Generator, n: int) -> np.ndarray:
    """n points uniform for Lebesgue measure on S^1 x D^2."""
    x = rng.random(n) - 0.5
    r = np.sqrt(rng.random(n))
    th = 2.0 * math.pi * rng.random(n)
    return np.column_stack([x, r * np.cos(th), r * np.sin(th)])


def orbit(params: SolenoidParams, p0, n: int, burn_in: int = 0, seed: int | None = None) -> OrbitSample:
    """n consecutive points g^{burn_in + j}(p0)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x, y, z = (float(v) for v in p0)
    if burn_in:
        tmp = np.empty((burn_in + 1, 3))
        K.solenoid_orbit(x, y, z, burn_in + 1, *params._kargs, tmp)
        x, y, z = tmp[-1]
    out = np.empty((n, 3))
    K.solenoid_orbit(x, y, z, n, *params._kargs, out)
    return OrbitSample(points=out, seed=seed, burn_in=burn_in)


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class Observable:
    """A named observable with its Hoelder exponent tag.

    ``x_only`` observables depend on the circle coordinate alone, so they can
    be measured on the circle map without iterating (y, z).
    """

    name: str
    eta: float
    x_only: bool
    code: int
    func: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ConfigError("Hoelder exponent must lie in (0, 1]")

    def __call__(self, pts: np.ndarray, params: SolenoidParams | None = None) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if self.func is not None:
            return self.func(pts)
        y_fix = 5.0 / 9.0 if params is None else fixed_point(params).y
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        if self.code == K.OBS_DIST_FIXED:
            return np.sqrt(x * x + (y - y_fix) ** 2 + z * z)
        if self.code == K.OBS_COS2PIX:
            return np.cos(2.0 * math.pi * x)
        if self.code == K.OBS_HALFCIRCLE:
            return (x >= 0).astype(np.float64)
        if self.code == K.OBS_LIPSCHITZ_XY:
            return np.abs(x) + 0.5 * y
        return np.ones(x.size)


OBSERVABLES = {
    "dist_fixed": Observable("dist_fixed", 1.0, False, K.OBS_DIST_FIXED),
    "cos2pix": Observable("cos2pix", 1.0, True, K.OBS_COS2PIX),
    # discontinuous at 0 and 1/2; the exponent tag is nominal
    "indicator_halfcircle": Observable("indicator_halfcircle", 1.0, True, K.OBS_HALFCIRCLE),
    "lipschitz_xy": Observable("lipschitz_xy", 1.0, False, K.OBS_LIPSCHITZ_XY),
    "constant": Observable("constant", 1.0, True, K.OBS_CONST),
}


def get_observable(obs) -> Observable:
    if isinstance(obs, Observable):
        return obs
    try:
        return OBSERVABLES[obs]
    except KeyError:
        raise ConfigError(f"unknown observable {obs!r}; choose from {sorted(OBSERVABLES)}") from None


def birkhoff_average(params: SolenoidParams, observable, p0, n: int, burn_in: int = 0) -> float:
    """(1/n) sum_{j<n} phi(g^{burn_in + j}(p0))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    obs = observable if callable(observable) and not isinstance(observable, (str, Observable)) else get_observable(observable)
    x, y, z = (float(v) for v in p0)
    if isinstance(obs, Observable) and obs.func is None:
        cps = np.array([n], dtype=np.int64)
        return float(K.solenoid_birkhoff(x, y, z, n, burn_in, *params._kargs, obs.code, fixed_point(params).y, cps)[0])
    total = 0.0
    state = (x, y, z)
    if burn_in:
        state = orbit(params, state, 1, burn_in=burn_in).points[0]
    for start in range(0, n, 1 << 16):
        m = min(1 << 16, n - start)
        pts = orbit(params, state, m + 1).points
        total += float(np.sum(obs(pts[:m])))
        state = pts[m]
    return total / n


def escape_averages(params: SolenoidParams, checkpoints, ensemble: int, seed: int,
                    observable="dist_fixed", burn_in: int = 0) -> np.ndarray:
    """Birkhoff averages at each checkpoint for ``ensemble`` Lebesgue-random starts.

    Returns an (ensemble, len(checkpoints)) array.
    """
    obs = get_observable(observable)
    cps = np.asarray(sorted(int(c) for c in checkpoints), dtype=np.int64)
    rng = np.random.default_rng(seed)
    starts = random_points(rng, ensemble)
    out = np.empty((ensemble, cps.size))
    y_fix = fixed_point(params).y
    for i, (x, y, z) in enumerate(starts):
        out[i] = K.solenoid_birkhoff(x, y, z, int(cps[-1]), burn_in, *params._kargs, obs.code, y_fix, cps)
    return out


# ---------------------------------------------------------------------------
# unstable directions and the density factor u-hat


def _w(params, x):
    s = params.amplitude * params.angle_scale
    ang = params.angle_scale * x
    return np.array([-s * math.sin(ang), s * math.cos(ang)])


def _push_slope(params, x, slope):
    """Slope of Dg(horizontal + slope) at g(point), for a point over x."""
    return (_w(params, x) + params.contraction * slope) / cm.deriv(params.circle, x)


def _backward_x(params, p, steps, reference):
    """Circle coordinates of the backward orbit of p, oldest first.

    ``reference`` "orbit" follows the preimages of p in the solid torus.  Past
    about fifteen steps the branch choice is noise, but a step at depth k moves
    the slope at p by at most a constant times 10^-k.
    An integer b always takes the branch-b preimage (b = 1 gives the unstable
    leaf of the fixed point).
    """
    xs = []
    if reference == "orbit":
        q = Point3(*p)
        for _ in range(steps):
            q = g_inverse(params, q, clamp=True)
            xs.append(q.x)
    else:
        x = float(p[0])
        for _ in range(steps):
            x = cm.inverse_branch(params.circle, int(reference), x)
            xs.append(x)
    return xs[::-1]


def unstable_slope(params: SolenoidParams, p, back_depth: int = 40, reference="orbit") -> np.ndarray:
    """Slope (dy/dx, dz/dx) of the unstable leaf through p.

    A horizontal vector is pushed forward along the last ``back_depth`` steps
    of the backward orbit; the cone contracts by c/f' <= 1/10 per step.
    """
    s = np.zeros(2)
    for x in _backward_x(params, p, back_depth, reference):
        s = _push_slope(params, x, s)
    return s


def _reference_slope(params, p, reference, back_depth):
    if isinstance(reference, (str, int, np.integer)):
        return unstable_slope(params, p, back_depth, reference)
    ref = Point3(*(float(v) for v in reference))
    if abs(ref.x - float(p[0])) > 1e-12:
        raise ValueError("reference point must share the circle coordinate of p")
    return unstable_slope(params, ref, back_depth, "orbit")


def _log_factors(params, x0, s0, depth):
    """log det Df^u along the forward x-orbit, given the initial slope."""
    x, s = float(x0), s0.copy()
    out = np.empty(depth)
    for i in range(depth):
        s_next = _push_slope(params, x, s)
        out[i] = math.log(cm.deriv(params.circle, x)) + 0.5 * (
            math.log1p(s_next @ s_next) - math.log1p(s @ s)
        )
        s = s_next
        x = cm.eval(params.circle, x)
    return out


def u_hat_truncated(params: SolenoidParams, p, reference=1, depth: int = 40, back_depth: int = 40,
                    check: bool = True, tol: float = 1e-6) -> float:
    """prod_{i<depth} det Df^u(g^i p) / det Df^u(g^i p_hat).

    p_hat lies over the same circle coordinate as p, on a reference unstable
    leaf chosen by ``reference``:

    * an integer b: the leaf whose backward orbit always takes branch b
      (b = 1 is the unstable leaf of the fixed point);
    * ``"orbit"`` or a point with the same x: the leaf through that point.

    Unstable directions come from pushing a horizontal vector forward along
    the last ``back_depth`` steps of each backward orbit, so p must have that
    many preimages inside the solid torus (any point past a burn-in does).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    s_p = unstable_slope(params, p, back_depth, "orbit")
    s_ref = s_p if isinstance(reference, str) and reference == "orbit" else _reference_slope(params, p, reference, back_depth)
    extra = 5 if check else 0
    diff = _log_factors(params, p[0], s_p, depth + extra) - _log_factors(params, p[0], s_ref, depth + extra)
    val = math.exp(float(np.sum(diff[:depth])))
    if check:
        val5 = math.exp(float(np.sum(diff)))
        if abs(val - val5) > tol:
            raise DepthTooSmall(f"u-hat changed by {abs(val - val5):.3g} between depth {depth} and {depth + 5}")
    return val


def u_hat_limit(params: SolenoidParams, p, reference=1, back_depth: int = 40) -> float:
    """Closed form of the infinite product: the f' factors cancel and the
    slope factors telescope to sqrt(1 + |s_ref|^2) / sqrt(1 + |s_p|^2)."""
    s_p = unstable_slope(params, p, back_depth, "orbit")
    s_r = _reference_slope(params, p, reference, back_depth)
    return math.sqrt((1.0 + s_r @ s_r) / (1.0 + s_p @ s_p))


def return_jacobian(params: SolenoidParams, p, R: int, reference=1, depth: int = 40, back_depth: int = 40) -> float:
    """det Df^u_R(p) * u_hat(g^R p) / u_hat(p).

    This is the Jacobian of the return map with respect to the reference-leaf
    normalization; it depends only on the stable leaf of p.
    """
    s_p = unstable_slope(params, p, back_depth, "orbit")
    logs = _log_factors(params, p[0], s_p, R)
    q = Point3(*orbit(params, p, 1, burn_in=R).points[0])
    uh_p = u_hat_truncated(params, p, reference, depth, back_depth, check=False)
    uh_q = u_hat_truncated(params, q, reference, depth, back_depth + R, check=False)
    return math.exp(float(np.sum(logs))) * uh_q / uh_p


def write_orbit_csv(path, sample: OrbitSample):
    rows = ((j, x, y, z) for j, (x, y, z) in enumerate(sample.points))
    return write_csv(path, ["j", "x", "y", "z"], rows)
