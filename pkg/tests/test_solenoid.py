import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from towerlab import circle_map as cm
from towerlab import solenoid as sol
from towerlab.circle_map import CircleMapParams
from towerlab.errors import ConfigError, DepthTooSmall
from towerlab.solenoid import Point3, SolenoidParams

S05 = SolenoidParams(CircleMapParams(0.5))
disk_points = st.tuples(
    st.floats(-0.5, 0.5, exclude_max=True), st.floats(0, 1), st.floats(0, 2 * math.pi)
).map(lambda t: Point3(t[0], t[1] * math.cos(t[2]), t[1] * math.sin(t[2])))


def test_params_validation():
    with pytest.raises(ConfigError):
        SolenoidParams(CircleMapParams(0.5), contraction=0.6, amplitude=0.5)
    with pytest.raises(ConfigError):
        SolenoidParams(CircleMapParams(0.5), angle_scale=1.0)


def test_fixed_point():
    fp = sol.fixed_point(S05)
    assert fp == Point3(0.0, 5 / 9, 0.0)
    img = sol.g_eval(S05, fp)
    assert img.x == 0.0 and img.y == pytest.approx(5 / 9, abs=1e-15) and img.z == 0.0


def test_containment_bulk():
    pts = sol.random_points(np.random.default_rng(0), 10**5)
    img = sol.g_eval(S05, pts)
    assert np.all(np.abs(img[:, 1]) <= 0.6) and np.all(np.abs(img[:, 2]) <= 0.6)
    assert np.array_equal(img[:, 0], cm.eval(S05.circle, pts[:, 0]))


@given(disk_points, st.floats(-1, 1), st.floats(-1, 1))
def test_vertical_contraction_is_exact(p, dy, dz):
    q = Point3(p.x, p.y * 0.5 + dy * 0.1, p.z * 0.5 + dz * 0.1)
    p2 = Point3(p.x, p.y * 0.5, p.z * 0.5)
    a, b = sol.g_eval(S05, q), sol.g_eval(S05, p2)
    before = math.hypot(q.y - p2.y, q.z - p2.z)
    after = math.hypot(a.y - b.y, a.z - b.z)
    assert after == pytest.approx(0.1 * before, rel=1e-9, abs=1e-15)


def test_vertical_distance_after_n_steps():
    p = Point3(0.123, 0.2, -0.1)
    q = Point3(0.123, -0.3, 0.4)
    op = sol.orbit(S05, p, 8).points
    oq = sol.orbit(S05, q, 8).points
    d0 = math.hypot(p.y - q.y, p.z - q.z)
    for n in range(8):
        assert np.array_equal(op[n, 0], oq[n, 0])
        assert math.hypot(*(op[n, 1:] - oq[n, 1:])) == pytest.approx(0.1 ** n * d0, rel=1e-6, abs=1e-15)


def test_compiled_orbit_matches_python_steps():
    p = Point3(0.31, 0.1, 0.2)
    pts = sol.orbit(S05, p, 30).points
    q = np.array(p)
    for j in range(30):
        assert np.allclose(pts[j], q, atol=1e-9 * 2 ** j)
        q = sol.g_eval(S05, q)


def test_attractor_containment_after_one_step():
    pts = sol.random_points(np.random.default_rng(3), 200)
    for p in pts:
        o = sol.orbit(S05, p, 20, burn_in=1).points
        assert np.all(np.hypot(o[:, 1], o[:, 2]) <= 0.6 + 1e-12)


@settings(max_examples=100)
@given(disk_points)
def test_inverse_round_trip(p):
    q = sol.g_eval(S05, p)
    back = sol.g_inverse(S05, q)
    assert abs(cm.reduce_circle(back.x - p.x)) < 1e-9
    assert abs(back.y - p.y) < 1e-6 and abs(back.z - p.z) < 1e-6


def test_inverse_outside_image_raises():
    with pytest.raises(ValueError):
        sol.g_inverse(S05, Point3(0.0, 0.0, 0.0))
    q = sol.g_inverse(S05, Point3(0.0, 0.0, 0.0), clamp=True)
    assert math.hypot(q.y, q.z) <= 1.0 + 1e-12


def test_leaf_point_is_on_attractor():
    p = sol.leaf_point(S05, 0.2, [1] * 30)
    q = sol.g_eval(S05, sol.leaf_point(S05, cm.inverse_branch(S05.circle, 1, 0.2), [1] * 29))
    assert np.allclose(p, q, atol=1e-14)
    # branch-1 leaf through x = 0 is the fixed point
    assert np.allclose(sol.leaf_point(S05, 0.0, [1] * 40), sol.fixed_point(S05), atol=1e-15)


def test_birkhoff_constant_is_exact():
    assert sol.birkhoff_average(S05, "constant", Point3(0.1, 0, 0), 1000) == 1.0
    assert sol.birkhoff_average(S05, lambda pts: np.full(len(pts), 2.5), Point3(0.1, 0, 0), 1000) == 2.5


def test_birkhoff_matches_explicit_orbit():
    p = Point3(0.17, 0.1, -0.2)
    pts = sol.orbit(S05, p, 500, burn_in=10).points
    for name in ("dist_fixed", "cos2pix", "indicator_halfcircle", "lipschitz_xy"):
        obs = sol.get_observable(name)
        direct = float(np.mean(obs(pts, S05)))
        assert sol.birkhoff_average(S05, name, p, 500, burn_in=10) == pytest.approx(direct, abs=1e-9)


def test_birkhoff_two_seeds_agree():
    avgs = []
    for seed in (11, 12):
        vals = sol.escape_averages(S05, [20_000], 40, seed, observable="lipschitz_xy", burn_in=100)[:, 0]
        avgs.append((vals.mean(), vals.std(ddof=1) / math.sqrt(vals.size)))
    (m1, s1), (m2, s2) = avgs
    assert abs(m1 - m2) < 3 * math.hypot(s1, s2)


def test_escape_decreases_for_large_gamma():
    params = SolenoidParams(CircleMapParams(1.2))
    vals = sol.escape_averages(params, [10**3, 10**4, 10**5], 4, 0)
    assert np.all(np.median(vals, axis=0)[1:] < np.median(vals, axis=0)[:-1])


def test_unknown_observable():
    with pytest.raises(ConfigError):
        sol.get_observable("nope")


def _attractor_point(x, seed=0):
    rng = np.random.default_rng(seed)
    return sol.leaf_point(S05, x, rng.integers(1, 3, 60))


def test_u_hat_on_reference_leaf_is_one():
    p = sol.leaf_point(S05, 0.21, [1] * 60)
    assert sol.u_hat_truncated(S05, p, reference=1) == pytest.approx(1.0, abs=1e-12)
    q = _attractor_point(0.21, 4)
    assert sol.u_hat_truncated(S05, q, reference=q) == 1.0


def test_u_hat_truncation_cauchy():
    for seed in range(5):
        p = _attractor_point(0.05 + 0.07 * seed, seed)
        a = sol.u_hat_truncated(S05, p, depth=40, check=False)
        b = sol.u_hat_truncated(S05, p, depth=45, check=False)
        assert abs(a - b) < 1e-6
        assert a == pytest.approx(sol.u_hat_limit(S05, p), rel=1e-10)


def test_u_hat_depth_too_small():
    p = _attractor_point(0.3, 1)
    with pytest.raises(DepthTooSmall):
        sol.u_hat_truncated(S05, p, depth=1, tol=1e-14)


def test_u_hat_regularity_within_one_cell():
    """log(u(x)/u(y)) <= C beta^s for pairs sharing s steps of itinerary."""
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(30):
        tail = list(rng.integers(1, 3, 60))
        s = int(rng.integers(1, 8))
        x1 = sol.leaf_point(S05, 0.2, [1] * s + tail)
        x2 = sol.leaf_point(S05, 0.2, [1] * s + [2] + tail[1:])
        d = abs(math.log(sol.u_hat_limit(S05, x1) / sol.u_hat_limit(S05, x2)))
        ratios.append(d / 0.1 ** s)
    assert math.isfinite(max(ratios)) and max(ratios) < 1e3


def test_return_jacobian_constant_on_stable_leaf():
    x = 0.27
    for R in (1, 3, 6):
        vals = [sol.return_jacobian(S05, _attractor_point(x, seed), R) for seed in range(4)]
        assert max(vals) - min(vals) < 1e-8 * max(vals)


def test_unstable_slope_independent_of_start_cone():
    p = _attractor_point(0.1, 2)
    a = sol.unstable_slope(S05, p, back_depth=30)
    b = sol.unstable_slope(S05, p, back_depth=45)
    assert np.allclose(a, b, atol=1e-12)


def test_orbit_csv(tmp_path):
    sample = sol.orbit(S05, Point3(0.1, 0.0, 0.0), 5, seed=3)
    sol.write_orbit_csv(tmp_path / "orbit.csv", sample)
    with open(tmp_path / "orbit.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["j", "x", "y", "z"] and len(rows) == 6
    assert float(rows[3][1]) == sample.points[2, 0]
