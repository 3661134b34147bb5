import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from towerlab import tower as tw
from towerlab.errors import ConfigError, PeriodicTower
from towerlab.tower import DensityVector, FiniteTowerModel, TowerStateIndex


def dense_transfer(model):
    """Column-stochastic matrix of the tower chain on cells, built from scratch."""
    n = model.n_cells
    P = np.zeros((n, n))
    start = 0
    for i, r in enumerate(model.R):
        for level in range(r - 1):
            P[start + level + 1, start + level] = 1.0
        top = start + r - 1
        s2 = 0
        for j, r2 in enumerate(model.R):
            P[s2, top] += model.p[j]
            s2 += r2
        start += r
    return P


models = st.builds(
    lambda seed, n: tw.random_model(np.random.default_rng(seed), n, 12),
    st.integers(0, 10**6), st.integers(1, 10),
)


def test_model_validation():
    with pytest.raises(ConfigError):
        FiniteTowerModel([0.5, 0.4], [1, 2])
    with pytest.raises(ConfigError):
        FiniteTowerModel([0.5, 0.5], [0, 2])
    with pytest.raises(ConfigError):
        FiniteTowerModel([1.0, 0.0], [1, 2])


def test_kac_two_branch_example():
    m = FiniteTowerModel([0.5, 0.5], [1, 2])
    nu = tw.invariant_density(m)
    masses = nu.masses
    assert masses[m.ground_mask].sum() == pytest.approx(2 / 3, abs=1e-15)
    assert masses[~m.ground_mask].sum() == pytest.approx(1 / 3, abs=1e-15)


def test_identity_tower():
    m = FiniteTowerModel([1.0], [1])
    assert np.array_equal(tw.invariant_density(m).values, [1.0])
    n0, g0 = tw.find_n0_gamma0(m, 50)
    assert n0 == 1 and g0 == 0.5
    assert np.all(tw.ground_return_masses(m, 50) == 1.0)


def test_periodic_tower_rejected():
    m = FiniteTowerModel([0.5, 0.5], [2, 4])
    with pytest.raises(PeriodicTower):
        tw.invariant_density(m)
    with pytest.raises(PeriodicTower):
        tw.find_n0_gamma0(m)


@settings(max_examples=30, deadline=None)
@given(models)
def test_step_matches_dense_matrix(model):
    rng = np.random.default_rng(0)
    d = DensityVector.random(model, rng)
    P = dense_transfer(model)
    assert np.allclose(tw.step_density(model, d).masses, P @ d.masses, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(models)
def test_kac_is_dense_eigenvector(model):
    P = dense_transfer(model)
    w, V = np.linalg.eig(P)
    v = np.real(V[:, np.argmin(np.abs(w - 1))])
    v = v / v.sum()
    assert np.allclose(tw.invariant_density(model).masses, v, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(models, st.integers(0, 2**32 - 1))
def test_step_linear_positive_mass_preserving(model, seed):
    rng = np.random.default_rng(seed)
    a, b = DensityVector.random(model, rng), DensityVector.random(model, rng)
    s = tw.step_density
    combo = DensityVector(model, 0.3 * a.values + 0.7 * b.values)
    assert np.allclose(s(model, combo).values, 0.3 * s(model, a).values + 0.7 * s(model, b).values, atol=1e-14)
    assert np.all(s(model, a).values >= 0)
    assert s(model, a).mass == pytest.approx(a.mass, abs=1e-14)


def test_invariant_is_fixed_point_and_power_limit():
    rng = np.random.default_rng(1)
    for _ in range(5):
        # return times up to 8: longer ones mix too slowly for 1e-12 in 10^3 steps
        m = tw.random_model(rng, 8, 8)
        nu = tw.invariant_density(m)
        assert np.max(np.abs(tw.step_density(m, nu).values - nu.values)) < 1e-12
        d = tw.push_forward(m, DensityVector.ground(m), 1000)
        assert tw.tv_distance(m, d, nu) < 1e-12


def test_interior_shift():
    m = FiniteTowerModel([0.3, 0.7], [1, 4])
    d = DensityVector.point_mass(m, TowerStateIndex(1, 1))
    out = tw.step_density(m, d)
    assert np.array_equal(out.masses, DensityVector.point_mass(m, TowerStateIndex(1, 2)).masses)


def test_mass_conservation_long_run():
    m = tw.bundled_model()
    d = DensityVector.random(m, np.random.default_rng(2))
    assert abs(tw.push_forward(m, d, 10**4).mass - 1.0) < 1e-10


def test_tv_decay_identities():
    m = tw.power_law_model(16, 3.0)
    nu = tw.invariant_density(m)
    assert np.all(tw.tv_decay(m, nu, nu, 50) == 0.0)
    lam = DensityVector.ground(m)
    tv = tw.tv_decay(m, lam, nu, 200)
    direct = [tw.tv_distance(m, tw.push_forward(m, lam, n), nu) for n in (0, 1, 7, 50)]
    assert np.allclose(tv[[0, 1, 7, 50]], direct, atol=1e-14)
    env = np.maximum.accumulate(tv[::-1])[::-1]
    assert np.all(np.diff(env) <= 0)


def test_exactness_surrogate():
    rng = np.random.default_rng(3)
    m = tw.random_model(rng, 6, 10)
    nu = tw.invariant_density(m)
    for _ in range(20):
        tv = tw.tv_decay(m, DensityVector.random(m, rng), nu, 2000)
        assert tv[-1] < 1e-10 * max(tv[0], 1e-300) + 1e-14


def test_hat_R_values():
    m = FiniteTowerModel([0.5, 0.5], [1, 5])
    assert tw.hat_R(m, TowerStateIndex(1, 0)) == 0
    assert tw.hat_R(m, TowerStateIndex(1, 1)) == 4
    with pytest.raises(ValueError):
        tw.hat_R(m, TowerStateIndex(1, 5))


def test_hat_R_tail_identity():
    m = tw.random_model(np.random.default_rng(4), 8, 20)
    a = tw.hat_R_tail(m, 30, direct=True)
    b = tw.hat_R_tail(m, 30, direct=False)
    assert np.max(np.abs(a - b)) < 1e-15


def _ground_paths(model, n):
    """P(chain started on the ground is on the ground at time n), by enumerating branch choices."""
    total = 0.0
    R, p = list(model.R), list(model.p)
    for k in range(1, n + 1):
        for seq in itertools.product(range(len(R)), repeat=k):
            if sum(R[i] for i in seq) == n:
                total += float(np.prod([p[i] for i in seq]))
    return total


def test_ground_return_masses_path_enumeration():
    m = FiniteTowerModel([0.5, 0.5], [1, 2])
    u = tw.ground_return_masses(m, 12)
    assert u[0] == 1.0
    for n in range(1, 13):
        assert u[n] == pytest.approx(_ground_paths(m, n), abs=1e-14)


def test_n0_gamma0_random_models_settle():
    rng = np.random.default_rng(5)
    for _ in range(5):
        m = tw.random_model(rng, 8, 20)
        n0, g0 = tw.find_n0_gamma0(m, 1000)
        u = tw.ground_return_masses(m, 1000)
        assert n0 >= 1 and np.all(u[n0:] >= g0)
        assert abs(u[-1] * m.mean_return - 1) < 0.01


def test_power_law_tail():
    m = tw.power_law_model(64, 3.0)
    tail = tw.return_tail(m, 63)
    n = np.arange(4, 32)
    assert np.polyfit(np.log(n), np.log(tail[n]), 1)[0] == pytest.approx(-3, abs=0.4)


def test_tower_csvs(tmp_path):
    m = tw.bundled_model()
    tw.write_tower_csv(tmp_path / "tower.csv", m)
    tw.write_tv_csv(tmp_path / "tv.csv", [1.0, 0.5])
    with open(tmp_path / "tower.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["i", "p_i", "R_i"] and rows[4] == ["4", "0.1", "5"]
    with open(tmp_path / "tv.csv") as fh:
        assert next(csv.reader(fh)) == ["n", "tv"]


def test_shrink_surrogate_on_example_tower():
    from towerlab import induced_scheme as isc
    from towerlab.circle_map import CircleMapParams

    p = CircleMapParams(0.5)
    base = isc.build_base_partition(p, 160)
    part, _ = isc.build_rstar_partition(p, base, 160)
    ds = isc.delta_k(p, part, 100)
    rep = tw.shrink_surrogate(part, ds, beta=1 / 2.13)
    assert np.all(rep.measured <= ds.upper * (1 + 1e-9))
    assert np.max(rep.ratio) <= 1.0
    model = tw.from_cells(part)
    assert model.redistributed_mass < 1e-3 and model.gcd == 1
