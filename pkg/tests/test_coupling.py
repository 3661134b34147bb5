import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from towerlab import coupling as cp
from towerlab import tower as tw
from towerlab.errors import ConfigError, HorizonExceeded
from towerlab.tower import DensityVector, FiniteTowerModel, TowerStateIndex

BUNDLED = tw.bundled_model()
ONE = FiniteTowerModel([1.0], [1])


@pytest.fixture(scope="module")
def bundled_setup():
    n0, _ = tw.find_n0_gamma0(BUNDLED)
    return BUNDLED, n0, DensityVector.ground(BUNDLED), tw.invariant_density(BUNDLED)


def test_single_branch_hand_trace():
    d = DensityVector.ground(ONE)
    rec = cp.simulate_pair(ONE, d, d, 1, 20, seed=0)
    assert rec.taus == [1, 2] and rec.T == 2
    assert rec.Ts[:3] == [2, 4, 6]


def test_stopping_time_invariants(bundled_setup):
    model, n0, lam, nu = bundled_setup
    for n0_ in (n0, 3):
        b = cp.simulate_pairs(model, lam, nu, n0_, 400, 20_000, seed=1)
        ok = b.T >= 0
        assert ok.mean() > 0.99
        assert np.all(b.T[ok] >= 2 * n0_)
        for k in np.nonzero(ok)[0][:2000]:
            t = b.taus[k, : b.n_taus[k]]
            assert t[0] >= n0_ and np.all(np.diff(t) >= n0_)
            assert t[-1] == b.T[k]
            Ts = b.Ts[k, : min(b.n_Ts[k], b.Ts.shape[1])]
            assert np.all(np.diff(Ts) >= 2 * n0_)


def test_horizon_exceeded_carries_record(bundled_setup):
    model, n0, lam, nu = bundled_setup
    with pytest.raises(HorizonExceeded) as exc:
        for seed in range(200):
            cp.simulate_pair(model, lam, nu, 2, 4, seed=seed)
    assert exc.value.record is not None and exc.value.record.T is None


def test_replay_reproduces_simulation(bundled_setup):
    """tau_1..tau_i are functions of the itinerary prefix alone."""
    model, n0, lam, nu = bundled_setup
    for seed in range(40):
        rec = cp.simulate_pair(model, lam, nu, n0, 500, seed=seed)
        taus, T = cp.replay_taus(model, rec.start, rec.x_choices, rec.y_choices, n0, 500)
        assert taus == rec.taus and T == rec.T


def test_replay_prefix_decides_each_stopping_time(bundled_setup):
    model, n0, lam, nu = bundled_setup
    for seed in range(20):
        rec = cp.simulate_pair(model, lam, nu, 2, 500, seed=seed)
        taus_full, _ = cp.replay_taus(model, rec.start, rec.x_choices, rec.y_choices, 2, 500)
        for cut in range(len(rec.x_choices) + 1):
            taus, T = cp.replay_taus(model, rec.start, rec.x_choices[:cut], rec.y_choices, 2, 500)
            assert taus == taus_full[: len(taus)]
            if T is not None:
                assert T == rec.T


def test_tail_estimate_basic_properties(bundled_setup):
    model, n0, lam, nu = bundled_setup
    tail = cp.estimate_T_tail(model, lam, nu, n0, 5000, 200, seed=2)
    assert np.all(tail.p_hat[: 2 * n0] == 1.0)
    assert np.all(np.diff(tail.p_hat) <= 0)
    assert np.all(tail.lo <= tail.p_hat) and np.all(tail.p_hat <= tail.hi)
    with pytest.raises(ConfigError):
        cp.estimate_T_tail(model, lam, nu, n0, 999, 200)


def test_exact_law_matches_monte_carlo(bundled_setup):
    model, n0, lam, nu = bundled_setup
    law = cp.exact_T_law(model, lam, nu, n0, 40)
    tail = cp.estimate_T_tail(model, lam, nu, n0, 40_000, 40, seed=3)
    inside = (law.survival >= tail.lo - 1e-12) & (law.survival <= tail.hi + 1e-12)
    assert inside.mean() >= 0.9
    assert np.max(np.abs(law.survival - tail.p_hat)) < 0.02


def test_exact_law_second_return(bundled_setup):
    model, n0, lam, nu = bundled_setup
    law = cp.exact_T_law(model, lam, nu, n0, 40, max_rounds=2)
    b = cp.simulate_pairs(model, lam, nu, n0, 40, 40_000, seed=4, max_taus=1, max_Ts=2)
    emp = np.array([(np.where(b.n_Ts >= 2, b.Ts[:, 1], 10**9) <= n).mean() for n in range(41)])
    assert np.max(np.abs(emp - law.cdf[1])) < 0.02


def test_polynomial_tail_slope():
    model = tw.power_law_model(64, 3.0)
    n0, _ = tw.find_n0_gamma0(model)
    lam = DensityVector.ground(model)
    tail = cp.estimate_T_tail(model, lam, tw.invariant_density(model), n0, 200_000, 400, seed=5)
    n = np.arange(2 * n0, 100)
    keep = tail.p_hat[n] > 0
    slope = np.polyfit(np.log(n[keep]), np.log(tail.p_hat[n][keep]), 1)[0]
    assert slope <= -2 + 0.4


def test_E1_single_branch_is_certain():
    d = DensityVector.ground(ONE)
    rep = cp.verify_E1_E4(ONE, d, d, 1, 2000, horizon=50)
    assert rep.eps0 == 1.0


def test_E1_E2_polynomial_model():
    model = tw.power_law_model(8, 3.0)
    n0, _ = tw.find_n0_gamma0(model)
    rep = cp.verify_E1_E4(model, DensityVector.ground(model), tw.invariant_density(model), n0, 20_000, seed=6)
    assert rep.eps0 > 0
    assert np.isfinite(rep.K0) and rep.K0 > 0
    assert np.isfinite(rep.K2)
    assert all(c >= 50 for c, _ in rep.bins.values())


def test_extraction_bookkeeping(bundled_setup):
    model, n0, lam, nu = bundled_setup
    res = cp.run_extraction(model, lam, nu, n0, eps=0.1, i_max=3, horizon=40)
    assert res.ledger_defect < 1e-12
    for h in res.history:
        assert h.matching_defect < 1e-12
        assert 0 < h.sup_ratio < 1
    masses = [h.residual_mass for h in res.history]
    assert np.all(np.diff(masses) < 0)
    assert 0 < res.eps1 < 1 and res.i1 == 1
    assert np.all(res.dominated)
    assert np.all(res.tv_exact <= res.bound * (1 + 1e-12) + 1e-15)


def test_extraction_degenerate_start(bundled_setup):
    model, n0, _, nu = bundled_setup
    res = cp.run_extraction(model, nu, nu, n0, i_max=2, horizon=20)
    assert np.all(res.tv_exact == 0.0) and np.all(res.bound >= 0)


def test_extraction_rejects_bad_eps(bundled_setup):
    model, n0, lam, nu = bundled_setup
    with pytest.raises(ConfigError):
        cp.run_extraction(model, lam, nu, n0, eps=0.0)


def test_e3_bound_components():
    law = cp.TLaw(np.array([[0.0, 0.5, 1.0], [0.0, 0.0, 0.5]]), 2)
    b = cp.e3_bound(law, 0.5, K1=2.0)
    # n = 2: 2 * 0 + 2 * (0.5 * (1 - 0.5) + 0.25 * 0.5)
    assert b[2] == pytest.approx(0.75)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_invariants_random_models(seed, n0):
    model = tw.random_model(np.random.default_rng(seed), 4, 6)
    d = DensityVector.random(model, np.random.default_rng(seed + 1))
    b = cp.simulate_pairs(model, d, tw.invariant_density(model), n0, 300, 500, seed=seed)
    ok = b.T >= 0
    assert np.all(b.T[ok] >= 2 * n0)
    gaps = np.diff(np.where(b.taus >= 0, b.taus, np.iinfo(np.int64).max), axis=1)
    assert np.all(gaps[b.taus[:, 1:] >= 0] >= n0)


def test_output_files(tmp_path, bundled_setup):
    model, n0, lam, nu = bundled_setup
    tail = cp.estimate_T_tail(model, lam, nu, n0, 1000, 20)
    cp.write_coupling_tail_csv(tmp_path / "coupling_tail.csv", tail)
    res = cp.run_extraction(model, lam, nu, n0, i_max=2, horizon=20)
    cp.write_e3_csv(tmp_path / "e3_check.csv", res)
    cp.write_extraction_csv(tmp_path / "extraction.csv", res)
    heads = {}
    for name in ("coupling_tail.csv", "e3_check.csv", "extraction.csv"):
        with open(tmp_path / name) as fh:
            heads[name] = next(csv.reader(fh))
    assert heads["coupling_tail.csv"] == ["n", "p_hat", "lo", "hi", "censored"]
    assert heads["e3_check.csv"] == ["n", "tv_exact", "e3_bound"]
    assert heads["extraction.csv"] == ["i", "sup_ratio", "extracted_mass"]
