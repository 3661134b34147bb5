"""Acceptance suite: one PASS/FAIL line per criterion, collected in the terminal summary.

Runtime is several minutes; the scheme builds at depth 512 and 2048 dominate.
"""
import numpy as np
import pytest

from towerlab import circle_map as cm
from towerlab import coupling as cp
from towerlab import induced_scheme as isc
from towerlab import solenoid as so
from towerlab import stats
from towerlab import tower as tw
from towerlab.circle_map import CircleMapParams
from towerlab.solenoid import SolenoidParams
from towerlab.tower import DensityVector

P05 = CircleMapParams(0.5)


def loglog_slope(n, values):
    return stats.fit_power_law((n, values)).slope


@pytest.fixture(scope="module")
def deep_scheme():
    base = isc.build_base_partition(P05, 2048)
    part, tails = isc.build_rstar_partition(P05, base, 2048)
    return part, tails


def test_criterion_1_boundary_asymptotics(criterion):
    parts, ok = [], True
    for gamma in (0.4, 0.5, 0.6):
        xs = cm.boundary_sequences(CircleMapParams(gamma), 20_000).xs
        n = np.arange(1000, 10_001)
        rel = np.abs(xs[2 * n] / xs[n] / 2 ** (-1 / gamma) - 1)
        ok &= bool(rel.max() <= 0.1)
        parts.append(f"gamma={gamma} max rel err {rel.max():.2e}")
    assert criterion(1, ok, "; ".join(parts))


def test_criterion_2_return_time_tails(criterion, deep_scheme):
    parts, ok = [], True
    for gamma in (0.4, 0.5, 0.6):
        base = isc.build_base_partition(CircleMapParams(gamma), 4096)
        n = np.arange(16, 4097)
        s = loglog_slope(n, isc.base_tail(base)[n])
        ok &= abs(s + 1 / gamma) <= 0.15
        parts.append(f"R slope gamma={gamma}: {s:.3f} (target {-1 / gamma:.3f})")
    _, tails = deep_scheme
    n = np.arange(16, 1025)
    s = loglog_slope(n, tails.mass_Rstar[n])
    ok &= abs(s + 2.0) <= 0.25 and tails.truncation_mass < 0.05
    parts.append(f"R* slope gamma=0.5 over [16,1024]: {s:.3f}, truncation mass {tails.truncation_mass:.1e}")
    assert criterion(2, ok, "; ".join(parts))


def test_criterion_3_markov_expansion_distortion(criterion):
    reps = {}
    for depth in (256, 512):
        base = isc.build_base_partition(P05, depth)
        part, _ = isc.build_rstar_partition(P05, base, depth)
        reps[depth] = isc.check_expansion_distortion(P05, part)
    markov = all(r.markov_fail_count == 0 for r in reps.values())
    expand = all(r.beta_inv_rstar > 1 for r in reps.values())
    c1, c2 = reps[256].distortion_C, reps[512].distortion_C
    stable = np.isfinite(c2) and abs(c2 / c1 - 1) <= 0.2
    detail = "; ".join(
        f"depth {d}: {r.n_cells_checked} closed cells, max defect {r.markov_max_defect:.2e}, "
        f"min (f^R*)' {r.beta_inv_rstar:.3f}, distortion {r.distortion_C:.3f}" for d, r in reps.items()
    )
    assert criterion(3, markov and expand and stable, detail)


def test_criterion_4_diameter_decay(criterion, deep_scheme):
    part, _ = deep_scheme
    delta = isc.delta_k(P05, part, 512)
    fit = stats.fit_power_law((delta.k, delta.upper), (16, 512))
    ok = abs(fit.slope + 2.0) <= 0.3
    assert criterion(4, ok, f"delta_k slope over [16,512]: {fit.slope:.3f} (target -2 +- 0.3)")


def test_criterion_5_correlation_decay(criterion):
    cfg = stats.CorrelationConfig(orbit_len=13_000_000, ensemble=8, burn_in=1000, seed=0)
    series = stats.correlation(SolenoidParams(P05), "cos2pix", "cos2pix", stats.log_lags(8, 256), cfg)
    fit = stats.fit_power_law(series, (8, 256))
    ok = abs(fit.slope + 1.0) <= 0.4 and series.evaluations >= 10**8
    assert criterion(5, ok, f"slope {fit.slope:.3f} +- {fit.stderr:.3f} over [8,256], "
                            f"{series.evaluations:.3g} map evaluations")


def test_criterion_6_clt(criterion):
    S = SolenoidParams(CircleMapParams(0.4))
    pvals = [stats.clt_test(S, "cos2pix", 2000, 10**4, seed=seed, burn_in=1000).p_value for seed in range(10)]
    passed = sum(p > 0.01 for p in pvals)
    rng = np.random.default_rng(0)
    control = sum(stats.clt_from_series(rng.standard_normal((2000, 1000))).p_value > 0.01 for _ in range(100))
    ok = passed >= 8 and control >= 95
    assert criterion(6, ok, f"{passed}/10 seeds with KS p > 0.01 (min p {min(pvals):.1e}); "
                            f"i.i.d. control {control}/100")


def test_criterion_7_escape(criterion):
    S = SolenoidParams(CircleMapParams(1.2))
    cps = [10**4, 10**5, 10**6]
    monotone = sum(bool(np.all(np.diff(so.escape_averages(S, cps, 1, seed)[0]) < 0)) for seed in range(10))
    # diagnostic only: averaging 50 orbits per seed
    ens = sum(bool(np.all(np.diff(so.escape_averages(S, cps, 50, seed).mean(0)) < 0)) for seed in range(10))
    assert criterion(7, monotone >= 9, f"{monotone}/10 single orbits monotone "
                                       f"(ensemble-of-50 means monotone for {ens}/10)")


def test_criterion_8_tower_convergence(criterion):
    model = tw.power_law_model(64, 3.0)
    tv = tw.tv_decay(model, DensityVector.ground(model), tw.invariant_density(model), 256)
    n = np.arange(tv.size)
    fit = stats.fit_power_law((n, tv), (8, 64))
    full = stats.fit_power_law((n, tv), (8, 256))
    ok = fit.slope <= -1.7 and full.slope <= -1.7
    assert criterion(8, ok, f"TV slope {fit.slope:.2f} over [8,64], {full.slope:.2f} over [8,256]")


def _stationary_by_solve(model):
    """Invariant masses of the cell chain from a dense linear solve."""
    n = model.n_cells
    P = np.zeros((n, n))
    start = 0
    heads = np.concatenate([[0], np.cumsum(model.R)[:-1]])
    for r in model.R:
        for level in range(r - 1):
            P[start + level + 1, start + level] = 1.0
        P[heads, start + r - 1] += model.p
        start += r
    A = P - np.eye(n)
    A[-1] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    return np.linalg.solve(A, rhs)


def test_criterion_9_kac(criterion):
    rng = np.random.default_rng(2024)
    worst_solve = worst_kac = 0.0
    for _ in range(20):
        model = tw.random_model(rng, int(rng.integers(2, 12)), 20)
        d = tw.invariant_density(model)
        worst_solve = max(worst_solve, float(np.abs(d.masses - _stationary_by_solve(model)).max()))
        kac = 1.0 / float(model.p @ model.R)
        worst_kac = max(worst_kac, float(np.abs(d.values - kac).max()))
    ok = worst_solve <= 1e-12 and worst_kac <= 1e-12
    assert criterion(9, ok, f"max deviation from linear solve {worst_solve:.1e}, from Kac {worst_kac:.1e}")


def test_criterion_10_coupling_structure(criterion):
    model = tw.bundled_model()
    n0, _ = tw.find_n0_gamma0(model)
    lam, nu = DensityVector.ground(model), tw.invariant_density(model)

    b = cp.simulate_pairs(model, lam, nu, n0, 2000, 10**5, seed=0)
    struct = not b.censored.any() and bool(np.all(b.T >= 2 * n0))
    for k in range(b.T.size):
        t = b.taus[k, : min(b.n_taus[k], b.taus.shape[1])]
        if t[0] < n0 or np.any(np.diff(t) < n0):
            struct = False
            break

    e1 = cp.verify_E1_E4(model, lam, nu, n0, 10**5, seed=1)

    res = cp.run_extraction(model, lam, nu, n0, eps=0.1, i_max=8, horizon=120, tv_horizon=400)
    matching = max(h.matching_defect for h in res.history)
    contraction = max(h.sup_ratio for h in res.history)
    law = cp.exact_T_law(model, lam, nu, n0, 400)
    base = 2.0 * law.survival
    fitted = base + res.K1_fit * (cp.e3_bound(law, res.eps1, 1.0) - base)
    dominated = bool(res.dominated.all()) and bool(np.all(res.tv_exact <= fitted * (1 + 1e-12) + 1e-15))

    ok = struct and e1.eps0 > 0 and matching <= 1e-12 and contraction < 1 and dominated
    detail = (f"n0={n0}; structure {'ok' if struct else 'violated'} on {b.T.size} pairs; "
              f"eps0 {e1.eps0:.3f} over {len(e1.bins)} bins; matching {matching:.1e}; "
              f"sup ratio {contraction:.3f}; E3 dominated with K1=2 and K1_fit={res.K1_fit:.3g}: {dominated}")
    assert criterion(10, ok, detail)
