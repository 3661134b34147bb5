"""Estimators: lagged correlations, power-law fits and the CLT test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from . import _kernels as K
from ._io import write_csv, write_json
from .errors import ConfigError, DegenerateVariance, NonpositiveValues, SeriesTooShort
from .solenoid import Observable, SolenoidParams, fixed_point, get_observable, random_points

__all__ = [
    "CorrelationConfig",
    "CorrelationSeries",
    "FitResult",
    "CLTReport",
    "log_lags",
    "correlation",
    "fit_power_law",
    "clt_from_series",
    "clt_test",
    "orbit_series",
    "write_correlation_csv",
    "write_clt_outputs",
]


@dataclass(frozen=True)
class CorrelationConfig:
    """``mode`` "orbit" averages along long orbits (jackknife over blocks);
    "ensemble" uses one origin per independent start."""

    mode: str = "orbit"
    orbit_len: int = 10**6
    ensemble: int = 1
    burn_in: int = 1000
    seed: int = 0
    quotient: bool = True
    chunk: int = 1 << 20

    def __post_init__(self):
        if self.mode not in ("orbit", "ensemble"):
            raise ConfigError("mode must be 'orbit' or 'ensemble'")
        if self.orbit_len < 1 or self.ensemble < 1 or self.burn_in < 0 or self.chunk < 1:
            raise ConfigError("orbit_len, ensemble and chunk must be positive; burn_in nonnegative")


@dataclass
class CorrelationSeries:
    n: np.ndarray
    estimate: np.ndarray  # |covariance|
    stderr: np.ndarray
    signed: np.ndarray
    orbit_len: int
    ensemble: int
    burn_in: int
    mode: str
    evaluations: int


@dataclass
class FitResult:
    slope: float
    intercept: float
    stderr: float
    window: tuple[float, float]
    r2: float
    points: int


@dataclass
class CLTReport:
    sigma2: float
    ks: float
    p_value: float
    M: int
    n: int
    K: int
    outside_hypothesis: bool = False
    flags: list = field(default_factory=list)
    sums: np.ndarray | None = field(default=None, repr=False)


def log_lags(lo: int, hi: int, per_octave: int = 4) -> np.ndarray:
    """Integer lags from lo to hi, roughly evenly spaced in log n."""
    k = int(round(per_octave * math.log2(hi / lo))) + 1
    return np.unique(np.round(np.geomspace(lo, hi, k)).astype(np.int64))


def _codes(params, phi, psi, quotient):
    phi, psi = get_observable(phi), get_observable(psi)
    if phi.func is not None or psi.func is not None:
        raise ConfigError("correlation needs named observables")
    q = bool(quotient and phi.x_only and psi.x_only)
    return phi, psi, q, fixed_point(params).y


def correlation(params: SolenoidParams, phi, psi, lags, config: CorrelationConfig = CorrelationConfig()) -> CorrelationSeries:
    """|mean(phi o g^n * psi) - mean(phi o g^n) mean(psi)| for each lag n.

    With ``config.quotient`` and observables of x alone, only the circle map
    is iterated.
    """
    lags = np.unique(np.asarray(lags, dtype=np.int64))
    if lags.size == 0 or lags[0] < 0:
        raise ConfigError("lags must be a nonempty set of nonnegative integers")
    phi, psi, quot, y_fix = _codes(params, phi, psi, config.quotient)
    if config.mode == "ensemble":
        return _correlation_ensemble(params, phi, psi, lags, config, quot, y_fix)
    max_lag = int(lags[-1])
    if config.orbit_len < 100 * max(max_lag, 1):
        raise SeriesTooShort(f"orbit length {config.orbit_len} < 100 * max lag {max_lag}")
    block = 10 * max(max_lag, 1)
    nb_orbit = config.orbit_len // block
    n_blocks = nb_orbit * config.ensemble
    sxy = np.zeros((n_blocks, lags.size))
    sx = np.zeros((n_blocks, lags.size))
    sy = np.zeros(n_blocks)
    rng = np.random.default_rng(config.seed)
    starts = random_points(rng, config.ensemble)
    kargs = params._kargs
    for e in range(config.ensemble):
        sub_sxy = sxy[e * nb_orbit:(e + 1) * nb_orbit]
        sub_sx = sx[e * nb_orbit:(e + 1) * nb_orbit]
        sub_sy = sy[e * nb_orbit:(e + 1) * nb_orbit]
        need = nb_orbit * block + max_lag
        x, y, z = starts[e]
        burn = config.burn_in
        carry_phi = np.empty(0)
        carry_psi = np.empty(0)
        start = 0
        done = 0
        while done < need:
            m = min(config.chunk, need - done)
            buf_phi = np.empty(m)
            if psi.code == phi.code:
                x, y, z = K.observable_series(x, y, z, m, burn, *kargs, phi.code, y_fix, quot, buf_phi)
                buf_psi = buf_phi
            else:
                buf_psi = np.empty(m)
                x, y, z = K.observable_pair_series(x, y, z, m, burn, *kargs, phi.code, psi.code, y_fix, quot,
                                                   buf_phi, buf_psi)
            burn = 0
            done += m
            wphi = np.concatenate([carry_phi, buf_phi])
            wpsi = np.concatenate([carry_psi, buf_psi])
            used = K.lagged_block_sums(wphi, wpsi, lags, block, nb_orbit, sub_sxy, sub_sx, sub_sy, start)
            start += used
            carry_phi = wphi[used:]
            carry_psi = wpsi[used:]
    N = n_blocks * block
    tot_xy, tot_x, tot_y = sxy.sum(0), sx.sum(0), sy.sum()
    signed = tot_xy / N - (tot_x / N) * (tot_y / N)
    # leave-one-block-out jackknife
    m = N - block
    loo = (tot_xy - sxy) / m - ((tot_x - sx) / m) * ((tot_y - sy)[:, None] / m)
    se = np.sqrt((n_blocks - 1) / n_blocks * ((loo - loo.mean(0)) ** 2).sum(0))
    evals = config.ensemble * (config.burn_in + nb_orbit * block + max_lag)
    return CorrelationSeries(lags, np.abs(signed), se, signed, config.orbit_len, config.ensemble,
                             config.burn_in, "orbit", evals)


def _correlation_ensemble(params, phi, psi, lags, config, quot, y_fix):
    M = config.ensemble
    if M < 2:
        raise ConfigError("the ensemble estimator needs at least 2 starts")
    rng = np.random.default_rng(config.seed)
    starts = random_points(rng, M)
    ph = np.empty((M, lags.size))
    ps = np.empty(M)
    K.ensemble_lagged(starts, config.burn_in, lags, *params._kargs, phi.code, psi.code, y_fix, quot, ph, ps)
    signed = (ph * ps[:, None]).mean(0) - ph.mean(0) * ps.mean()
    # delta-method standard error of a sample covariance
    dev = (ph - ph.mean(0)) * (ps - ps.mean())[:, None]
    se = dev.std(0, ddof=1) / math.sqrt(M)
    evals = M * (config.burn_in + int(lags[-1]) + 1)
    return CorrelationSeries(lags, np.abs(signed), se, signed, config.burn_in + int(lags[-1]) + 1, M,
                             config.burn_in, "ensemble", evals)


def fit_power_law(series, window=None) -> FitResult:
    """Least squares of log value on log n over ``window`` (inclusive).

    ``series`` is a CorrelationSeries or a pair (n, values).
    """
    if isinstance(series, CorrelationSeries):
        n, v = series.n, series.estimate
    else:
        n, v = (np.asarray(a, dtype=np.float64) for a in series)
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lo, hi = window if window is not None else (n.min(), n.max())
    sel = (n >= lo) & (n <= hi)
    if sel.sum() < 2:
        raise ConfigError(f"fewer than two points in window [{lo}, {hi}]")
    if np.any(v[sel] <= 0):
        raise NonpositiveValues(f"{int((v[sel] <= 0).sum())} nonpositive values in window [{lo}, {hi}]")
    res = sps.linregress(np.log(n[sel]), np.log(v[sel]))
    return FitResult(float(res.slope), float(res.intercept), float(res.stderr), (float(lo), float(hi)),
                     float(res.rvalue ** 2), int(sel.sum()))


def _autocov(block: np.ndarray, mean: float, kmax: int) -> np.ndarray:
    """Per-row autocovariance sums for lags 0..kmax via FFT (unnormalized)."""
    v = block - mean
    n = v.shape[1]
    size = 1 << int(math.ceil(math.log2(2 * n)))
    F = np.fft.rfft(v, size, axis=1)
    return np.fft.irfft(F * np.conj(F), size, axis=1)[:, : kmax + 1]


def clt_from_series(series: np.ndarray, chunk: int = 256, max_lag: int | None = None) -> CLTReport:
    """CLT pipeline on an (M, n) array of observable values.

    Sums are centered by the ensemble mean and scaled by sqrt(n); the
    variance is the Green-Kubo sum truncated at the first lag where the
    autocovariance drops below two standard errors; KS against N(0, sigma2).
    """
    series = np.asarray(series, dtype=np.float64)
    M, n = series.shape
    kmax = max_lag or min(n - 1, 4096)
    mean = float(series.mean())
    sums = series.sum(axis=1)
    z = (sums - sums.mean()) / math.sqrt(n)
    acc = np.zeros(kmax + 1)
    acc2 = np.zeros(kmax + 1)
    counts = n - np.arange(kmax + 1)
    for s in range(0, M, chunk):
        c = _autocov(series[s:s + chunk], mean, kmax) / counts
        acc += c.sum(0)
        acc2 += (c * c).sum(0)
    cov = acc / M
    se = np.sqrt(np.maximum(acc2 / M - cov * cov, 0.0) / M)
    below = np.nonzero(np.abs(cov[1:]) < 2.0 * se[1:])[0]
    Kc = int(below[0]) if below.size else kmax
    sigma2 = float(cov[0] + 2.0 * cov[1:Kc + 1].sum())
    if not sigma2 >= 1e-10:
        raise DegenerateVariance(f"Green-Kubo variance {sigma2:.3g} < 1e-10; the observable may be a coboundary")
    ks = sps.kstest(z, "norm", args=(0.0, math.sqrt(sigma2)))
    return CLTReport(sigma2, float(ks.statistic), float(ks.pvalue), M, n, Kc, sums=z)


def orbit_series(params: SolenoidParams, phi, starts: np.ndarray, n: int, burn_in: int = 0,
                 quotient: bool = True) -> np.ndarray:
    """(len(starts), n) array of phi along each orbit."""
    obs = get_observable(phi)
    q = bool(quotient and obs.x_only)
    y_fix = fixed_point(params).y
    out = np.empty((starts.shape[0], n))
    for k, (x, y, z) in enumerate(starts):
        K.observable_series(x, y, z, n, burn_in, *params._kargs, obs.code, y_fix, q, out[k])
    return out


def clt_test(params: SolenoidParams, phi, M: int, n: int, seed, burn_in: int = 0) -> CLTReport:
    """CLT check for Lebesgue-random starts; flags gamma >= 1/2."""
    if M < 500 or n < 1000:
        raise ConfigError("clt_test needs M >= 500 and n >= 1000")
    rng = np.random.default_rng(seed)
    series = orbit_series(params, phi, random_points(rng, M), n, burn_in)
    rep = clt_from_series(series)
    if params.circle.gamma >= 0.5:
        rep.outside_hypothesis = True
        rep.flags.append("outside CLT hypothesis: return-time tail exponent 1/gamma <= 2")
    return rep


def write_correlation_csv(path, series: CorrelationSeries):
    return write_csv(path, ["n", "c_hat", "stderr"], zip(series.n, series.estimate, series.stderr))


def write_clt_outputs(directory, rep: CLTReport):
    from pathlib import Path

    d = Path(directory)
    write_csv(d / "clt.csv", ["k", "normalized_sum"], enumerate(rep.sums if rep.sums is not None else []))
    meta = {k: v for k, v in asdict(rep).items() if k != "sums"}
    write_json(d / "clt_report.json", meta)
