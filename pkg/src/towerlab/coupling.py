"""Coupling two copies of a finite tower chain through simultaneous returns.

Both coordinates run the tower chain independently: one level per step, and
a fresh branch drawn with weights p on each return to the ground.  Stopping
times alternate between the coordinates:

    tau_1     = n0 + hat_R(F^n0 x)
    tau_{i+1} = tau_i + n0 + hat_R(F^{tau_i + n0} of the other coordinate)

and T is the first tau_i, i >= 2, at which both coordinates sit on the
ground.  Restarting the rule at T gives T_1 < T_2 < ...

Because every branch maps onto the whole ground with weights p, the part of a
product density that reaches the ground at T_i is a multiple of p (x) p.  The
extraction step therefore removes exactly a fraction eps of the unmatched
mass at each T_i, and the matched piece has equal marginals by symmetry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from ._io import write_csv
from .errors import CellBudgetExceeded, ConfigError, ExtractionNegative, HorizonExceeded, InsufficientSamples
from .tower import DensityVector, FiniteTowerModel, TowerStateIndex, hat_R_tail, tv_decay

__all__ = [
    "PairState",
    "CouplingRecord",
    "TTail",
    "TLaw",
    "E1E4Report",
    "ExtractionState",
    "ExtractionResult",
    "simulate_pair",
    "simulate_pairs",
    "replay_taus",
    "estimate_T_tail",
    "exact_T_law",
    "verify_E1_E4",
    "run_extraction",
    "e3_bound",
    "write_coupling_tail_csv",
    "write_e3_csv",
    "write_extraction_csv",
]


@dataclass(frozen=True)
class PairState:
    s: TowerStateIndex
    s_prime: TowerStateIndex


@dataclass
class CouplingRecord:
    taus: list[int]
    T: int | None
    Ts: list[int]
    seed: int | None
    x_choices: list[int] = field(default_factory=list)
    y_choices: list[int] = field(default_factory=list)
    start: PairState | None = None
    censored: bool = False


def _seed_int(seed) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# compiled pair chain


@numba.njit(cache=True)
def _draw(cdf):
    u = np.random.random()
    j = np.searchsorted(cdf, u, side="right")
    return min(j, cdf.size - 1)


@numba.njit(cache=True)
def _advance(R, cdf, br, lev, m, choices, nch):
    """Advance one coordinate m steps; landing branches go to ``choices``."""
    while m > 0:
        rem = R[br] - 1 - lev
        if m <= rem:
            lev += m
            m = 0
        else:
            m -= rem + 1
            br = _draw(cdf)
            lev = 0
            if nch < choices.size:
                choices[nch] = br
            nch += 1
    return br, lev, nch


@numba.njit(cache=True)
def _run_pair(R, cdf, xb, xl, yb, yl, n0, horizon, taus, Ts, xch, ych):
    """One pair.  Returns (n_taus, n_Ts, n_xch, n_ych, censored).

    ``taus`` holds the stopping times of the first round (up to T); later
    rounds only contribute T_k to ``Ts``.
    """
    t = 0
    i = 0
    turn = 0
    ntau = 0
    nT = 0
    nx = 0
    ny = 0
    first_round = True
    while True:
        xb, xl, nx = _advance(R, cdf, xb, xl, n0, xch, nx)
        yb, yl, ny = _advance(R, cdf, yb, yl, n0, ych, ny)
        t += n0
        if turn == 0:
            h = 0 if xl == 0 else R[xb] - xl
        else:
            h = 0 if yl == 0 else R[yb] - yl
        xb, xl, nx = _advance(R, cdf, xb, xl, h, xch, nx)
        yb, yl, ny = _advance(R, cdf, yb, yl, h, ych, ny)
        t += h
        if t > horizon:
            return ntau, nT, nx, ny, nT == 0
        i += 1
        if first_round and ntau < taus.size:
            taus[ntau] = t
            ntau += 1
        if i >= 2 and xl == 0 and yl == 0:
            if nT < Ts.size:
                Ts[nT] = t
                nT += 1
            if nT >= Ts.size:
                return ntau, nT, nx, ny, False
            first_round = False
            i = 0
            turn = 0
        else:
            turn = 1 - turn


@numba.njit(cache=True)
def _run_many(R, cdf, cell_cdf_x, cell_cdf_y, cell_branch, cell_level, n0, horizon, m, seed,
              max_taus, max_Ts, T_out, cens_out, taus_out, ntau_out, Ts_out, nT_out):
    np.random.seed(seed)
    xch = np.empty(0, dtype=np.int64)
    ych = np.empty(0, dtype=np.int64)
    taus = np.empty(max_taus, dtype=np.int64)
    Ts = np.empty(max_Ts, dtype=np.int64)
    for k in range(m):
        a = _draw(cell_cdf_x)
        b = _draw(cell_cdf_y)
        ntau, nT, _, _, cens = _run_pair(R, cdf, cell_branch[a], cell_level[a], cell_branch[b], cell_level[b],
                                         n0, horizon, taus, Ts, xch, ych)
        ntau_out[k] = ntau
        nT_out[k] = nT
        for j in range(min(ntau, max_taus)):
            taus_out[k, j] = taus[j]
        for j in range(min(nT, max_Ts)):
            Ts_out[k, j] = Ts[j]
        T_out[k] = Ts[0] if nT > 0 else -1
        cens_out[k] = cens


def _model_arrays(model: FiniteTowerModel):
    cdf = np.cumsum(model.p)
    cdf[-1] = 1.0
    return model.R.astype(np.int64), cdf


def _cell_cdf(d: DensityVector):
    c = np.cumsum(d.masses)
    return c / c[-1]


def _check_n0(n0, horizon):
    if n0 < 1:
        raise ConfigError("n0 must be >= 1")
    if horizon < 2 * n0:
        raise ConfigError("horizon must be >= 2*n0")


def simulate_pair(model: FiniteTowerModel, lam: DensityVector, lam2: DensityVector, n0: int, horizon: int,
                  seed, max_events: int = 4096) -> CouplingRecord:
    """One sampled pair with its stopping times, T and T_1 < T_2 < ... <= horizon.

    Raises HorizonExceeded (carrying the partial record) if T itself falls
    beyond the horizon.
    """
    _check_n0(n0, horizon)
    R, cdf = _model_arrays(model)
    s = _seed_int(seed)
    rng = np.random.default_rng(s)
    a = int(np.searchsorted(_cell_cdf(lam), rng.random(), side="right"))
    b = int(np.searchsorted(_cell_cdf(lam2), rng.random(), side="right"))
    a, b = min(a, model.n_cells - 1), min(b, model.n_cells - 1)
    taus = np.empty(max_events, dtype=np.int64)
    Ts = np.empty(max_events, dtype=np.int64)
    xch = np.empty(max_events, dtype=np.int64)
    ych = np.empty(max_events, dtype=np.int64)
    _seed_numba(s)
    xb, xl = int(model.cell_branch[a]), int(model.cell_level[a])
    yb, yl = int(model.cell_branch[b]), int(model.cell_level[b])
    ntau, nT, nx, ny, cens = _run_pair(R, cdf, xb, xl, yb, yl, n0, horizon, taus, Ts, xch, ych)
    rec = CouplingRecord(
        taus=taus[:ntau].tolist(),
        T=int(Ts[0]) if nT else None,
        Ts=Ts[:nT].tolist(),
        seed=seed,
        x_choices=xch[: min(nx, max_events)].tolist(),
        y_choices=ych[: min(ny, max_events)].tolist(),
        start=PairState(TowerStateIndex(xb, xl), TowerStateIndex(yb, yl)),
        censored=bool(cens),
    )
    if nT == 0:
        raise HorizonExceeded(f"T > horizon {horizon}", record=rec)
    return rec


@numba.njit(cache=True)
def _seed_numba(s):
    np.random.seed(s)


@dataclass
class PairBatch:
    T: np.ndarray  # -1 where censored before the first T
    censored: np.ndarray
    taus: np.ndarray  # (m, max_taus), first-round stopping times, -1 padded
    n_taus: np.ndarray
    Ts: np.ndarray  # (m, max_Ts), -1 padded
    n_Ts: np.ndarray
    n0: int
    horizon: int


def simulate_pairs(model: FiniteTowerModel, lam: DensityVector, lam2: DensityVector, n0: int, horizon: int,
                   m: int, seed, max_taus: int = 64, max_Ts: int = 64) -> PairBatch:
    """m independent pairs from lam x lam2, compiled."""
    _check_n0(n0, horizon)
    R, cdf = _model_arrays(model)
    T = np.empty(m, dtype=np.int64)
    cens = np.empty(m, dtype=np.bool_)
    taus = np.full((m, max_taus), -1, dtype=np.int64)
    ntau = np.empty(m, dtype=np.int64)
    Ts = np.full((m, max_Ts), -1, dtype=np.int64)
    nT = np.empty(m, dtype=np.int64)
    _run_many(R, cdf, _cell_cdf(lam), _cell_cdf(lam2), model.cell_branch.astype(np.int64),
              model.cell_level.astype(np.int64), n0, horizon, m, _seed_int(seed), max_taus, max_Ts,
              T, cens, taus, ntau, Ts, nT)
    return PairBatch(T, cens, taus, ntau, Ts, nT, n0, horizon)


def replay_taus(model: FiniteTowerModel, start: PairState, x_choices, y_choices, n0: int, horizon: int):
    """Stopping times of the first round from an itinerary, without randomness.

    Returns (taus, T) where T is None if the choices run out or the horizon
    is passed first.  Landings at T itself need no choice.
    """
    R = model.R
    st = [[start.s.branch, start.s.level], [start.s_prime.branch, start.s_prime.level]]
    ch = [list(x_choices), list(y_choices)]
    used = [0, 0]
    taus = []
    t = 0
    turn = 0
    try:
        while t <= horizon:
            for c in (0, 1):
                _advance_lazy(st, c, n0, R, ch, used)
            t += n0
            br, lev = st[turn]
            h = 0 if lev == 0 else int(R[br]) - lev
            for c in (0, 1):
                _advance_lazy(st, c, h, R, ch, used)
            t += h
            if t > horizon:
                break
            taus.append(t)
            if len(taus) >= 2 and st[0][1] == 0 and st[1][1] == 0:
                return taus, t
            turn = 1 - turn
    except IndexError:
        pass
    return taus, None


def _advance_lazy(st, c, m, R, ch, used):
    """Advance m steps; a landing on the final step leaves the branch open (-1)."""
    br, lev = st[c]
    while m > 0:
        if br < 0:
            if used[c] >= len(ch[c]):
                raise IndexError
            br = ch[c][used[c]]
            used[c] += 1
        rem = int(R[br]) - 1 - lev
        if m <= rem:
            lev += m
            m = 0
        else:
            m -= rem + 1
            br, lev = -1, 0
    st[c] = [br, lev]


# ---------------------------------------------------------------------------
# tail of T


@dataclass
class TTail:
    n: np.ndarray
    p_hat: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    censored: int
    samples: int


def _wilson(k, m, z=1.959963984540054):
    ph = k / m
    den = 1 + z * z / m
    centre = (ph + z * z / (2 * m)) / den
    half = z * np.sqrt(ph * (1 - ph) / m + z * z / (4 * m * m)) / den
    return np.clip(centre - half, 0, 1), np.clip(centre + half, 0, 1)


def estimate_T_tail(model: FiniteTowerModel, lam: DensityVector, lam2: DensityVector, n0: int, m: int,
                    horizon: int, seed=0) -> TTail:
    """Empirical P{T > n}, n = 0..horizon, with Wilson 95% bands.

    Censored pairs count as T > n for every n up to the horizon.
    """
    if m < 1000:
        raise ConfigError("need at least 1000 pairs")
    batch = simulate_pairs(model, lam, lam2, n0, horizon, m, seed, max_taus=1, max_Ts=1)
    T = np.where(batch.T < 0, horizon + 1, batch.T)
    counts = np.bincount(np.minimum(T, horizon + 1), minlength=horizon + 2)
    # number with T > n
    above = m - np.cumsum(counts)[: horizon + 1]
    lo, hi = _wilson(above, m)
    return TTail(np.arange(horizon + 1), above / m, lo, hi, int((batch.T < 0).sum()), m)


# ---------------------------------------------------------------------------
# exact law of T_1 < T_2 < ... by dynamic programming over pair states


@dataclass
class TLaw:
    """cdf[k, n] = P{T_{k+1} <= n}; ``survival`` = P{T > n}."""

    cdf: np.ndarray
    horizon: int

    @property
    def survival(self) -> np.ndarray:
        return 1.0 - self.cdf[0]

    def between(self, i: int) -> np.ndarray:
        """P{T_i <= n < T_{i+1}} for i >= 1."""
        nxt = self.cdf[i] if i < self.cdf.shape[0] else np.zeros(self.horizon + 1)
        return self.cdf[i - 1] - nxt


def _kernel(model):
    nc = model.n_cells
    P = np.zeros((nc, nc))
    for c in range(nc):
        if model.cell_level[c] == model.R[model.cell_branch[c]] - 1:
            P[c, model.offsets] = model.p
        else:
            P[c, c + 1] = 1.0
    return P


def exact_T_law(model: FiniteTowerModel, lam: DensityVector, lam2: DensityVector, n0: int, horizon: int,
                max_rounds: int | None = None, max_cells: int = 400) -> TLaw:
    """Exact distribution of T_1 < T_2 < ... up to ``horizon``.

    The state at each stopping time is a joint law over (time, cell, cell);
    coordinates move independently between stopping times, so each stage is
    a pair of one-coordinate kernel powers.
    """
    _check_n0(n0, horizon)
    nc = model.n_cells
    if nc > max_cells:
        raise ConfigError(f"{nc} tower cells is too many for the exact pair law")
    H = horizon
    P = _kernel(model)
    powers = [np.eye(nc)]
    for _ in range(H):
        powers.append(powers[-1] @ P)
    hat = np.where(model.ground_mask, 0, model.R[model.cell_branch] - model.cell_level)
    land = np.zeros(nc)
    land[model.offsets] = model.p
    g = model.offsets
    Pn0 = powers[n0]
    max_rounds = max_rounds or H // (2 * n0) + 1

    S = np.zeros((H + 1, nc, nc))
    S[0] = np.outer(lam.masses, lam2.masses)
    cdfs = []
    for _ in range(max_rounds):
        absorbed = np.zeros((H + 1, nc, nc))
        Q = S
        i = 0
        turn = 0
        while Q.sum() > 1e-300:
            M = np.zeros_like(Q)
            M[n0:] = np.einsum("ia,tij,jb->tab", Pn0, Q[: H + 1 - n0], Pn0, optimize=True)
            Qn = np.zeros_like(Q)
            for c in range(nc):
                h = int(hat[c])
                if h > H:
                    continue
                if turn == 0:
                    moved = M[: H + 1 - h, c, :] @ powers[h]  # (t, b)
                    if h == 0:
                        Qn[:, c, :] += moved
                    else:
                        Qn[h:] += land[None, :, None] * moved[:, None, :]
                else:
                    moved = M[: H + 1 - h, :, c] @ powers[h]
                    if h == 0:
                        Qn[:, :, c] += moved
                    else:
                        Qn[h:] += moved[:, :, None] * land[None, None, :]
            i += 1
            if i >= 2:
                both = Qn[:, g[:, None], g[None, :]]
                absorbed[:, g[:, None], g[None, :]] += both
                Qn[:, g[:, None], g[None, :]] = 0.0
            Q = Qn
            turn = 1 - turn
        cdfs.append(np.cumsum(absorbed.sum(axis=(1, 2))))
        if absorbed.sum() < 1e-300:
            break
        S = absorbed
    return TLaw(np.array(cdfs), H)


def e3_bound(law: TLaw, eps1: float, K1: float = 2.0) -> np.ndarray:
    """2 P{T > n} + K1 sum_{i>=1} (1 - eps1)^i P{T_i <= n < T_{i+1}}."""
    out = 2.0 * law.survival
    for i in range(1, law.cdf.shape[0] + 1):
        out = out + K1 * (1.0 - eps1) ** i * law.between(i)
    return out


# ---------------------------------------------------------------------------
# (E1), (E2), (E4) from samples


@dataclass
class E1E4Report:
    eps0: float
    K0: float
    K2: float
    bins: dict  # (i, gap) -> (samples, frequency of T = tau_i)
    excluded: list  # bins below the sample threshold
    samples: int


def verify_E1_E4(model: FiniteTowerModel, lam: DensityVector, lam2: DensityVector, n0: int, m: int,
                 horizon: int = 2000, seed=0, min_count: int = 50, max_taus: int = 64) -> E1E4Report:
    """Conditional return frequencies and gap-tail ratios from m sampled pairs.

    Histories with T > tau_{i-1} are binned by (i, tau_i - tau_{i-1}).  eps0 is
    the smallest frequency of {T = tau_i} over bins with at least
    ``min_count`` samples, for i >= 2.  K0 is the largest ratio of the
    conditional tail P{tau_{i+1} - tau_i - n0 > n | bin} to m{hat R > n}; K2
    the largest ratio of P{T_2 - T_1 > n} to P{T > n} for the stationary pair.
    """
    batch = simulate_pairs(model, lam, lam2, n0, horizon, m, seed, max_taus=max_taus, max_Ts=2)
    counts: dict = {}
    hits: dict = {}
    gap_tails: dict = {}
    for k in range(m):
        nt = min(int(batch.n_taus[k]), max_taus)
        row = batch.taus[k, :nt]
        T = batch.T[k]
        prev = 0
        for i in range(nt):
            key = (i + 1, int(row[i] - prev))
            counts[key] = counts.get(key, 0) + 1
            if row[i] == T:
                hits[key] = hits.get(key, 0) + 1
            if i + 1 < nt:
                gap_tails.setdefault(key, []).append(int(row[i + 1] - row[i]) - n0)
            prev = row[i]
            if row[i] == T:
                break
    bins, excluded = {}, []
    for key, c in counts.items():
        if c < min_count:
            excluded.append(key)
            continue
        bins[key] = (c, hits.get(key, 0) / c)
    freq2 = [f for (i, _), (c, f) in bins.items() if i >= 2]
    if not freq2:
        raise InsufficientSamples(f"no bin with i >= 2 reached {min_count} samples")
    eps0 = float(min(freq2))

    mhat = hat_R_tail(model, int(model.R.max()) + 1)
    mhat = mhat / model.mean_return
    K0 = 0.0
    for key, gaps in gap_tails.items():
        if key not in bins:
            continue
        g = np.asarray(gaps)
        for n in range(mhat.size):
            if mhat[n] <= 0:
                break
            K0 = max(K0, float((g > n).mean() / mhat[n]))

    # (E4): renewal increments against T from the stationary pair
    nu = DensityVector.uniform(model)
    stat = simulate_pairs(model, nu, nu, n0, horizon, m, _seed_int(seed) + 1, max_taus=1, max_Ts=1)
    Ts_ok = batch.n_Ts >= 2
    inc = (batch.Ts[Ts_ok, 1] - batch.Ts[Ts_ok, 0]) if Ts_ok.any() else np.empty(0, dtype=np.int64)
    Tst = stat.T[stat.T >= 0]
    K2 = 0.0
    if inc.size and Tst.size:
        for n in range(0, int(np.percentile(Tst, 99)) + 1):
            den = (Tst > n).mean()
            if den * Tst.size < min_count:
                break
            K2 = max(K2, float((inc > n).mean() / den))
    return E1E4Report(eps0, K0, K2, bins, sorted(excluded), m)


# ---------------------------------------------------------------------------
# extraction over joint-return cells


def _enumerate(model, start, n0, horizon):
    """First-round itineraries from ``start``, grouped by their value of T.

    A branch is chosen only when a coordinate sitting on the ground has to
    move again, so the landings at T stay free and every itinerary maps onto
    the whole ground pair.  Itineraries reaching the same pair state at the
    same time share their future, so they are merged on the way.

    Returns {T: (weight, itinerary count)} for T <= horizon and the weight cut
    off by the horizon.  Weights are products of branch probabilities.
    """
    R, p = model.R, model.p

    def st(c):
        return (-1, 0) if c < 0 else (int(model.cell_branch[c]), int(model.cell_level[c]))

    # key: (t, i, turn, phase, target, x, y); phase 0 heads to t + n0, phase 1 to tau
    front = {(0, 0, 0, 0, n0, st(start[0]), st(start[1])): (1.0, 1)}
    out: dict = {}
    lost = 0.0

    def push(store, key, w, c):
        ow, oc = store.get(key, (0.0, 0))
        store[key] = (ow + w, oc + c)

    while front:
        t_min = min(k[0] for k in front)
        now = {k: v for k, v in front.items() if k[0] == t_min}
        for k in now:
            del front[k]
        while now:
            key, (w, cnt) = now.popitem()
            t, i, turn, phase, target, x, y = key
            if target > horizon:
                lost += w
                continue
            if t < target and (x[0] < 0 or y[0] < 0):
                for j in range(len(p)):
                    nk = (t, i, turn, phase, target, (j, 0), y) if x[0] < 0 else (t, i, turn, phase, target, x, (j, 0))
                    push(now, nk, w * p[j], cnt)
                continue
            if t < target:
                dx = int(R[x[0]]) - x[1]
                dy = int(R[y[0]]) - y[1]
                step = min(dx, dy, target - t)
                nx = (-1, 0) if step == dx else (x[0], x[1] + step)
                ny = (-1, 0) if step == dy else (y[0], y[1] + step)
                push(front, (t + step, i, turn, phase, target, nx, ny), w, cnt)
                continue
            if phase == 0:
                cur = x if turn == 0 else y
                h = 0 if cur[1] == 0 else int(R[cur[0]]) - cur[1]
                push(now if h == 0 else front, (t, i, turn, 1, t + h, x, y), w, cnt)
                continue
            i += 1
            if i >= 2 and x[1] == 0 and y[1] == 0:
                ow, oc = out.get(t, (0.0, 0))
                out[t] = (ow + w, oc + cnt)
                continue
            push(front, (t, i, 1 - turn, 0, t + n0, x, y), w, cnt)
    return out, lost


@dataclass
class ExtractionState:
    depth: int
    n_cells: int  # depth 1: (start pair, T_1); deeper: (T_{i-1}, T_i)
    n_itineraries: float
    sup_ratio: float  # max over cells of Phi_i / Phi_{i-1}
    extracted_mass: float
    residual_mass: float
    unresolved_mass: float  # mass whose T_i lies past the horizon
    matching_defect: float
    eps: float


@dataclass
class ExtractionResult:
    history: list[ExtractionState]
    eps: float
    eps1: float
    i1: int
    K1: float
    K1_fit: float
    ledger_defect: float
    n: np.ndarray
    tv_exact: np.ndarray
    bound: np.ndarray
    dominated: np.ndarray


def run_extraction(model: FiniteTowerModel, lam: DensityVector, lam2: DensityVector, n0: int, eps: float = 0.1,
                   i_max: int = 4, horizon: int = 60, tv_horizon: int | None = None, budget: int = 200_000,
                   auto_halve: bool = True) -> ExtractionResult:
    """Extraction on the joint-return cells of lam x lam2, then the (E3) check.

    Depth-i cells are itineraries up to T_i, built as a depth-(i-1) cell
    followed by a fresh first-return itinerary from the ground; only cells
    with T_i <= horizon are resolved.
    """
    if not 0 < eps <= 1:
        raise ConfigError("eps must lie in (0, 1]")
    _check_n0(n0, horizon)
    while True:
        try:
            return _extract(model, lam, lam2, n0, eps, i_max, horizon, tv_horizon, budget)
        except ExtractionNegative:
            if not auto_halve or eps < 1e-6:
                raise
            eps /= 2


def _extract(model, lam, lam2, n0, eps, i_max, horizon, tv_horizon, budget):
    mu, mu2 = lam.masses, lam2.masses
    ground_p = model.p
    # depth-1 cells: (start pair, T_1); value = unmatched mass of the cell
    times, level, itins = [], [], []
    unresolved = 0.0
    for a in np.nonzero(mu)[0]:
        for b in np.nonzero(mu2)[0]:
            groups, lost = _enumerate(model, (int(a), int(b)), n0, horizon)
            m_ab = mu[a] * mu2[b]
            for T, (w, c) in groups.items():
                times.append(T)
                level.append(m_ab * w)
                itins.append(c)
            unresolved += m_ab * lost
    times = np.array(times, dtype=np.int64)
    level = np.array(level)
    itins = np.array(itins, dtype=np.float64)  # counts overflow int64 at depth
    fresh, fresh_lost = _enumerate(model, (-1, -1), n0, horizon)
    ft = np.array(sorted(fresh), dtype=np.int64)
    fw = np.array([fresh[t][0] for t in ft])
    fc = np.array([fresh[t][1] for t in ft], dtype=np.float64)

    history = []
    total_extracted = 0.0
    for depth in range(1, i_max + 1):
        if depth > 1:
            # cells with the same T_{i-1} share their future and carry the same
            # fraction, so merging them changes no extraction quantity
            times, inv = np.unique(times, return_inverse=True)
            level = np.bincount(inv, weights=level)
            itins = np.bincount(inv, weights=itins)
            need = int(np.searchsorted(ft, horizon - times, side="right").sum())
            if need > budget:
                raise CellBudgetExceeded(f"depth {depth} needs {need} cells within the horizon; budget {budget}")
            unresolved += float(level.sum()) * fresh_lost
            cut = np.searchsorted(ft, horizon - times, side="right")
            # mass whose next return lands past the horizon
            cw = np.concatenate([[0.0], np.cumsum(fw)])
            unresolved += float(level @ (cw[-1] - cw[cut]))
            rows = np.repeat(np.arange(times.size), cut)
            cols = np.concatenate([np.arange(c) for c in cut]) if cut.size else np.empty(0, dtype=np.int64)
            times = times[rows] + ft[cols]
            level = level[rows] * fw[cols]
            itins = itins[rows] * fc[cols]
        if level.size == 0:
            break
        # each cell covers the whole ground pair at T_i with density
        # proportional to p (x) p, so Phi/J is the constant cell mass
        ratio_density = level.copy()
        min_in_cell = ratio_density
        new_level = ratio_density - eps * min_in_cell
        if np.any(new_level < -1e-15):
            raise ExtractionNegative(f"eps={eps} removes more than the available density")
        extracted = level - new_level
        # matching: the extracted image and both of its marginals on the ground
        joint = np.einsum("k,i,j->ij", extracted, ground_p, ground_p)
        defect = float(np.abs(joint.sum(axis=1) - joint.sum(axis=0)).max())
        live = level > 0
        ratio = float(np.max(new_level[live] / level[live])) if live.any() else 0.0
        total_extracted += float(extracted.sum())
        level = new_level
        history.append(ExtractionState(depth, int(level.size), float(itins.sum()), ratio, float(extracted.sum()),
                                       float(level.sum()) + unresolved, unresolved, defect, eps))

    ledger = abs(total_extracted + history[-1].residual_mass - lam.mass * lam2.mass)
    eps1 = 1.0 - max(h.sup_ratio for h in history)
    H = tv_horizon or horizon
    law = exact_T_law(model, lam, lam2, n0, H)
    tv = tv_decay(model, lam, lam2, H)
    base = 2.0 * law.survival
    rest = e3_bound(law, eps1, 1.0) - base
    n_fit = min(2 * n0, H)
    K1_fit = max(0.0, (tv[n_fit] - base[n_fit]) / rest[n_fit]) if rest[n_fit] > 0 else 0.0
    K1 = 2.0
    bound = base + K1 * rest
    return ExtractionResult(history, eps, eps1, 1, K1, K1_fit, ledger, np.arange(H + 1), tv, bound,
                            tv <= bound * (1 + 1e-12) + 1e-15)


# ---------------------------------------------------------------------------
# files


def write_coupling_tail_csv(path, tail: TTail):
    rows = ((int(n), float(p), float(a), float(b), tail.censored) for n, p, a, b in zip(tail.n, tail.p_hat, tail.lo, tail.hi))
    return write_csv(path, ["n", "p_hat", "lo", "hi", "censored"], rows)


def write_e3_csv(path, res: ExtractionResult):
    return write_csv(path, ["n", "tv_exact", "e3_bound"], zip(res.n, res.tv_exact, res.bound))


def write_extraction_csv(path, res: ExtractionResult):
    return write_csv(path, ["i", "sup_ratio", "extracted_mass"],
                     ((h.depth, h.sup_ratio, h.extracted_mass) for h in res.history))
