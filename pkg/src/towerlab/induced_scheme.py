"""Return-time partition of the circle and first-return partition of I_1.

Base partition: I_1 is cut into J_n = [x_{n+1}, x_n] and I_d into
J'_n = [x'_n, x'_{n+1}]; the middle domains I_2..I_{d-1} have return time 1
and J_n, J'_n have return time n + 1.  Each element maps under f^R onto a
union of fundamental domains.

First-return partition: points of I_1 follow the stopping times
S_{i+1} = S_i + R(f^{S_i} x) until the image first lands in I_1; that time is
R*.  Cells are pulled back from I_1 through inverse branches, so their
endpoints are as accurate as the bisection (run in long double here).

For the first element J_n the pull-back through f^{n+1} is shared by every
continuation, so it is tabulated once per n on a common point set.  For
d = 2 every cell closes after exactly two elements (J_n then J'_m), giving
cells P(n, m) with R* = n + m + 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import circle_map as cm
from ._io import write_csv
from .circle_map import CircleMapParams
from .errors import TruncationTooCoarse

__all__ = [
    "BaseElement",
    "BasePartition",
    "CylinderCell",
    "TailSeries",
    "SchemeReport",
    "RStarPartition",
    "DeltaSeries",
    "DeltaCell",
    "SLOPE_BOUND",
    "build_base_partition",
    "build_rstar_partition",
    "forward_audit",
    "check_expansion_distortion",
    "delta_k",
    "delta_k_cell",
    "base_tail",
    "write_tails_csv",
    "write_delta_csv",
]

LD = np.longdouble

# unstable leaves are graphs over the circle with slope at most pi/(1 - 1/10)
SLOPE_BOUND = 10.0 * math.pi / 9.0


@dataclass(frozen=True)
class BaseElement:
    """One element of the return-time partition.

    ``seq`` lists (branch, count) runs: the orbit of the element visits those
    fundamental domains, in order, before f^R maps it onto ``image``.
    """

    id: str
    kind: str  # "J", "J'", or "I"
    index: int
    interval: tuple[float, float]
    R: int
    seq: tuple[tuple[int, int], ...]
    image: tuple[int, ...]

    @property
    def length(self) -> float:
        return self.interval[1] - self.interval[0]


class BasePartition(list):
    """List of BaseElement plus the boundary sequences it was cut from."""

    def __init__(self, params, n_max, elements, seqs):
        super().__init__(elements)
        self.params = params
        self.n_max = n_max
        self.seqs = seqs

    @property
    def tail_mass(self) -> float:
        """Mass of the two unresolved neighbourhoods of 0."""
        return float(self.seqs.xs[-1] - self.seqs.xs_prime[-1])

    @cached_property
    def seqs_ld(self):
        return cm.boundary_sequences(self.params, self.n_max + 1, dtype=LD)


def build_base_partition(params: CircleMapParams, n_max: int) -> BasePartition:
    """Middle domains with R = 1 and J_n, J'_n with R = n + 1 for n < n_max."""
    if n_max < 2:
        raise ValueError("n_max must be >= 2")
    d = params.degree
    seqs = cm.boundary_sequences(params, n_max)
    elements = []
    for br in params.branches[1:-1]:
        elements.append(
            BaseElement(f"I{br.index}", "I", br.index, (br.lo, br.hi), 1, ((br.index, 1),), tuple(range(1, d + 1)))
        )
    xs, xp = seqs.xs, seqs.xs_prime
    for n in range(n_max):
        elements.append(
            BaseElement(f"J{n}", "J", n, (float(xs[n + 1]), float(xs[n])), n + 1, ((1, n + 1),), tuple(range(2, d + 1)))
        )
    for n in range(n_max):
        elements.append(
            BaseElement(f"J'{n}", "J'", n, (float(xp[n]), float(xp[n + 1])), n + 1, ((d, n + 1),), tuple(range(1, d)))
        )
    return BasePartition(params, n_max, elements, seqs)


def base_tail(base: BasePartition) -> np.ndarray:
    """Leb{R > n} for n = 0..n_max; equals x_n + |x'_n| for n >= 1."""
    xs, xp = base.seqs.xs, base.seqs.xs_prime
    out = xs - xp
    out[0] = 1.0
    return out


# ---------------------------------------------------------------------------
# pulling points back through inverse branches


def _lifted_targets(k, pts, upper):
    """Lifted targets in [k, k+1] for circle points; ``upper`` ends map to k+1."""
    one = pts.dtype.type(1)
    kk = pts.dtype.type(k)
    t = kk + np.mod(pts - kk, one)
    return np.where(upper & (t == kk), kk + one, t)


def _to_chart(x):
    """Bring extended coordinates back to the chart, keeping 1/2 as 1/2."""
    return np.where(x > x.dtype.type(0.5), x - x.dtype.type(1), x)


def _pullback(params, seq, pts, upper):
    """Apply the inverse of the orbit segment described by ``seq`` to pts."""
    pts = np.asarray(pts)
    upper = np.asarray(upper, dtype=bool)
    for branch, count in reversed(seq):
        k = params.branches[branch - 1].k
        for _ in range(count):
            t = _lifted_targets(k, pts, upper)
            pts = _to_chart(np.asarray(cm.inverse_lift(params, branch, t)))
    return pts


# ---------------------------------------------------------------------------
# the first-return partition


@dataclass(frozen=True)
class CylinderCell:
    itinerary: tuple[str, ...]
    interval: tuple[float, float]
    stopping_times: tuple[int, ...]
    r_star: int
    status: str  # "closed" or "open"

    @property
    def length(self) -> float:
        return self.interval[1] - self.interval[0]


@dataclass
class TailSeries:
    """Tail masses for n = 0..len-1.

    ``mass_Rstar[n]`` counts closed cells with R* > n plus open cells already
    known to have R* > n; ``ambiguous[n]`` is the open mass whose R* relative
    to n is unknown.  ``truncation_mass`` is the total open mass.
    """

    n: np.ndarray
    mass_R: np.ndarray
    mass_Rstar: np.ndarray
    ambiguous: np.ndarray
    truncation_mass: float


@dataclass
class RStarPartition:
    """Cells of the first-return partition, stored column-wise.

    Columns ``a``, ``b`` (long double endpoints), ``r_star`` and ``status``
    cover every cell produced; the itinerary of cell i is recovered from
    ``first`` (J index), ``second`` (element of the image) and, for deeper
    cells, ``deep_itineraries``.
    """

    params: CircleMapParams
    base: BasePartition
    max_time: int
    min_len: float
    a: np.ndarray
    b: np.ndarray
    r_star: np.ndarray
    first: np.ndarray
    second: np.ndarray
    closed: np.ndarray
    y_ids: list
    table: np.ndarray | None = None
    y_pos: dict = field(default_factory=dict)
    deep_itineraries: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.a.size)

    @property
    def lengths(self) -> np.ndarray:
        return self.b - self.a

    @property
    def n_closed(self) -> int:
        return int(self.closed.sum())

    @property
    def truncation_mass(self) -> float:
        return float(self.lengths[~self.closed].sum())

    def cell(self, i: int) -> CylinderCell:
        i = int(i)
        if i in self.deep_itineraries:
            itin, stops = self.deep_itineraries[i]
        else:
            n = int(self.first[i])
            itin = [f"J{n}"]
            stops = [n + 1]
            if self.second[i] >= 0:
                el = self.y_ids[self.second[i]]
                itin.append(el.id)
                stops.append(stops[-1] + el.R)
            itin, stops = tuple(itin), tuple(stops)
        return CylinderCell(
            itinerary=tuple(itin),
            interval=(float(self.a[i]), float(self.b[i])),
            stopping_times=tuple(stops),
            r_star=int(self.r_star[i]),
            status="closed" if self.closed[i] else "open",
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.cell(i)

    def closed_indices(self) -> np.ndarray:
        return np.nonzero(self.closed)[0]


def _u_elements(base: BasePartition):
    """Elements lying in I_2..I_d, in increasing order of branch-1 target.

    Returns a list of (element, lo_pt, z_hi_pt, hi_pt, z_upper) where the
    closing piece Z = [lo, z_hi] is the part sent into I_1 by f^R.
    """
    params = base.params
    d = params.degree
    seqs = base.seqs_ld
    x0 = seqs.xs[0]
    zero = LD(0)
    out = []
    for el in base:
        if el.kind == "I":
            lo, hi = _branch_endpoints_ld(params, el.index)
            z_hi = _pullback(params, el.seq, np.array([x0], dtype=LD), np.array([True]))[0]
            out.append((el, lo, z_hi, hi))
    xp = seqs.xs_prime
    if d == 2:
        for el in base:
            if el.kind == "J'":
                m = el.index
                out.append((el, xp[m], xp[m + 1], xp[m + 1]))
    else:
        # Z_{J'_m} = inverse_d(Z_{J'_{m-1}}): first image of J'_0 hits I_1 on [-1, -1 + x0]
        z = _pullback(params, ((d, 1),), np.array([x0], dtype=LD), np.array([True]))[0]
        for el in base:
            if el.kind == "J'":
                m = el.index
                if m > 0:
                    z = _pullback(params, ((d, 1),), np.array([z], dtype=LD), np.array([True]))[0]
                out.append((el, xp[m], z, xp[m + 1]))
    # the unresolved neighbourhood [x'_{n_max}, 0] closes the list
    out.append((None, xp[base.n_max], zero, zero))
    return out


def _branch_endpoints_ld(params, j):
    br = params.branches[j - 1]
    lo, hi = cm._branch_bounds(params, br, np.dtype(LD))
    return _to_chart(np.array([lo], dtype=LD))[0], _to_chart(np.array([hi], dtype=LD))[0]


def build_rstar_partition(params: CircleMapParams, base: BasePartition, max_time: int, min_len: float = 1e-12, max_deep_nodes: int = 200_000):
    """Enumerate first-return cells of I_1 up to stopping time ``max_time``.

    Cells with R* > max_time or length < min_len are kept as open cells; the
    tail series says how much mass that is at every threshold.
    """
    if base.params != params:
        raise ValueError("base partition was built for different parameters")
    if max_time < 2:
        raise ValueError("max_time must be >= 2")
    if base.n_max + 1 < max_time - 1:
        raise ValueError(f"base n_max={base.n_max} is too small for max_time={max_time}; need n_max >= max_time - 2")
    d = params.degree
    seqs = base.seqs_ld
    xs = seqs.xs
    n_max = base.n_max
    n_tab = min(n_max, max_time - 1)

    # common point set for the J_n pull-backs, ordered by branch-1 target
    uel = _u_elements(base)
    pts, upper, y_ids = [], [], []
    pos = {}
    for idx, (el, lo, z_hi, hi) in enumerate(uel):
        pos[idx] = (len(pts), len(pts) + 1)
        pts += [lo, z_hi]
        upper += [False, True]
        y_ids.append(el)
    pts.append(uel[-1][3])
    upper.append(True)
    pts = np.array(pts, dtype=LD)
    upper = np.array(upper, dtype=bool)
    # adjacent duplicates (Z == element, as for d = 2) are harmless but wasteful
    t0 = _lifted_targets(0, pts, upper)
    if np.any(np.diff(t0) < 0):
        raise AssertionError("pull-back point set is not ordered")
    keep = np.ones(pts.size, dtype=bool)
    keep[1:] = np.diff(t0) > 0
    remap = np.cumsum(keep) - 1
    t0 = t0[keep]
    y_pos = {i: (int(remap[p0]), int(remap[p1])) for i, (p0, p1) in pos.items()}
    last = int(remap[-1])

    table = np.empty((n_tab, t0.size), dtype=LD)
    cur = cm._bisect_lift(params, LD(0), xs[0], t0)
    table[0] = cur
    for n in range(1, n_tab):
        cur = cm._bisect_lift(params, LD(0), xs[n], cur)
        table[n] = cur

    a_parts, b_parts, r_parts, f_parts, s_parts, c_parts = [], [], [], [], [], []
    open_a, open_b, open_r, open_f = [], [], [], []
    n_el = len(uel) - 1  # excluding the neighbourhood of 0
    el_R = np.array([el.R for el in y_ids[:n_el]], dtype=np.int64)
    lo_idx = np.array([y_pos[i][0] for i in range(n_el)])
    z_idx = np.array([y_pos[i][1] for i in range(n_el)])
    next_lo = np.array([y_pos[i + 1][0] for i in range(n_el)])
    deep_seeds = []
    for n in range(n_tab):
        row = table[n]
        r = n + 1 + el_R
        ok = r <= max_time
        a = row[lo_idx[ok]]
        b = row[z_idx[ok]]
        a_parts.append(a)
        b_parts.append(b)
        r_parts.append(r[ok])
        f_parts.append(np.full(a.size, n, dtype=np.int32))
        s_parts.append(np.nonzero(ok)[0].astype(np.int32))
        c_parts.append((b - a) >= min_len)
        # elements beyond the time budget, then the neighbourhood of 0
        late = np.nonzero(~ok)[0]
        if d == 2:
            # late J'_m are the tail of the row; one open piece covers them and 0
            start = int(late[0]) if late.size else n_el
            open_a.append(row[lo_idx[start]] if start < n_el else row[y_pos[n_el][0]])
            open_b.append(row[last])
            open_r.append(n + 1 + (int(el_R[start]) if start < n_el else n_max + 1))
            open_f.append(n)
            continue
        for i in late:
            open_a.append(row[lo_idx[i]])
            open_b.append(row[z_idx[i]])
            open_r.append(n + 1 + el_R[i])
            open_f.append(n)
            if z_idx[i] != next_lo[i]:
                open_a.append(row[z_idx[i]])
                open_b.append(row[next_lo[i]])
                open_r.append(n + 1 + el_R[i])
                open_f.append(n)
        open_a.append(row[y_pos[n_el][0]])
        open_b.append(row[last])
        open_r.append(n + 2 + n_max)
        open_f.append(n)
        for i in np.nonzero(ok)[0]:
            if z_idx[i] != next_lo[i]:
                deep_seeds.append((n, i, row[z_idx[i]], row[next_lo[i]], n + 1 + el_R[i]))
    # J_n for n >= n_tab
    open_a.append(LD(0))
    open_b.append(xs[n_tab])
    open_r.append(n_tab + 1)
    open_f.append(n_tab)

    deep = _refine_deep(params, base, deep_seeds, y_ids, max_time, min_len, max_deep_nodes) if deep_seeds else None

    a = np.concatenate(a_parts + [np.array(open_a, dtype=LD)])
    b = np.concatenate(b_parts + [np.array(open_b, dtype=LD)])
    r_star = np.concatenate(r_parts + [np.array(open_r, dtype=np.int64)])
    first = np.concatenate(f_parts + [np.array(open_f, dtype=np.int32)])
    second = np.concatenate(s_parts + [np.full(len(open_a), -1, dtype=np.int32)])
    closed = np.concatenate(c_parts + [np.zeros(len(open_a), dtype=bool)])
    deep_its = {}
    if deep is not None:
        base_i = a.size
        a = np.concatenate([a, deep["a"]])
        b = np.concatenate([b, deep["b"]])
        r_star = np.concatenate([r_star, deep["r"]])
        first = np.concatenate([first, deep["first"]])
        second = np.concatenate([second, np.full(deep["a"].size, -1, dtype=np.int32)])
        closed = np.concatenate([closed, deep["closed"]])
        deep_its = {base_i + i: it for i, it in enumerate(deep["itins"])}
        # seeds were counted as whole pieces above only for d == 2, nothing to undo

    part = RStarPartition(
        params=params, base=base, max_time=max_time, min_len=min_len,
        a=a, b=b, r_star=r_star, first=first, second=second, closed=closed,
        y_ids=y_ids, table=table, y_pos=y_pos, deep_itineraries=deep_its,
    )
    tails = _tail_series(part)
    i1 = float(xs[0])
    if tails.truncation_mass > 0.1 * i1:
        raise TruncationTooCoarse(
            f"open mass {tails.truncation_mass:.3g} exceeds 10% of |I_1| = {i1:.3g}; raise max_time"
        )
    return part, tails


def _refine_deep(params, base, seeds, y_ids, max_time, min_len, max_nodes):
    """Breadth-first refinement of pieces that avoid I_1 after two elements.

    Only reached for d >= 3.  Each node pulls the image-side points of all
    its children back through its full branch sequence in one call.
    """
    seqs = base.seqs_ld
    uel = _u_elements(base)[:-1]
    n_mid = params.degree - 2
    out_a, out_b, out_r, out_f, out_c, itins = [], [], [], [], [], []
    queue = []
    for n, i, lo, hi, s in seeds:
        el = y_ids[i]
        seq = ((1, n + 1),) + el.seq
        queue.append((lo, hi, s, seq, (f"J{n}", el.id), (n + 1, s), n, el.kind))
    nodes = 0
    head = 0
    while head < len(queue):
        lo, hi, s, seq, itin, stops, n, kind = queue[head]
        head += 1
        nodes += 1
        if nodes > max_nodes or hi - lo < min_len:
            out_a.append(lo); out_b.append(hi); out_r.append(s + 1); out_f.append(n); out_c.append(False)
            itins.append((itin, stops))
            continue
        # the continuing piece maps onto I_2..I_d (middle) or I_2..I_{d-1} (J')
        m0 = base.n_max
        n_child = n_mid
        if kind == "I":
            # J'_m too late for the budget share one open piece with the tail
            m0 = min(max(max_time - s, 0), base.n_max)
            n_child += m0
        children = uel[:n_child]
        img = np.array([v for _, lo_c, z_c, hi_c in children for v in (lo_c, z_c, hi_c)], dtype=LD)
        up = np.tile(np.array([False, True, True]), n_child)
        if kind == "I":
            img = np.concatenate([img, np.array([seqs.xs_prime[m0], LD(0)], dtype=LD)])
            up = np.concatenate([up, [False, True]])
        pts = _pullback(params, seq, img, up)
        for c, (el, _, _, _) in enumerate(children):
            pa, pz, pb = pts[3 * c: 3 * c + 3]
            s2 = s + el.R
            it2 = itin + (el.id,)
            st2 = stops + (s2,)
            if s2 > max_time:
                out_a.append(pa); out_b.append(pb); out_r.append(s2); out_f.append(n); out_c.append(False)
                itins.append((it2, st2))
                continue
            out_a.append(pa); out_b.append(pz); out_r.append(s2); out_f.append(n)
            out_c.append(bool(pz - pa >= min_len))
            itins.append((it2, st2))
            if pb > pz:
                queue.append((pz, pb, s2, seq + el.seq, it2, st2, n, el.kind))
        if kind == "I":
            # [x'_{m0}, 0] inside the image stays open
            out_a.append(pts[-2]); out_b.append(pts[-1]); out_r.append(s + m0 + 1); out_f.append(n); out_c.append(False)
            itins.append((itin + ("tail",), stops))
    return {
        "a": np.array(out_a, dtype=LD), "b": np.array(out_b, dtype=LD),
        "r": np.array(out_r, dtype=np.int64), "first": np.array(out_f, dtype=np.int32),
        "closed": np.array(out_c, dtype=bool), "itins": itins,
    }


def _tail_series(part: RStarPartition) -> TailSeries:
    T = part.max_time
    lengths = part.lengths.astype(np.float64)
    r = part.r_star
    closed = part.closed
    n = np.arange(T + 1)
    # mass with R* (or its lower bound) equal to s
    closed_at = np.bincount(np.minimum(r[closed], T + 1), weights=lengths[closed], minlength=T + 2)
    open_at = np.bincount(np.minimum(r[~closed], T + 1), weights=lengths[~closed], minlength=T + 2)
    closed_gt = closed_at[::-1].cumsum()[::-1]  # [s] = mass with r >= s
    open_gt = open_at[::-1].cumsum()[::-1]
    mass_rstar = closed_gt[n + 1] + open_gt[n + 1]
    ambiguous = open_gt[0] - open_gt[n + 1]
    tail_r = base_tail(part.base)
    mass_r = np.full(T + 1, np.nan)
    k = min(T + 1, tail_r.size)
    mass_r[:k] = tail_r[:k]
    return TailSeries(n=n, mass_R=mass_r, mass_Rstar=mass_rstar, ambiguous=ambiguous,
                      truncation_mass=float(open_gt[0]))


def write_tails_csv(path, tails: TailSeries):
    rows = zip(tails.n, tails.mass_R, tails.mass_Rstar, tails.ambiguous)
    return write_csv(path, ["n", "mass_R", "mass_Rstar", "truncation_mass"], rows)


# ---------------------------------------------------------------------------
# forward checks: Markov property, expansion, distortion


@dataclass
class SchemeReport:
    beta_inv: float
    beta_inv_rstar: float
    distortion_C: float
    distortion_C_base: float
    gcd_R: int
    markov_max_defect: float
    n_cells_checked: int
    markov_fail_count: int

    @property
    def beta(self) -> float:
        return 1.0 / self.beta_inv


def forward_audit(part: RStarPartition, idx, samples: int = 5):
    """Iterate sample points of the chosen cells forward R* steps in long double.

    Returns (defect, logderiv) where ``defect[c]`` is the worse endpoint miss
    of f^{R*}(cell) against I_1 and ``logderiv[c, s]`` is log (f^{R*})' at
    the s-th sample (samples evenly spaced, endpoints included).
    """
    params = part.params
    idx = np.asarray(idx)
    if samples < 2:
        raise ValueError("samples must be >= 2")
    order = np.argsort(-part.r_star[idx], kind="stable")
    sel = idx[order]
    r = part.r_star[sel]
    a, b = part.a[sel], part.b[sel]
    frac = np.linspace(0, 1, samples).astype(LD)
    x = a[:, None] + (b - a)[:, None] * frac[None, :]
    x[:, -1] = b
    logd = np.zeros(x.shape, dtype=np.float64)
    active = r.size
    for s in range(int(r.max()) if r.size else 0):
        while active > 0 and r[active - 1] <= s:
            active -= 1
        xa = x[:active]
        logd[:active] += np.log(cm.deriv(params, xa).astype(np.float64))
        x[:active] = cm.eval(params, xa)
    x0 = part.base.seqs_ld.xs[0]
    da = np.abs(cm.reduce_circle(x[:, 0]))
    db = np.abs(cm.reduce_circle(x[:, -1] - x0))
    defect = np.maximum(da, db).astype(np.float64)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return defect[inv], logd[inv]


def _base_audit(base: BasePartition, n_elements: int, samples: int):
    """Minimum of (f^R)' and the distortion constant on J_n, J'_n, middles.

    The constant is the largest value of
    |log (f^i)'(x) - log (f^i)'(y)| * |J_{n-i}| / |f^i x - f^i y|.
    """
    params = base.params
    xs, xp = base.seqs.xs, base.seqs.xs_prime
    jl, jpl = base.seqs.j_lengths, base.seqs.j_prime_lengths
    n_el = min(n_elements, base.n_max)
    frac = np.linspace(0, 1, samples)
    best_min = np.inf
    best_C = 0.0
    for side in (0, 1):
        lo = xs[1 : n_el + 1] if side == 0 else xp[:n_el]
        hi = xs[:n_el] if side == 0 else xp[1 : n_el + 1]
        lens = jl if side == 0 else jpl
        x = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
        R = np.arange(1, n_el + 1)
        logd = np.zeros_like(x)
        for i in range(n_el):
            act = R > i
            if i > 0:
                # orbit of J_n is in J_{n-i} after i steps
                xa = x[act]
                ld = logd[act]
                dl = np.abs(np.diff(ld, axis=1))
                dx = np.abs(np.diff(xa, axis=1))
                lvl = (R[act] - 1 - i)
                ok = dx > 0
                ratio = np.where(ok, dl * lens[lvl][:, None] / np.where(ok, dx, 1.0), 0.0)
                best_C = max(best_C, float(ratio.max()))
            logd[act] += np.log(cm.deriv(params, x[act]))
            x[act] = cm.eval(params, x[act])
        best_min = min(best_min, float(np.exp(logd.min())))
    for br in params.branches[1:-1]:
        xm = np.linspace(br.lo, br.hi, samples)
        best_min = min(best_min, float(cm.deriv(params, xm).min()))
    return best_min, best_C


def check_expansion_distortion(params: CircleMapParams, cells: RStarPartition, samples: int = 5,
                               max_cells: int | None = None, base_elements: int = 256,
                               markov_tol: float = 1e-9) -> SchemeReport:
    """Measured expansion, distortion and gcd for a first-return partition."""
    if cells.params != params:
        raise ValueError("partition was built for different parameters")
    idx = cells.closed_indices()
    if idx.size == 0:
        raise ValueError("no closed cells to check")
    if max_cells is not None and idx.size > max_cells:
        deepest = idx[np.argsort(-cells.r_star[idx], kind="stable")[:200]]
        spread = idx[np.linspace(0, idx.size - 1, max(max_cells - 200, 1)).astype(np.int64)]
        idx = np.unique(np.concatenate([deepest, spread]))
    defect, logd = forward_audit(cells, idx, samples)
    spread = logd.max(axis=1) - logd.min(axis=1)
    beta_inv, c_base = _base_audit(cells.base, base_elements, samples)
    return SchemeReport(
        beta_inv=beta_inv,
        beta_inv_rstar=float(np.exp(logd.min())),
        distortion_C=float(spread.max()),
        distortion_C_base=c_base,
        gcd_R=int(np.gcd.reduce(np.unique(cells.r_star[cells.closed_indices()]).astype(np.int64))),
        markov_max_defect=float(defect.max()),
        n_cells_checked=int(idx.size),
        markov_fail_count=int((defect >= markov_tol).sum()),
    )


# ---------------------------------------------------------------------------
# diameters delta_k


@dataclass
class DeltaSeries:
    """delta_k for k = 1..k_max on the circle factor, with certification.

    ``lower`` is attained by explicit sets, ``upper`` bounds every set in the
    supremum; ``certified`` marks k where the two agree.  ``delta`` is the
    reported value: the upper bound times (1 + SLOPE_BOUND).
    """

    k: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    certified: np.ndarray
    argmax_level: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.upper * (1.0 + SLOPE_BOUND)


def _require_two_level(part: RStarPartition):
    if part.params.degree != 2:
        raise NotImplementedError("delta_k is implemented for degree 2 (two-element itineraries) only")


@dataclass
class _Levels:
    """Lengths and expansion lower bounds of the sets f^l(P), grouped by level.

    For d = 2, f^l(P(n, m)) is P(n - l, m) while l <= n and J'_{m - l'} after,
    so every such set is a table cell or a J' element.  Level = remaining
    time until the image covers I_1.
    """

    cell_len: np.ndarray      # (n_tab, n_max): |P(n, m)|
    cell_loglam: np.ndarray   # log of min (f^{n+m+2})' on P(n, m), lower bound
    jp_len: np.ndarray        # |J'_j|
    jp_loglam: np.ndarray
    tail_bound: float
    tail_level: int


def _levels(part: RStarPartition) -> _Levels:
    params = part.params
    base = part.base
    n_max = base.n_max
    T = part.table
    n_tab = T.shape[0]
    cols = np.array([part.y_pos[m][0] for m in range(n_max + 1)])
    ends = T[:, cols]  # ends[n, m] = left end of P(n, m), ends[n, m+1] its right end
    cell_len = (ends[:, 1:] - ends[:, :-1]).astype(np.float64)
    xp = base.seqs_ld.xs_prime
    jp_len = (xp[1:] - xp[:-1]).astype(np.float64)
    # min f' on J'_i sits at x'_{i+1}; on P(i, m) at its left end
    jp_loglam = np.cumsum(np.log(cm.deriv(params, xp[1:]).astype(np.float64)))
    cell_d = np.log(cm.deriv(params, ends[:, :-1]).astype(np.float64))
    cell_loglam = np.cumsum(cell_d, axis=0) + jp_loglam[None, :n_max]
    xs = base.seqs_ld.xs
    tail_bound = float(max(xs[n_tab] - xs[n_tab + 1], jp_len[-1]))
    return _Levels(cell_len, cell_loglam, jp_len, jp_loglam, tail_bound, min(n_tab, n_max) + 1)


def _cylinder_bound(lv: _Levels, k_max: int):
    """B[t] >= |C| for every return-map cylinder whose stopping time first reaches t.

    A cylinder either is one cell with R* >= t, or is the pull-back through a
    first cell with R* = s < t of a cylinder for t - s; the pull-back shrinks
    lengths by at least the cell's expansion bound.
    """
    n_tab, n_max = lv.cell_len.shape
    rr = np.arange(n_tab)[:, None] + np.arange(n_max)[None, :] + 2
    top = int(rr.max())
    maxlen = np.zeros(top + 2)
    np.maximum.at(maxlen, rr.ravel(), lv.cell_len.ravel())
    M = np.maximum.accumulate(maxlen[::-1])[::-1]  # M[t] = max |P| with R* >= t
    M = np.maximum(M, lv.tail_bound)
    inv_lam = np.zeros(top + 2)
    np.maximum.at(inv_lam, rr.ravel(), np.exp(-lv.cell_loglam.ravel()))
    B = np.zeros(k_max + 2)
    for t in range(1, k_max + 2):
        best = M[min(t, top + 1)]
        s = np.arange(2, t)
        if s.size:
            best = max(best, float(np.max(B[t - s] * inv_lam[s])))
        B[t] = best
    return B


def delta_k(params: CircleMapParams, cells: RStarPartition, k_max: int) -> DeltaSeries:
    """delta_k = sup over cells P of delta_k(P), for k = 1..k_max.

    Regrouped by X = f^l(P) with level r = R*(P) - l: sets with r > k enter
    with their own length; sets with r <= k enter through pull-backs of
    cylinders reaching time k - r + 1, which are bounded by the cylinder
    bound divided by the expansion of X.
    """
    _require_two_level(cells)
    if cells.params != params:
        raise ValueError("partition was built for different parameters")
    n_tab = cells.table.shape[0]
    if k_max + 1 > min(n_tab, cells.base.n_max):
        raise TruncationTooCoarse(f"k_max={k_max} needs max_time and n_max above {k_max + 1}")
    lv = _levels(cells)
    n_max = lv.cell_len.shape[1]
    rr = np.arange(n_tab)[:, None] + np.arange(n_max)[None, :] + 2
    top = int(max(rr.max(), n_max + 1))
    by_level = np.zeros(top + 2)
    np.maximum.at(by_level, rr.ravel(), lv.cell_len.ravel())
    np.maximum.at(by_level, np.arange(1, n_max + 1), lv.jp_len[:n_max])
    inv_lam = np.zeros(top + 2)
    np.maximum.at(inv_lam, rr.ravel(), np.exp(-lv.cell_loglam.ravel()))
    np.maximum.at(inv_lam, np.arange(1, n_max + 1), np.exp(-lv.jp_loglam[:n_max]))
    above = np.maximum.accumulate(by_level[::-1])[::-1]  # above[r] = max length at level >= r
    B = _cylinder_bound(lv, k_max)
    ks = np.arange(1, k_max + 1)
    lower = above[ks + 1]
    argmax_level = np.array([k + 1 + int(np.argmax(by_level[k + 1:])) for k in ks])
    part2 = np.array([float(np.max(B[k - np.arange(1, k + 1) + 1] * inv_lam[1 : k + 1])) for k in ks])
    tail = np.where(ks < lv.tail_level, lv.tail_bound, 0.0)
    upper = np.maximum.reduce([lower, part2, tail])
    certified = upper <= lower * (1 + 1e-12)
    return DeltaSeries(k=ks, lower=lower, upper=upper, certified=certified, argmax_level=argmax_level)


@dataclass
class DeltaCell:
    """delta_k(P) for one cell: the first part, and bounds on the second part."""

    delta0: float
    delta_plus_lo: float
    delta_plus_hi: float
    case: str

    @property
    def value_hi(self) -> float:
        return max(self.delta0, self.delta_plus_hi)

    @property
    def value_lo(self) -> float:
        return max(self.delta0, self.delta_plus_lo)


def delta_k_cell(cells: RStarPartition, n: int, m: int, k: int, bound=None, candidates: int = 3) -> DeltaCell:
    """delta_k(P) for P = P(n, m), by iterating the cell forward.

    This route does not use the regrouping in :func:`delta_k`: the images
    f^l(P) come from forward iteration of the endpoints, and the second part
    is bracketed by explicit pull-backs of the largest qualifying cells (lower)
    and the cylinder bound over the measured expansion (upper).
    """
    _require_two_level(cells)
    params = cells.params
    R = n + m + 2
    T = cells.table
    c0 = cells.y_pos[m][0]
    c1 = cells.y_pos[m + 1][0]
    a, b = T[n, c0], T[n, c1]
    ends = np.array([a, b], dtype=LD)
    lens = np.empty(R)
    mins = np.empty(R)
    for ell in range(R):
        lens[ell] = float(np.mod(ends[1] - ends[0], LD(1)))
        mins[ell] = float(np.min(cm.deriv(params, ends)))
        ends = cm.eval(params, ends)
    # lam_tail[l] = product of min f' over f^l(P) .. f^{R-1}(P)
    loglam = np.cumsum(np.log(mins)[::-1])[::-1]
    if bound is None:
        bound = _cylinder_bound(_levels(cells), k + 1)
    case = "short" if k > R - 1 else "long"
    delta0 = float(lens[: max(R - k, 0)].max()) if k <= R - 1 else 0.0
    lo_best = 0.0
    hi_best = 0.0
    cand = _largest_cells(cells, candidates)
    for ell in range(max(R - k, 0), R):
        r = R - ell
        t = k - r + 1
        hi_best = max(hi_best, float(bound[t] * np.exp(-loglam[ell])))
        # explicit members of the cylinder family: single cells with R* >= t
        seq = ((1, n + 1 - ell), (2, m + 1)) if ell <= n else ((2, m + 1 - (ell - n - 1)),)
        seq = tuple((bb, c) for bb, c in seq if c > 0)
        for ca, cb, cr in cand:
            if cr < t:
                continue
            pts = _pullback(params, seq, np.array([ca, cb], dtype=LD), np.array([False, True]))
            lo_best = max(lo_best, float(abs(pts[1] - pts[0])))
    return DeltaCell(delta0, lo_best, hi_best, case)


def _largest_cells(cells, count):
    lens = cells.lengths
    idx = np.argsort(-lens.astype(np.float64), kind="stable")
    out = []
    for i in idx:
        if cells.closed[i]:
            out.append((cells.a[i], cells.b[i], int(cells.r_star[i])))
        if len(out) >= count:
            break
    return out


def write_delta_csv(path, series: DeltaSeries):
    return write_csv(path, ["k", "delta_k"], zip(series.k, series.delta))
