"""Growth statistics of single solutions: window rates, Bohl intervals,
Lyapunov exponents and integral separation.

Limits over ``t - s -> oo`` are replaced by a ladder of window lengths.  At
each length the extreme rates over many window positions are recorded, and
the extremes over the three longest lengths are fitted by ``c0 + c1 / L``;
``c0`` is the reported exponent and the fit residual its margin.  Windows that
start in the first third of the cells are left out of the statistics, since
the exponents do not depend on any finite initial stretch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .propagation import Bundle, as_timepoint, plan_cells
from .system import General, LinearSystem

MARGIN_TARGET = 0.02
ALPHA_MIN = 0.01
BURN_IN = 1.0 / 3.0


class HorizonError(ValueError):
    """Raised when the horizon cannot host enough window lengths."""


@dataclass(frozen=True)
class WindowGrid:
    lengths: tuple[float, ...]
    anchors_per_length: int = 32
    burn_in: float = BURN_IN
    fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)

    def __post_init__(self):
        L = tuple(float(x) for x in self.lengths)
        if len(L) < 3:
            raise HorizonError("need at least 3 window lengths")
        if any(b <= a for a, b in zip(L, L[1:])) or L[0] <= 0:
            raise ValueError("window lengths must be positive and increasing")
        object.__setattr__(self, "lengths", L)

    @classmethod
    def geometric(cls, L_max: float, count: int = 4, ratio: float = 2.0, **kw) -> "WindowGrid":
        return cls(tuple(L_max / ratio ** k for k in reversed(range(count))), **kw)

    def doubled(self) -> "WindowGrid":
        return WindowGrid(self.lengths, 2 * self.anchors_per_length, self.burn_in, self.fractions)


def _phase_runs(sys: LinearSystem, first: int) -> dict:
    """Longest run of consecutive equal-phase segments from ``first`` on."""
    seq = sys.sequence
    runs: dict = {}
    label, length = None, 0.0
    for k in range(first, seq.horizon_segments):
        m = sys.segment_matrix(k)
        key = m.tobytes()
        if key == label:
            length += seq.gaps[k]
        else:
            label, length = key, seq.gaps[k]
        runs[key] = max(runs.get(key, 0.0), length)
    return runs


def default_grid(sys: LinearSystem, anchors_per_length: int = 32) -> WindowGrid:
    """Four lengths in ratio 2 ending at a system-dependent ``L_max``.

    For piecewise-constant systems ``L_max`` is half the longest post-burn-in
    stretch of the rarest phase, so that windows fit inside every phase;
    it is clipped to ``[min(10, H/4), H/4]`` with ``H`` the horizon.
    """
    H = sys.horizon
    hi = H / 4
    if isinstance(sys.body, General):
        L_max = hi
    else:
        first = math.ceil(BURN_IN * sys.sequence.horizon_segments)
        runs = _phase_runs(sys, first)
        L_max = min(runs.values()) / 2 if len(runs) > 1 else hi
        L_max = min(max(L_max, min(10.0, hi)), hi)
    return WindowGrid.geometric(L_max, anchors_per_length=anchors_per_length)


# ---------------------------------------------------------------------------
# window resolution (cell coordinates)


@dataclass(frozen=True, eq=False)
class Windows:
    length_index: np.ndarray
    i: np.ndarray
    o: np.ndarray
    j: np.ndarray
    o2: np.ndarray
    counted: np.ndarray  # start lies past the burn-in

    def __len__(self):
        return len(self.i)


def _forward(lengths, i, o, L):
    """Cell coordinates of ``s + L`` for ``s = (i, o)``; None past the horizon."""
    n = len(lengths)
    if o + L <= lengths[i]:
        return i, o + L
    rem = L - (lengths[i] - o)
    k = i + 1
    while k < n and rem > lengths[k]:
        rem -= lengths[k]
        k += 1
    if k >= n:
        return None
    return k, rem


def _backward(lengths, j, o2, L):
    """Cell coordinates of ``t - L`` for ``t = (j, o2)``; None before 0."""
    if o2 >= L:
        return j, o2 - L
    rem = L - o2
    k = j - 1
    while k >= 0 and rem > lengths[k]:
        rem -= lengths[k]
        k -= 1
    if k < 0:
        return None
    return k, lengths[k] - rem


@lru_cache(maxsize=64)
def resolve_windows(sys: LinearSystem, grid: WindowGrid) -> Windows:
    plan = plan_cells(sys)
    lengths = plan.lengths
    n = plan.ncell
    burn = math.ceil(grid.burn_in * n)
    rows = set()
    if plan.kind == "closed":
        bnd = np.asarray(sys.sequence.boundaries)
        t_burn = bnd[min(burn, n)]
        for li, L in enumerate(grid.lengths):
            cands = []
            for i in range(n):
                for f in grid.fractions:
                    cands.append(((i, f * lengths[i]), None))
            for j in range(n):
                cands.append((None, (j, lengths[j])))
                cands.append((None, (j, 0.5 * lengths[j])))
            span = sys.horizon - L
            for u in np.linspace(t_burn, max(span, t_burn), grid.anchors_per_length):
                if u <= span:
                    tp = sys.sequence.locate(float(u))
                    cands.append(((tp.segment, tp.offset), None))
            for start, end in cands:
                if start is not None:
                    end = _forward(lengths, start[0], start[1], L)
                else:
                    start = _backward(lengths, end[0], end[1], L)
                if start is None or end is None:
                    continue
                # offsets inside huge cells can absorb L entirely; keep only
                # windows whose exact length matches the nominal one
                (i, o), (j, o2) = start, end
                exact = o2 - o if i == j else math.fsum([lengths[i] - o, *lengths[i + 1:j], o2])
                if abs(exact - L) <= 1e-9 * L:
                    rows.add((li, i, float(o), j, float(o2)))
    else:
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        for li, L in enumerate(grid.lengths):
            for i in range(n):
                j = int(np.searchsorted(cum, cum[i] + L * (1 - 1e-12), side="left"))
                if j > n:
                    break
                # window ends at the start of cell j, i.e. the end of cell j - 1
                rows.add((li, i, 0.0, j - 1, float(lengths[j - 1])))
    if not rows:
        raise HorizonError("no window fits inside the horizon")
    arr = sorted(rows)
    li, i, o, j, o2 = (np.array(c) for c in zip(*arr))
    counted = i >= burn
    # at each length keep at least the latest windows when burn-in removes all
    for k in range(len(grid.lengths)):
        sel = li == k
        if sel.any() and not counted[sel].any():
            idx = np.flatnonzero(sel)
            counted[idx[i[idx] == i[idx].max()]] = True
    present = set(li[counted].tolist())
    if len(present) < 3 or not all(k in present for k in range(len(grid.lengths) - 3, len(grid.lengths))):
        raise HorizonError("fewer than 3 usable window lengths; extend the horizon")
    return Windows(li.astype(int), i.astype(np.int64), o.astype(float), j.astype(np.int64), o2.astype(float), counted)


def window_rates(bundle: Bundle, win: Windows, norm: str = "euclidean"):
    """Rates of every window on every trajectory; shape ``(n_traj, n_windows)``."""
    nt, nw = bundle.n, len(win)
    traj = np.repeat(np.arange(nt), nw)
    L, ratio = bundle.windows(
        traj, np.tile(win.i, nt), np.tile(win.o, nt), np.tile(win.j, nt), np.tile(win.o2, nt), norm
    )
    return (ratio / L).reshape(nt, nw), L[:nw]


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class GrowthStats:
    lengths: tuple[float, ...]
    min_rate: tuple[float, ...]
    max_rate: tuple[float, ...]
    trend: tuple[float, float]  # c1 of the min and max fits

    def rows(self):
        return [(L, lo, hi) for L, lo, hi in zip(self.lengths, self.min_rate, self.max_rate)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["length", "min_rate", "max_rate"])
            w.writerows(self.rows())


@dataclass(frozen=True)
class BohlIntervalEstimate:
    lower: float
    upper: float
    margin: float
    converged: bool
    stats: GrowthStats | None = field(default=None, compare=False, repr=False)

    def contains(self, other: "BohlIntervalEstimate", tol: float = 0.0) -> bool:
        m = self.margin + tol
        return self.lower - m <= other.lower and other.upper <= self.upper + m


def _fit_inverse(L, y):
    """Least-squares ``y = c0 + c1 / L``; returns (c0, c1, max residual)."""
    X = np.column_stack([np.ones(len(L)), 1.0 / np.asarray(L)])
    coef, *_ = np.linalg.lstsq(X, np.asarray(y), rcond=None)
    resid = float(np.max(np.abs(X @ coef - y)))
    return float(coef[0]), float(coef[1]), resid


def estimate(
    lengths, mins, maxs, margin_target: float = MARGIN_TARGET, clip=(True, True)
) -> BohlIntervalEstimate:
    """Extrapolate per-length extremes to a Bohl interval.

    ``clip`` says whether the (lower, upper) extremes are known to be
    monotone in the length, so that the best sampled value bounds the limit.
    """
    L = np.asarray(lengths)[-3:]
    lo0, lo1, r_lo = _fit_inverse(L, np.asarray(mins)[-3:])
    hi0, hi1, r_hi = _fit_inverse(L, np.asarray(maxs)[-3:])
    # for one solution sup-rates decrease towards the limit and inf-rates
    # increase towards it (sub-/superadditivity)
    upper = min(hi0, min(maxs)) if clip[1] else hi0
    lower = max(lo0, max(mins)) if clip[0] else lo0
    if lower > upper:
        lower = upper = 0.5 * (lower + upper)
    margin = max(r_lo, r_hi)
    stats = GrowthStats(tuple(lengths), tuple(mins), tuple(maxs), (lo1, hi1))
    return BohlIntervalEstimate(lower, upper, margin, margin < margin_target, stats)


def estimates_from_rates(rates: np.ndarray, win: Windows, grid: WindowGrid, margin_target=MARGIN_TARGET, clips=None):
    out = []
    nlen = len(grid.lengths)
    for n, r in enumerate(np.atleast_2d(rates)):
        mins, maxs = [], []
        for k in range(nlen):
            sel = (win.length_index == k) & win.counted
            if not sel.any():
                mins.append(np.nan)
                maxs.append(np.nan)
                continue
            mins.append(float(np.min(r[sel])))
            maxs.append(float(np.max(r[sel])))
        keep = [k for k in range(nlen) if not math.isnan(mins[k])]
        out.append(
            estimate(
                [grid.lengths[k] for k in keep], [mins[k] for k in keep], [maxs[k] for k in keep],
                margin_target, (True, True) if clips is None else clips[n],
            )
        )
    return out


# ---------------------------------------------------------------------------
# public operations


def _unit(xi) -> np.ndarray:
    x = np.atleast_1d(np.asarray(xi, dtype=float))
    n = np.linalg.norm(x)
    if not n > 0:
        raise ValueError("direction must be nonzero")
    return x / n


def window_rate(sys: LinearSystem, xi, s, t, norm: str = "euclidean") -> float:
    """``ln(|X(t) xi| / |X(s) xi|) / (t - s)`` with ``t - s`` formed segment-wise."""
    sp, tp = as_timepoint(sys, s), as_timepoint(sys, t)
    if (tp.segment, tp.offset) <= (sp.segment, sp.offset):
        raise ValueError("degenerate window: t must exceed s")
    b = Bundle(sys, [_unit(xi)])
    i, o = b.locate(sp)
    j, o2 = b.locate(tp)
    L, ratio = b.windows([0], [i], [o], [j], [o2], norm)
    return float(ratio[0] / L[0])


def bohl_intervals(sys: LinearSystem, directions, grid: WindowGrid | None = None, norm: str = "euclidean"):
    """Bohl interval estimates for many directions from one batched pass."""
    grid = grid or default_grid(sys)
    win = resolve_windows(sys, grid)
    X = np.atleast_2d(np.asarray(directions, dtype=float))
    rates, _ = window_rates(Bundle(sys, X), win, norm)
    return estimates_from_rates(rates, win, grid)


def bohl_interval(sys: LinearSystem, xi, grid: WindowGrid | None = None, norm: str = "euclidean") -> BohlIntervalEstimate:
    return bohl_intervals(sys, [_unit(xi)], grid, norm)[0]


def lyapunov_exponents(sys: LinearSystem, xi, horizon: float | None = None, n_samples: int = 48):
    """Surrogates of ``liminf`` and ``limsup`` of ``ln|X(t) xi| / t``.

    With ``f`` sampled on a geometric grid in ``[H/16, H]``, the running
    extremes ``sup_{t >= L} f`` and ``inf_{t >= L} f`` are taken at
    ``L = H/4, H/2, H`` and extrapolated with ``c0 + c1 / L``.
    """
    H = sys.horizon if horizon is None else min(float(horizon), sys.horizon)
    if H <= 0:
        raise HorizonError("horizon must be positive")
    seq = sys.sequence
    ts = set(np.geomspace(H / 16, H, n_samples).tolist())
    ts.update(b for b in seq.boundaries if H / 16 <= b <= H)
    ts.update((H / 4, H / 2))  # the envelope anchors themselves
    ts = sorted(t for t in ts if t > 0)
    b = Bundle(sys, [_unit(xi)])
    plan = b.plan
    q_i, q_o = [], []
    for t in ts:
        tp = seq.locate(min(t, seq.horizon))
        if tp.segment == seq.horizon_segments - 1 and t >= seq.horizon:
            tp = seq.boundary(seq.horizon_segments)
        c, o = plan.locate(tp.segment, tp.offset, seq)
        q_i.append(c)
        q_o.append(o)
    n = len(ts)
    L, ratio = b.windows(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), np.zeros(n), q_i, q_o)
    f = ratio / L
    T = L
    env_hi, env_lo, anchors = [], [], []
    for frac in (0.25, 0.5, 1.0):
        sel = T >= frac * T.max() * (1 - 1e-12)
        env_hi.append(float(np.max(f[sel])))
        env_lo.append(float(np.min(f[sel])))
        anchors.append(frac * T.max())
    hi0, _, _ = _fit_inverse(anchors, env_hi)
    lo0, _, _ = _fit_inverse(anchors, env_lo)
    chi_plus = min(hi0, env_hi[0])
    chi_minus = max(lo0, env_lo[0])
    if chi_minus > chi_plus:
        chi_minus = chi_plus = 0.5 * (chi_minus + chi_plus)
    return chi_minus, chi_plus


@dataclass(frozen=True)
class IntegralSeparation:
    K: float
    alpha: float
    log_K: float


def _lower_hull(points):
    pts = sorted(set(points))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def separation_fit(L, D):
    """Best ``(ln K, alpha)`` with ``D >= ln K + alpha L`` from the lower hull.

    ``alpha`` is the slope of the last hull edge and ``ln K`` the largest
    intercept compatible with every sample.
    """
    # the lower envelope per distinct length, then its convex hull
    env = {}
    for l, d in zip(np.round(L, 12), D):
        env[l] = min(env.get(l, math.inf), d)
    hull = _lower_hull(list(env.items()))
    if len(hull) < 2:
        return -math.inf, 0.0
    (x1, y1), (x2, y2) = hull[-2], hull[-1]
    alpha = (y2 - y1) / (x2 - x1)
    log_K = float(np.min(np.asarray(D) - alpha * np.asarray(L)))
    return log_K, alpha


def integral_separation_check(
    sys: LinearSystem, xi, eta, horizon: float | None = None, grid: WindowGrid | None = None, alpha_min: float = ALPHA_MIN
) -> IntegralSeparation | None:
    """Certificate ``(K, alpha)`` that ``xi`` dominates ``eta``, or None."""
    X = np.array([_unit(xi), _unit(eta)])
    if np.linalg.matrix_rank(X) < 2:
        raise ValueError("xi and eta must be independent")
    grid = grid or default_grid(sys)
    grid = WindowGrid(grid.lengths, grid.anchors_per_length, 0.0, grid.fractions)
    win = resolve_windows(sys, grid)
    b = Bundle(sys, X)
    nw = len(win)
    traj = np.repeat([0, 1], nw)
    args = [np.tile(a, 2) for a in (win.i, win.o, win.j, win.o2)]
    L, ratio = b.windows(traj, *args)
    L = L[:nw]
    keep = np.ones(nw, dtype=bool)
    if horizon is not None:
        keep = L <= horizon
    D = (ratio[:nw] - ratio[nw:])[keep]
    L = L[keep]
    log_K, alpha = separation_fit(L, D)
    if not alpha > alpha_min or not np.all(D >= log_K + alpha * L - 1e-9 * (1 + np.abs(D))):
        return None
    return IntegralSeparation(math.exp(log_K), alpha, log_K)


def combination_spectrum(sys: LinearSystem, xi, eta, coeffs, grid: WindowGrid | None = None, norm="euclidean"):
    """Bohl interval of the solution through ``a xi + b eta``.

    By linearity that solution is ``a X(t) xi + b X(t) eta``; it is
    propagated directly in log space so neither part can overflow.
    """
    a, b = coeffs
    if a == 0 or b == 0:
        raise ValueError("both coefficients must be nonzero")
    x = a * np.asarray(xi, dtype=float) + b * np.asarray(eta, dtype=float)
    if not np.linalg.norm(x) > 0:
        raise ValueError("zero combination")
    return bohl_interval(sys, x, grid, norm)
