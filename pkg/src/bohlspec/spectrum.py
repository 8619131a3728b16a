"""System-level spectra: the Bohl spectrum with its filtration, the
Sacker-Sell spectrum (diagonal formula and dichotomy sweep), and the
comparison checks between them.

Every reported interval is the closure of what the finite horizon can see;
whether an endpoint really belongs to the spectrum is not decided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.stats import norm as _normal
from scipy.stats import qmc

from . import _kernels
from .exponents import (
    ALPHA_MIN,
    BohlIntervalEstimate,
    WindowGrid,
    bohl_interval,
    bohl_intervals,
    default_grid,
    estimates_from_rates,
    resolve_windows,
)
from .propagation import Bundle, _combine_blocks, _rk_columns, plan_cells
from .system import General, LinearSystem, PiecewiseConstant, ScalarRule, SwitchingSequence

MERGE_BASE = 0.02
GAMMA_LIMIT = 50.0
BISECT_WIDTH = 0.01
K_MAX = 1e3
METHODS = ("bohl_sweep", "ss_diagonal", "ss_dichotomy", "lyapunov_sweep")


class PreconditionError(ValueError):
    """A system lacks a structure tag an operation relies on."""


class WitnessError(RuntimeError):
    """No sampled direction realizes the requested spectral interval."""


class KinematicError(ValueError):
    """A change of variables violates its declared bounds."""


# ---------------------------------------------------------------------------
# result types


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_margin: float = 0.0
    hi_margin: float = 0.0

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lo - self.lo_margin - tol <= x <= self.hi + self.hi_margin + tol

    def covers(self, other: "Interval", tol: float = 0.0) -> bool:
        return self.contains(other.lo, tol) and self.contains(other.hi, tol)

    def as_list(self) -> list[float]:
        return [self.lo, self.hi]


@dataclass(frozen=True)
class SpectrumEstimate:
    intervals: tuple[Interval, ...]
    method: str
    minus_inf_flag: bool = False
    plus_inf_flag: bool = False
    converged: bool = True
    notes: tuple[str, ...] = ()
    samples: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    def __len__(self):
        return len(self.intervals)

    @property
    def max_margin(self) -> float:
        return max([0.0] + [max(iv.lo_margin, iv.hi_margin) for iv in self.intervals])

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return any(iv.contains(x, tol) for iv in self.intervals)

    def affine(self, gamma: float, b: float) -> "SpectrumEstimate":
        """The estimate mapped through ``x -> gamma x + b`` (``gamma > 0``)."""
        ivs = tuple(
            Interval(gamma * iv.lo + b, gamma * iv.hi + b, gamma * iv.lo_margin, gamma * iv.hi_margin)
            for iv in self.intervals
        )
        return replace(self, intervals=ivs, samples=())

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "intervals": [
                {"lo": iv.lo, "hi": iv.hi, "lo_margin": iv.lo_margin, "hi_margin": iv.hi_margin}
                for iv in self.intervals
            ],
            "minus_inf": self.minus_inf_flag,
            "plus_inf": self.plus_inf_flag,
            "converged": self.converged,
            "closures": True,
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class Filtration:
    """Nested subspaces ``S_1 < ... < S_k = R^d`` with orthonormal bases.

    ``assignment[i]`` lists the spectral intervals realized inside ``S_i``.
    """

    subspaces: tuple[np.ndarray, ...]
    assignment: tuple[tuple[int, ...], ...]
    notes: tuple[str, ...] = ()

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(S.shape[1]) for S in self.subspaces)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "bases": [S.T.tolist() for S in self.subspaces],
            "assignment": [list(a) for a in self.assignment],
            "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# helpers


def merge_intervals(items, tol: float) -> list[Interval]:
    """Merge ``(lo, hi, margin)`` triples whose gaps are at most ``tol``."""
    out: list[Interval] = []
    for lo, hi, m in sorted(items, key=lambda t: (t[0], t[1])):
        if out and lo <= out[-1].hi + tol:
            cur = out[-1]
            if hi > cur.hi:
                out[-1] = Interval(cur.lo, hi, cur.lo_margin, m)
            elif hi == cur.hi:
                out[-1] = Interval(cur.lo, cur.hi, cur.lo_margin, max(cur.hi_margin, m))
        else:
            out.append(Interval(lo, hi, m, m))
    return out


def _cap_components(ivs: list[Interval], d: int, notes: list[str]) -> list[Interval]:
    """Merge across the narrowest gaps until at most ``d`` components remain."""
    while len(ivs) > d:
        gaps = [b.lo - a.hi for a, b in zip(ivs, ivs[1:])]
        k = int(np.argmin(gaps))
        a, b = ivs[k], ivs[k + 1]
        notes.append(f"merged components across an unresolvable gap of {gaps[k]:.3g}")
        ivs[k : k + 2] = [Interval(a.lo, max(a.hi, b.hi), a.lo_margin, b.hi_margin)]
    return ivs


def sweep_directions(d: int, n: int, seed: int = 0, special=()) -> np.ndarray:
    """Coordinate axes, user directions and a sweep of unit vectors.

    ``d = 2`` uses a uniform half-circle grid (``xi`` and ``-xi`` give the
    same solution up to sign); ``d > 2`` uses scrambled Sobol points mapped
    to the sphere.
    """
    rows = [np.eye(d)[k] for k in range(d)]
    for s in special:
        s = np.asarray(s, dtype=float)
        if s.shape != (d,) or not np.linalg.norm(s) > 0:
            raise ValueError(f"special direction {s!r} must be a nonzero {d}-vector")
        rows.append(s / np.linalg.norm(s))
    if d == 2:
        th = np.pi * np.arange(n) / n
        rows.extend(np.column_stack([np.cos(th), np.sin(th)]))
    elif d > 2:
        m = max(1, math.ceil(math.log2(n)))
        u = qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)[:n]
        z = _normal.ppf(np.clip(u, 1e-12, 1 - 1e-12))
        rows.extend(z / np.linalg.norm(z, axis=1, keepdims=True))
    out = []
    for r in rows:
        if not any(abs(abs(float(r @ q)) - 1.0) < 1e-13 for q in out):
            out.append(r)
    return np.array(out)


def _span(vectors, tol: float = 1e-9) -> np.ndarray:
    """Orthonormal basis (columns) of the span, by SVD rank revealing."""
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    if V.size == 0:
        return np.zeros((0, 0))
    U, s, _ = np.linalg.svd(V.T, full_matrices=False)
    r = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return U[:, :r]


def _component_of(ivs: Sequence[Interval], est: BohlIntervalEstimate) -> int:
    mid = 0.5 * (est.lower + est.upper)
    dist = [0.0 if iv.lo <= mid <= iv.hi else min(abs(mid - iv.lo), abs(mid - iv.hi)) for iv in ivs]
    return int(np.argmin(dist))


# ---------------------------------------------------------------------------
# Bohl spectrum


def bohl_spectrum(
    sys: LinearSystem,
    n_directions: int | None = None,
    grid: WindowGrid | None = None,
    special_directions=(),
    seed: int = 0,
    norm: str = "euclidean",
    merge_tol: float | None = None,
) -> tuple[SpectrumEstimate, Filtration]:
    """Bohl spectrum from a direction sweep, with the filtration estimate."""
    d = sys.dimension
    if d > 8:
        raise ValueError("direction sweeps support d <= 8")
    n = max(8 * d, 64) if n_directions is None else int(n_directions)
    if n < 8 * d:
        raise ValueError(f"n_directions must be at least {8 * d}")
    grid = grid or default_grid(sys)
    X = sweep_directions(d, n, seed, special_directions)
    ests = bohl_intervals(sys, X, grid, norm)
    margins = np.array([e.margin for e in ests])
    tol = MERGE_BASE + 2 * float(margins.max()) if merge_tol is None else merge_tol
    notes: list[str] = []
    ivs = merge_intervals([(e.lower, e.upper, e.margin) for e in ests], tol)
    ivs = _cap_components(ivs, d, notes)
    converged = all(e.converged for e in ests)
    if not converged:
        w = int(np.argmax(margins))
        notes.append(f"not converged; worst margin {margins[w]:.3g} at direction {np.round(X[w], 6).tolist()}")
    filt = _filtration(sys, X, ests, ivs, grid, norm, tol)
    samples = tuple(zip(map(tuple, X.tolist()), ests))
    est = SpectrumEstimate(tuple(ivs), "bohl_sweep", converged=converged, notes=tuple(notes), samples=samples)
    return est, filt


def _golden(f, lo: float, hi: float, iters: int):
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, e = b - g * (b - a), a + g * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(iters):
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + g * (b - a)
            fe = f(e)
    return (c, fc) if fc <= fe else (e, fe)


def _filtration(sys, X, ests, ivs, grid, norm, tol) -> Filtration:
    d, k = sys.dimension, len(ivs)
    comp = np.array([_component_of(ivs, e) for e in ests])
    notes: list[str] = []
    groups = [[X[r] for r in np.flatnonzero(comp == c)] for c in range(k)]
    if d == 2 and k == 2:
        # lower subspace: the direction with the smallest upper estimate,
        # refined on angle; exact ties go to the lowest coordinate axis
        upper = np.array([e.upper for e in ests])
        best = int(np.flatnonzero(upper <= upper.min() + 1e-12)[0])
        th0 = math.atan2(X[best, 1], X[best, 0])
        n_sweep = max(8, len(X) - 2)
        iters = 12 if plan_cells(sys).kind == "rk" else 24

        def f(th):
            return bohl_interval(sys, [math.cos(th), math.sin(th)], grid, norm).upper

        th, fu = _golden(f, th0 - math.pi / n_sweep, th0 + math.pi / n_sweep, iters)
        v = X[best] if upper[best] <= fu else np.array([math.cos(th), math.sin(th)])
        if min(upper[best], fu) <= ivs[0].hi + tol:
            groups[0] = [v]
        else:
            notes.append("lower subspace not resolved by the angular search")
    subspaces, assignment = [], []
    acc: list = []
    for c in range(k):
        acc.extend(groups[c])
        S = np.eye(d) if c == k - 1 else _span(acc)
        if subspaces and S.shape[1] <= subspaces[-1].shape[1]:
            notes.append(f"component {c} adds no sampled dimension; level skipped")
            assignment[-1] = assignment[-1] + (c,)
            continue
        if S.shape[1] == 0:
            notes.append(f"component {c} has no sampled direction")
            continue
        subspaces.append(S)
        assignment.append(tuple(range(c + 1)) if not assignment else assignment[-1] + (c,))
    return Filtration(tuple(subspaces), tuple(assignment), tuple(notes))


# ---------------------------------------------------------------------------
# Sacker-Sell spectrum: diagonal formula


def _require_tags(sys: LinearSystem, *tags):
    for t in tags:
        if t not in sys.structure_tags:
            raise PreconditionError(f"system {sys.name or '<unnamed>'} is not tagged {t!r}")


def diagonal_entry_system(sys: LinearSystem, i: int) -> LinearSystem:
    """The scalar system ``y' = a_ii(t) y`` on the same switching sequence."""
    body = sys.body
    if isinstance(body, PiecewiseConstant):
        mats = {k: np.array([[float(np.asarray(m)[i, i])]]) for k, m in body.phase_matrices.items()}
        new = PiecewiseConstant(body.sequence, mats, body.phase_rule)
    elif isinstance(body, ScalarRule):
        new = body
    else:
        func = body.func
        new = General(lambda t: np.array([[float(np.asarray(func(t))[i, i])]]), body.sequence)
    return LinearSystem(1, new, sys.bound, frozenset(sys.structure_tags), f"{sys.name}[{i},{i}]", dict(sys.params))


def sacker_sell_diagonal(sys: LinearSystem, grid: WindowGrid | None = None) -> SpectrumEstimate:
    """Union of the windowed ranges ``[alpha_i, beta_i]`` of the diagonal entries."""
    _require_tags(sys, "upper_triangular", "bounded")
    items, samples, notes = [], [], []
    converged = True
    for i in range(sys.dimension):
        sub = diagonal_entry_system(sys, i)
        e = bohl_interval(sub, [1.0], grid)
        items.append((e.lower, e.upper, e.margin))
        samples.append((i, e))
        converged &= e.converged
    tol = MERGE_BASE + 2 * max(m for *_, m in items)
    ivs = _cap_components(merge_intervals(items, tol), sys.dimension, notes)
    return SpectrumEstimate(tuple(ivs), "ss_diagonal", converged=converged, notes=tuple(notes), samples=tuple(samples))


# ---------------------------------------------------------------------------
# two-parameter transitions over the window grid


@dataclass(frozen=True, eq=False)
class TransitionTable:
    """Log singular values (descending) of ``Phi(t, s)`` for every window."""

    L: np.ndarray
    logsv: np.ndarray
    counted: np.ndarray
    length_index: np.ndarray
    grid: WindowGrid
    windows: object

    def exponents(self):
        """Per singular value, Bohl-type estimates of ``ln sigma / L``."""
        # only ln|Phi| (subadditive) and -ln|Phi^-1| (superadditive) have
        # monotone extremes; the other sides are extrapolated unclipped
        d = self.logsv.shape[1]
        clips = [(m == d - 1, m == 0) for m in range(d)]
        return estimates_from_rates(self.logsv.T / self.L, self.windows, self.grid, clips=clips)


def _sv2(G1, G2, v0, v1, logdet):
    """Log singular values of ``[[e^G1, e^G2 v0], [0, e^G2 v1]]``."""
    m = np.maximum(G1, G2)
    p = np.exp(G1 - m)
    q = np.exp(G2 - m) * v0
    s = np.exp(G2 - m) * v1
    smax = 0.5 * (np.hypot(p + s, q) + np.hypot(p - s, q))
    hi = m + np.log(smax)
    return hi, logdet - hi


def _scalar_windows(rate, plan, win):
    """Exact window integrals of a cell-wise constant scalar rate."""
    n = plan.ncell
    dirs = np.zeros((1, n + 1, 2))
    dirs[..., 0] = 1.0
    gains = (np.asarray(rate) * plan.lengths)[None, :]
    zero = np.zeros(n)
    traj = np.zeros(len(win), dtype=np.int64)
    _, G, L, _, _ = _kernels.window_closed(rate, rate, zero, plan.lengths, dirs, gains, traj, win.i, win.o, win.j, win.o2)
    return G, L


def _table_closed(sys, plan, win):
    logs, L = [], None
    nw = len(win)
    for blk, (a, b, c) in zip(plan.blocks, plan.block_params):
        Ga, L = _scalar_windows(a, plan, win)
        if len(blk) == 1:
            logs.append(Ga)
            continue
        Gb, _ = _scalar_windows(b, plan, win)
        U = np.tile([0.0, 1.0], (nw, 1))
        G2, V = _kernels.transport_closed(a, b, c, plan.lengths, win.i, win.o, win.j, win.o2, U)
        hi, lo = _sv2(Ga, G2, V[:, 0], V[:, 1], Ga + Gb)
        logs.extend([hi, lo])
    return L, np.column_stack(logs)


def _cell_transitions(sys, plan):
    """Per cell: scaled transition matrix, its log scale and ln|det|."""
    d = sys.dimension
    C, g, ld = [], [], []
    if plan.kind == "rk":
        func = sys.body.func
        hmax = math.inf if sys.bound is None else 1.0 / (10 * sys.bound)
        bnd = sys.sequence.boundaries
        for k in range(plan.ncell):
            gains, U = _rk_columns(func, bnd[k], bnd[k + 1], np.eye(d), hmax=hmax)
            top = float(gains.max())
            C.append(U * np.exp(gains - top))
            g.append(top)
            sign, lu = np.linalg.slogdet(U)
            ld.append(lu + float(gains.sum()) if sign != 0 else -math.inf)
    else:
        cache = {}
        for k in range(plan.ncell):
            A, tau = plan.cell_mats[k], float(plan.lengths[k])
            key = (id(A), tau)
            if key not in cache:
                E = expm(A * tau)
                s = float(np.max(np.abs(E)))
                cache[key] = (E / s, math.log(s), float(np.trace(A)) * tau)
            Ck, gk, lk = cache[key]
            C.append(Ck)
            g.append(gk)
            ld.append(lk)
    return C, np.array(g), np.array(ld)


def _table_cells(sys, plan, win):
    d = sys.dimension
    C, g, ld = _cell_transitions(sys, plan)
    prefix_ld = np.concatenate([[0.0], np.cumsum(ld)])
    nw = len(win)
    logsv = np.empty((nw, d))
    L = np.empty(nw)
    ends: dict[int, list[int]] = {}
    for q in range(nw):
        ends.setdefault(int(win.i[q]), []).append(q)
    for i, qs in ends.items():
        stop = {int(win.j[q]) + 1: [] for q in qs}
        for q in qs:
            stop[int(win.j[q]) + 1].append(q)
        last = max(stop)
        P, lg = np.eye(d), 0.0
        for k in range(i, last):
            P = C[k] @ P
            s = float(np.max(np.abs(P)))
            P /= s
            lg += math.log(s) + g[k]
            if k + 1 in stop:
                sv = np.linalg.svd(P, compute_uv=False)
                with np.errstate(divide="ignore"):
                    ls = lg + np.log(sv)
                # the smallest one from the determinant, which stays accurate
                ls[-1] = (prefix_ld[k + 1] - prefix_ld[i]) - float(np.sum(ls[:-1]))
                for q in stop[k + 1]:
                    logsv[q] = ls
                    L[q] = math.fsum(plan.lengths[i : k + 1])
    return L, logsv


@lru_cache(maxsize=32)
def transition_table(sys: LinearSystem, grid: WindowGrid) -> TransitionTable:
    plan = plan_cells(sys)
    win = resolve_windows(sys, grid)
    if plan.kind == "closed":
        L, logsv = _table_closed(sys, plan, win)
    else:
        L, logsv = _table_cells(sys, plan, win)
    logsv = -np.sort(-logsv, axis=1)
    return TransitionTable(L, logsv, win.counted, win.length_index, grid, win)


@lru_cache(maxsize=32)
def _splitting(sys: LinearSystem, rank: int):
    """Pseudo-stable candidate of the given rank and its worst angle.

    The candidate is spanned by the ``rank`` slowest right singular vectors
    of ``Phi(T, 0)``; the complement by the others.  Returns the basis and
    ``-ln`` of the smallest sine between the transported subspaces at cell
    starts, which bounds the projector norm.
    """
    d = sys.dimension
    seq = sys.sequence
    b = Bundle(sys, np.eye(d))
    end = seq.point(seq.horizon_segments - 1, seq.gaps[-1])
    cols = [b.state(r, end) for r in range(d)]
    top = max(c.log_mag for c in cols)
    M = np.column_stack([math.exp(c.log_mag - top) * c.direction for c in cols])
    _, _, Vt = np.linalg.svd(M)
    V = Vt.T  # columns ordered fast to slow
    slow, fast = V[:, d - rank :], V[:, : d - rank]
    tb = Bundle(sys, np.column_stack([slow, fast]).T)
    worst = 0.0
    for cell in range(tb.upto + 1):
        D = _directions_at(tb, cell)
        P = _span(D[:rank], 1e-12)
        Q = _span(D[rank:], 1e-12)
        if P.shape[1] < rank or Q.shape[1] < d - rank:
            return slow, math.inf
        R = Q - P @ (P.T @ Q)
        s = float(np.linalg.svd(R, compute_uv=False).min())
        if s <= 0:
            return slow, math.inf
        worst = max(worst, -math.log(s))
    return slow, worst


def _directions_at(b: Bundle, cell: int) -> np.ndarray:
    """Unit directions of every trajectory at the start of ``cell``."""
    if b.plan.kind != "closed":
        return b.dirs[:, cell]
    out = []
    for r in range(b.n):
        logs, dirs = [], []
        for bi in range(len(b.plan.blocks)):
            l0 = b.block_log0[bi][r]
            logs.append(l0 + b.block_prefix[bi][r, cell] if l0 != -math.inf else -math.inf)
            dirs.append(tuple(b.block_dirs[bi][r, cell]))
        out.append(_combine_blocks(b.plan.blocks, logs, dirs, b.sys.dimension).direction)
    return np.array(out)


# ---------------------------------------------------------------------------
# dichotomy test and the Sacker-Sell sweep


@dataclass(frozen=True)
class DichotomyVerdict:
    """Finite-horizon evidence for or against a dichotomy at rate ``gamma``."""

    gamma: float
    admits: bool
    K: float | None = None
    alpha: float | None = None
    rank: int | None = None
    basis: np.ndarray | None = field(default=None, compare=False)
    witness: str | None = None
    label: str = "evidence"


def _rank_constants(tab, ex, gamma, rank, d, alpha_min, log_k_max, angle):
    """``(alpha, ln K)`` for one candidate rank, or None when it fails."""
    gi, di = d - rank - 1, d - rank  # growing / decaying singular value
    gaps = []
    if rank < d:
        gaps.append(ex[gi].lower - gamma)
    if rank > 0:
        gaps.append(gamma - ex[di].upper)
    alpha_est = min(gaps)
    if alpha_est < alpha_min:
        return None

    def log_k(alpha):
        parts = [angle]
        if rank < d:
            parts.append(float(np.max((gamma + alpha) * tab.L - tab.logsv[:, gi])))
        if rank > 0:
            parts.append(float(np.max(tab.logsv[:, di] - (gamma - alpha) * tab.L)))
        return max(0.0, *parts)

    if log_k(alpha_min) > log_k_max:
        return None
    alpha = alpha_est
    if log_k(alpha) > log_k_max:
        lo, hi = alpha_min, alpha_est
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if log_k(mid) <= log_k_max else (lo, mid)
        alpha = lo
    return alpha, log_k(alpha)


def dichotomy_test(
    sys: LinearSystem,
    gamma: float,
    grid: WindowGrid | None = None,
    alpha_min: float = ALPHA_MIN,
    K_max: float = K_MAX,
) -> DichotomyVerdict:
    """Test for an exponential dichotomy with growth rate ``gamma``.

    The singular values of ``Phi(t, s)`` are the extreme growth factors over
    all directions at once.  A rank-``r`` dichotomy needs the ``d - r``
    largest to grow faster than ``gamma`` and the rest to decay slower, both
    by at least ``alpha_min`` in the extrapolated limit, plus uniform
    constants (including the projector norm) no larger than ``K_max``.
    """
    d = sys.dimension
    if d > 4:
        raise ValueError("dichotomy tests support d <= 4")
    grid = grid or default_grid(sys)
    tab = transition_table(sys, grid)
    ex = tab.exponents()
    log_k_max = math.log(K_max)
    for rank in range(d, -1, -1):
        if 0 < rank < d:
            basis, angle = _splitting(sys, rank)
        else:
            basis, angle = (np.eye(d) if rank == d else np.zeros((d, 0))), 0.0
        if angle > log_k_max:
            continue
        res = _rank_constants(tab, ex, gamma, rank, d, alpha_min, log_k_max, angle)
        if res is not None:
            alpha, lk = res
            return DichotomyVerdict(gamma, True, math.exp(lk), alpha, rank, basis)
    return DichotomyVerdict(gamma, False, witness=_straddle_witness(ex, gamma, alpha_min))


def _straddle_witness(ex, gamma, alpha_min) -> str:
    for m, e in enumerate(ex):
        if e.lower - alpha_min < gamma < e.upper + alpha_min:
            return f"singular value {m + 1}: windowed rates [{e.lower:.4g}, {e.upper:.4g}] straddle gamma"
    return "no uniform constant: the transient or projector bound exceeds K_max"


def sacker_sell_general(
    sys: LinearSystem,
    gamma_grid=None,
    grid: WindowGrid | None = None,
    alpha_min: float = ALPHA_MIN,
    K_max: float = K_MAX,
    width: float = BISECT_WIDTH,
) -> SpectrumEstimate:
    """Sacker-Sell spectrum as the closure of the rates without a dichotomy."""
    if sys.dimension > 4:
        raise ValueError("dichotomy tests support d <= 4")
    grid = grid or default_grid(sys)
    if gamma_grid is None:
        gamma_grid = np.linspace(-GAMMA_LIMIT, GAMMA_LIMIT, 201)
    gs = set(float(g) for g in gamma_grid)
    g_lo, g_hi = min(gs), max(gs)
    # narrow components can hide between grid points; seed the grid with the
    # singular-value exponents, where the verdict is expected to change
    seeds = sorted(
        float(x) for e in transition_table(sys, grid).exponents() for x in (e.lower, e.upper) if g_lo < x < g_hi
    )
    gs.update(seeds)
    gs.update(0.5 * (a + b) for a, b in zip(seeds, seeds[1:]))
    gs = sorted(gs)

    @lru_cache(maxsize=None)
    def fails(g: float) -> bool:
        return not dichotomy_test(sys, g, grid, alpha_min, K_max).admits

    verdict = [fails(g) for g in gs]
    edges = []  # (admitting side, failing side) brackets, refined
    for a, b, fa, fb in zip(gs, gs[1:], verdict, verdict[1:]):
        if fa == fb:
            continue
        ok, bad = (a, b) if fb else (b, a)
        while abs(bad - ok) > width:
            mid = 0.5 * (ok + bad)
            if fails(mid):
                bad = mid
            else:
                ok = mid
        edges.append((a, b, ok, bad))
    # a rate fails within alpha_min of the spectrum, so finite endpoints are
    # pulled in by alpha_min
    ivs, start, start_m = [], None, 0.0
    for k, g in enumerate(gs):
        if verdict[k] and (k == 0 or not verdict[k - 1]):
            if k == 0:
                start, start_m = -math.inf, 0.0
            else:
                _, _, ok, bad = next(e for e in edges if e[1] == g)
                start, start_m = 0.5 * (ok + bad), 0.5 * abs(bad - ok)
        if verdict[k] and (k == len(gs) - 1 or not verdict[k + 1]):
            if k == len(gs) - 1:
                end, end_m = math.inf, 0.0
            else:
                _, _, ok, bad = next(e for e in edges if e[0] == g)
                end, end_m = 0.5 * (ok + bad), 0.5 * abs(bad - ok)
            lo = start + alpha_min if math.isfinite(start) else start
            hi = end - alpha_min if math.isfinite(end) else end
            if lo > hi:
                lo = hi = 0.5 * (lo + hi)
            ivs.append(Interval(lo, hi, start_m, end_m))
    notes = []
    if not ivs:
        notes.append("every sampled rate admits a dichotomy; the spectrum was not resolved on the grid")
    return SpectrumEstimate(
        tuple(ivs), "ss_dichotomy", verdict[0], verdict[-1], converged=bool(ivs), notes=tuple(notes)
    )


def sacker_sell(sys: LinearSystem, grid: WindowGrid | None = None) -> SpectrumEstimate:
    """Diagonal formula when the tags allow it, otherwise the dichotomy sweep."""
    if {"upper_triangular", "bounded"} <= sys.structure_tags:
        return sacker_sell_diagonal(sys)
    return sacker_sell_general(sys, grid=grid)


# ---------------------------------------------------------------------------
# comparisons


@dataclass(frozen=True)
class CheckReport:
    passed: bool
    entries: tuple[tuple[str, bool], ...]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "entries": [{"check": c, "passed": p} for c, p in self.entries]}


def _covering(ss: SpectrumEstimate, iv: Interval, tol: float) -> int | None:
    for k, s in enumerate(ss.intervals):
        if s.covers(iv, tol):
            return k
    return None


def subset_check(
    bohl: SpectrumEstimate,
    ss: SpectrumEstimate,
    tol: float = 0.05,
    bohl_filtration: Filtration | None = None,
    ss_filtration: Filtration | None = None,
) -> CheckReport:
    """Bohl spectrum inside the Sacker-Sell spectrum, and the finer filtration."""
    entries = []
    if not (bohl.converged and ss.converged):
        entries.append(("both estimates converged", False))
    hit = set()
    for iv in bohl.intervals:
        k = _covering(ss, iv, tol)
        entries.append((f"Bohl [{iv.lo:.4g}, {iv.hi:.4g}] inside a Sacker-Sell interval", k is not None))
        if k is not None:
            hit.add(k)
    for k, s in enumerate(ss.intervals):
        entries.append((f"Sacker-Sell [{s.lo:.4g}, {s.hi:.4g}] holds a Bohl interval", k in hit))
    if bohl_filtration is not None and ss_filtration is not None:
        ok = set(ss_filtration.dims) <= set(bohl_filtration.dims)
        entries.append(("Sacker-Sell filtration dimensions appear in the Bohl filtration", ok))
    return CheckReport(all(p for _, p in entries), tuple(entries))


def coincidence_check(a: SpectrumEstimate, b: SpectrumEstimate, tol: float = 0.05) -> CheckReport:
    """Same number of components with endpoints within ``tol``."""
    entries = [("same component count", len(a) == len(b))]
    for x, y in zip(a.intervals, b.intervals):
        ok = abs(x.lo - y.lo) <= tol and abs(x.hi - y.hi) <= tol
        entries.append((f"[{x.lo:.4g}, {x.hi:.4g}] vs [{y.lo:.4g}, {y.hi:.4g}]", ok))
    return CheckReport(all(p for _, p in entries), tuple(entries))


# ---------------------------------------------------------------------------
# kinematic similarity


@dataclass(frozen=True)
class KinematicSpec:
    """A change of variables ``x = S(t) y`` with its declared bounds."""

    S: Callable[[float], np.ndarray]
    S_inv: Callable[[float], np.ndarray]
    S_dot: Callable[[float], np.ndarray]
    bound: float
    inv_bound: float
    dot_bound: float = 0.0
    constant: bool = False
    name: str = ""


def constant_similarity(M) -> KinematicSpec:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Mi = np.linalg.inv(M)
    zero = np.zeros_like(M)
    return KinematicSpec(
        lambda t: M, lambda t: Mi, lambda t: zero,
        float(np.linalg.norm(M, 2)), float(np.linalg.norm(Mi, 2)), 0.0, True, "constant",
    )


def _rot(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def rotation_family(amplitude: float = 1.0) -> KinematicSpec:
    """Planar rotation by ``amplitude * sin(t)``."""

    def S_dot(t):
        a = amplitude * math.sin(t)
        w = amplitude * math.cos(t)
        return w * np.array([[-math.sin(a), -math.cos(a)], [math.cos(a), -math.sin(a)]])

    return KinematicSpec(
        lambda t: _rot(amplitude * math.sin(t)), lambda t: _rot(-amplitude * math.sin(t)), S_dot,
        1.0, 1.0, abs(amplitude), False, "rotation",
    )


def _check_spec(sys: LinearSystem, spec: KinematicSpec, samples: int, seed: int):
    d = sys.dimension
    H = min(sys.horizon, 1e6)
    ts = np.concatenate([[0.0, H], np.random.default_rng(seed).uniform(0.0, H, samples)])
    for t in ts:
        S, Si, Sd = (np.atleast_2d(np.asarray(f(t), dtype=float)) for f in (spec.S, spec.S_inv, spec.S_dot))
        if S.shape != (d, d):
            raise KinematicError(f"S({t:g}) has shape {S.shape}, expected {(d, d)}")
        if np.linalg.norm(S, 2) > spec.bound * (1 + 1e-9):
            raise KinematicError(f"|S({t:g})| exceeds the declared bound {spec.bound}")
        if np.linalg.norm(Si, 2) > spec.inv_bound * (1 + 1e-9):
            raise KinematicError(f"|S^-1({t:g})| exceeds the declared bound {spec.inv_bound}")
        if not spec.constant and np.linalg.norm(Sd, 2) > spec.dot_bound * (1 + 1e-9):
            raise KinematicError(f"|S'({t:g})| exceeds the declared bound {spec.dot_bound}")
        if np.linalg.norm(S @ Si - np.eye(d)) > 1e-8:
            raise KinematicError(f"S_inv({t:g}) is not the inverse of S")


def kinematic_transform(
    sys: LinearSystem, spec: KinematicSpec, max_cell: float = 1.0, samples: int = 64, seed: int = 0
) -> LinearSystem:
    """The system ``y' = S^-1 (A S - S') y`` kinematically similar to ``sys``."""
    _check_spec(sys, spec, samples, seed)
    bound = None
    if sys.bound is not None:
        bound = spec.inv_bound * (sys.bound * spec.bound + spec.dot_bound)
    tags = {"bounded"} if bound is not None else set()
    name = f"{sys.name}|{spec.name or 'similar'}"
    if spec.constant and not isinstance(sys.body, General):
        M, Mi = spec.S(0.0), spec.S_inv(0.0)
        body = sys.body
        if isinstance(body, ScalarRule):
            new = body
            mats = [body.matrix(0)]
        else:
            phases = {k: Mi @ np.asarray(m, dtype=float) @ M for k, m in body.phase_matrices.items()}
            new = PiecewiseConstant(body.sequence, phases, body.phase_rule)
            mats = list(phases.values())
        if all(np.allclose(np.tril(m, -1), 0, atol=0) for m in mats):
            tags.add("upper_triangular")
        if bound is not None:
            bound = max(bound, max(float(np.linalg.norm(m, 2)) for m in mats))
        return LinearSystem(sys.dimension, new, bound, frozenset(tags), name, dict(sys.params))

    seq = sys.sequence
    gaps = []
    for g in seq.gaps:
        n = max(1, math.ceil(g / max_cell))
        gaps.extend([g / n] * n)
        if len(gaps) > 200_000:
            raise KinematicError("horizon too long for a time-dependent transform; shorten the sequence")
    cells = SwitchingSequence("custom", len(gaps), tuple(gaps))
    A, S, Si, Sd = sys.A, spec.S, spec.S_inv, spec.S_dot

    def B(t: float) -> np.ndarray:
        return Si(t) @ (A(t) @ S(t) - Sd(t))

    return LinearSystem(sys.dimension, General(B, cells), bound, frozenset(tags), name, dict(sys.params))


# ---------------------------------------------------------------------------
# witnesses


def interval_witness(
    sys: LinearSystem,
    ss: SpectrumEstimate,
    index: int,
    tol: float = 0.05,
    grid: WindowGrid | None = None,
    n_directions: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """A direction whose Bohl interval lies in the ``index``-th SS interval.

    Candidates come from the complement of the pseudo-stable space below the
    interval inside the one above it; if the dichotomy test cannot supply
    those spaces the whole sphere is swept.
    """
    d = sys.dimension
    iv = ss.intervals[index]
    grid = grid or default_grid(sys)
    below = above = None
    if d <= 4:
        if index > 0:
            g = 0.5 * (ss.intervals[index - 1].hi + iv.lo)
            v = dichotomy_test(sys, g, grid)
            below = v.basis if v.admits else None
        else:
            below = np.zeros((d, 0))
        if index < len(ss) - 1:
            g = 0.5 * (iv.hi + ss.intervals[index + 1].lo)
            v = dichotomy_test(sys, g, grid)
            above = v.basis if v.admits else None
        else:
            above = np.eye(d)
    n = max(8 * d, 64) if n_directions is None else n_directions
    cands = sweep_directions(d, n, seed)
    if below is not None and above is not None:
        W = _span(above.T) if above.size else np.zeros((d, 0))
        P = _span(below.T) if below.size else np.zeros((d, 0))
        V = W - P @ (P.T @ W) if P.size else W
        Vb = _span(V.T) if V.size else np.zeros((d, 0))
        if Vb.shape[1]:
            proj = cands @ Vb @ Vb.T
            keep = np.linalg.norm(proj, axis=1) > 1e-9
            inside = proj[keep] / np.linalg.norm(proj[keep], axis=1, keepdims=True)
            cands = np.vstack([Vb.T, inside])
    ests = bohl_intervals(sys, cands, grid)
    target = Interval(iv.lo, iv.hi, iv.lo_margin, iv.hi_margin)
    for x, e in zip(cands, ests):
        if target.covers(Interval(e.lower, e.upper), tol):
            return x / np.linalg.norm(x)
    raise WitnessError(f"no sampled direction has a Bohl interval inside [{iv.lo:.4g}, {iv.hi:.4g}] +- {tol}")
