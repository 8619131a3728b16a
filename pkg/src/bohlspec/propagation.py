"""Log-space propagation of solutions of x' = A(t) x.

A solution is stored as a unit direction plus the natural log of its norm.
Piecewise-constant systems whose phases split into independent 1x1 or 2x2
upper-triangular blocks use the closed-form exponential on whole segments,
so the cost does not depend on segment length.  Other constant phases use
``scipy.linalg.expm`` on sub-cells of length at most 10; general callables
are integrated with an adaptive Dormand-Prince scheme.

Each block keeps its own log-magnitude, so components of very different
size never have to share one floating-point vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from . import _kernels
from ._pykernels import dp45_step, _error_ratio
from .system import General, LinearSystem, TimePoint

EXPM_CAP = 10.0
RK_RTOL = 1e-10
NORMS = ("euclidean", "max")


class PropagationError(FloatingPointError):
    """Non-finite intermediate, step underflow or a time past the horizon."""


@dataclass(frozen=True)
class LogVector:
    direction: np.ndarray
    log_mag: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if not n > 0:
            raise ValueError("direction must be nonzero")
        object.__setattr__(self, "direction", d / n)

    @classmethod
    def from_vector(cls, x) -> "LogVector":
        x = np.asarray(x, dtype=float)
        n = float(np.linalg.norm(x))
        if not n > 0:
            raise ValueError("zero vector has no log-space form")
        return cls(x / n, math.log(n))

    def to_vector(self) -> np.ndarray:
        if abs(self.log_mag) > 700:
            raise OverflowError("magnitude outside double range")
        return math.exp(self.log_mag) * self.direction

    def max_log(self) -> float:
        """ln of the maximum norm."""
        return self.log_mag + math.log(float(np.max(np.abs(self.direction))))


# ---------------------------------------------------------------------------
# block structure


def block_structure(mats: Sequence[np.ndarray]):
    """Index groups of independent 1x1 / 2x2 upper-triangular blocks.

    Returns ``None`` when the phases do not split that way.
    """
    mats = [np.asarray(m, dtype=float) for m in mats]
    d = mats[0].shape[0]
    coupled = np.zeros((d, d), dtype=bool)
    for m in mats:
        coupled |= m != 0
    np.fill_diagonal(coupled, False)
    sym = coupled | coupled.T
    seen = [False] * d
    blocks = []
    for start in range(d):
        if seen[start]:
            continue
        comp, stack = [], [start]
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(sym[i]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        comp.sort()
        if len(comp) > 2:
            return None
        if len(comp) == 2 and coupled[comp[1], comp[0]]:
            return None
        blocks.append(tuple(comp))
    return blocks


# ---------------------------------------------------------------------------
# single-step propagators


@dataclass(frozen=True)
class SegmentPropagator:
    """Propagator for one segment.

    ``form`` is ``closed`` (block triangular closed form), ``expm`` or ``rk``.
    For ``rk`` the matrix may be a callable ``A(t)`` and ``t0`` is the clock at
    the segment start.
    """

    form: str
    matrix: np.ndarray | Callable[[float], np.ndarray]
    t0: float = 0.0
    segment: int = -1
    blocks: tuple = field(default=None, compare=False)

    @classmethod
    def for_matrix(cls, A, segment: int = -1) -> "SegmentPropagator":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        blocks = block_structure([A])
        if blocks is not None:
            return cls("closed", A, segment=segment, blocks=tuple(blocks))
        return cls("expm", A, segment=segment)

    def transition_log(self, dt: float) -> np.ndarray:
        """The matrix ``M(dt)`` for ``expm``/``closed`` forms (small dt only)."""
        if callable(self.matrix):
            raise TypeError("transition of a callable form needs integration")
        return expm(self.matrix * dt)


def _block_params(A: np.ndarray, blk) -> tuple[float, float, float]:
    if len(blk) == 1:
        a = A[blk[0], blk[0]]
        return a, a, 0.0
    p, q = blk
    return A[p, p], A[q, q], A[p, q]


def _block_dirs(x: np.ndarray, blk) -> tuple[float, float, float]:
    """(ln norm, u0, u1) of the block part of ``x``; scalar blocks pad with 0."""
    sub = x[list(blk)]
    n = float(np.linalg.norm(sub))
    if n == 0.0:
        return -math.inf, 1.0, 0.0
    sub = sub / n
    return math.log(n), float(sub[0]), float(sub[1]) if len(blk) == 2 else 0.0


def _combine_blocks(blocks, logs, dirs, d) -> LogVector:
    """Assemble per-block (log, unit direction) into one LogVector."""
    finite = [l for l in logs if l != -math.inf]
    top = max(finite)
    x = np.zeros(d)
    for blk, l, u in zip(blocks, logs, dirs):
        if l == -math.inf:
            continue
        w = math.exp(l - top)
        for k, idx in enumerate(blk):
            x[idx] = w * u[k]
    n = float(np.linalg.norm(x))
    return LogVector(x / n, top + math.log(n))


def _rk_columns(func, t0: float, t1: float, U: np.ndarray, rtol=RK_RTOL, hmax=math.inf):
    """Integrate ``Y' = A(t) Y`` column-wise with per-step renormalization.

    Returns ``(gains, U_end)``: per-column log growth and end directions.
    """
    Y = np.array(U, dtype=float)
    logs = np.zeros(Y.shape[1])
    t = float(t0)
    if t1 <= t:
        return logs, Y

    # stages at the cell ends are nudged inside so that a switch exactly at
    # t0 or t1 is attributed to this cell
    eps = 1e-12 * max(1.0, abs(t0), abs(t1))
    lo, hi = t0 + eps, t1 - eps

    def rhs(s, Z):
        return np.asarray(func(min(max(s, lo), hi)), dtype=float) @ Z

    h = min(0.05, t1 - t, hmax)
    k1 = rhs(t, Y)
    steps = 0
    while t < t1:
        last = h >= t1 - t
        hh = t1 - t if last else h
        Yn, err, k7 = dp45_step(rhs, t, Y, hh, k1)
        ratio = _error_ratio(Y, Yn, err, rtol, 0.0)
        steps += 1
        if steps > 10**6:
            raise PropagationError(f"step budget exhausted near t={t}")
        if ratio <= 1.0 and np.all(np.isfinite(Yn)):
            t = t1 if last else t + hh
            norms = np.linalg.norm(Yn, axis=0)
            if np.any(norms == 0):
                raise PropagationError(f"solution collapsed near t={t}")
            logs += np.log(norms)
            Y = Yn / norms
            k1 = k7 / norms
            fac = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
            h = min(max(h, hh * fac) if last else hh * fac, hmax)
        else:
            h = hh * (0.2 if not math.isfinite(ratio) else max(0.2, 0.9 * ratio ** -0.25))
            if h < 1e-14 * max(1.0, abs(t)):
                raise PropagationError(f"step size underflow near t={t}")
    return logs, Y


def apply_propagator(p: SegmentPropagator, state: LogVector, dt: float) -> LogVector:
    """Advance ``state`` by ``dt`` under the propagator's (constant) matrix."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return state
    x = state.direction
    d = x.shape[0]
    try:
        if p.form == "closed":
            logs, dirs = [], []
            for blk in p.blocks:
                l0, u0, u1 = _block_dirs(x, blk)
                if l0 == -math.inf:
                    logs.append(l0)
                    dirs.append((1.0, 0.0))
                    continue
                a, b, c = _block_params(p.matrix, blk)
                g, v0, v1 = _kernels.tri_step(a, b, c, u0, u1, dt)
                logs.append(l0 + g)
                dirs.append((v0, v1))
            out = _combine_blocks(p.blocks, logs, dirs, d)
        elif p.form == "expm":
            n = max(1, math.ceil(dt / EXPM_CAP))
            E = expm(p.matrix * (dt / n))
            log_gain, u = 0.0, x
            for _ in range(n):
                v = E @ u
                nv = np.linalg.norm(v)
                log_gain += math.log(nv)
                u = v / nv
            out = LogVector(u, log_gain)
        elif p.form == "rk":
            func = p.matrix if callable(p.matrix) else (lambda t, M=p.matrix: M)
            g, U = _rk_columns(func, p.t0, p.t0 + dt, x[:, None])
            out = LogVector(U[:, 0], float(g[0]))
        else:
            raise ValueError(f"unknown propagator form {p.form!r}")
    except (FloatingPointError, ValueError, OverflowError) as exc:
        raise PropagationError(f"segment {p.segment}, dt={dt!r}: {exc}") from None
    if not math.isfinite(out.log_mag) or not np.all(np.isfinite(out.direction)):
        raise PropagationError(f"non-finite state in segment {p.segment}, dt={dt!r}")
    return LogVector(out.direction, state.log_mag + out.log_mag)


# ---------------------------------------------------------------------------
# cell plans


@dataclass(frozen=True, eq=False)
class CellPlan:
    """Partition of the horizon into propagation cells.

    ``seg_first[k]`` is the first cell of segment ``k``; cells of one segment
    have equal length.
    """

    kind: str
    lengths: np.ndarray
    cell_seg: np.ndarray
    seg_first: np.ndarray
    seg_ncell: np.ndarray
    blocks: tuple = ()
    block_params: tuple = ()  # per block: (a, b, c) arrays over cells
    cell_mats: tuple = ()  # expm: per-cell matrix

    @property
    def ncell(self) -> int:
        return len(self.lengths)

    def locate(self, segment: int, offset: float, seq) -> tuple[int, float]:
        """Cell index and in-cell offset for a segment-relative time."""
        first, n = int(self.seg_first[segment]), int(self.seg_ncell[segment])
        if n == 1:
            return first, offset
        sub = seq.gaps[segment] / n
        k = min(int(offset // sub), n - 1)
        return first + k, offset - k * sub

    def cell_start_offset(self, cell: int, seq) -> float:
        seg = int(self.cell_seg[cell])
        return (cell - int(self.seg_first[seg])) * seq.gaps[seg] / int(self.seg_ncell[seg])


@lru_cache(maxsize=64)
def plan_cells(sys: LinearSystem, force: str | None = None) -> CellPlan:
    seq = sys.sequence
    gaps = np.asarray(seq.gaps, dtype=float)
    nseg = len(gaps)
    if isinstance(sys.body, General):
        if force not in (None, "rk"):
            raise ValueError("general bodies only support rk propagation")
        idx = np.arange(nseg)
        return CellPlan("rk", gaps, idx, idx, np.ones(nseg, dtype=int))
    mats = [sys.segment_matrix(k) for k in range(nseg)]
    blocks = block_structure(mats) if force in (None, "closed") else None
    if force == "closed" and blocks is None:
        raise ValueError("phases are not block triangular")
    if blocks is not None and force != "expm" and force != "rk":
        params = []
        for blk in blocks:
            abc = np.array([_block_params(m, blk) for m in mats])
            params.append((abc[:, 0].copy(), abc[:, 1].copy(), abc[:, 2].copy()))
        idx = np.arange(nseg)
        return CellPlan("closed", gaps, idx, idx, np.ones(nseg, dtype=int), tuple(blocks), tuple(params))
    ncell = np.maximum(1, np.ceil(gaps / EXPM_CAP).astype(int))
    first = np.concatenate([[0], np.cumsum(ncell)[:-1]])
    lengths = np.repeat(gaps / ncell, ncell)
    cell_seg = np.repeat(np.arange(nseg), ncell)
    cell_mats = tuple(mats[s] for s in cell_seg)
    return CellPlan(force or "expm", lengths, cell_seg, first, ncell, cell_mats=cell_mats)


# ---------------------------------------------------------------------------
# trajectory bundles


class Bundle:
    """Forward-propagated trajectories of several initial directions.

    Stores the direction at every cell start and the log gain over every
    cell, which is all a window query needs.
    """

    def __init__(self, sys: LinearSystem, directions, force: str | None = None, upto_cell: int | None = None):
        X = np.atleast_2d(np.asarray(directions, dtype=float))
        if X.shape[1] != sys.dimension:
            raise ValueError(f"directions must have {sys.dimension} columns")
        norms = np.linalg.norm(X, axis=1)
        if np.any(norms == 0):
            raise ValueError("initial directions must be nonzero")
        self.sys = sys
        self.seq = sys.sequence
        self.plan = plan_cells(sys, force)
        self.X0 = X / norms[:, None]
        self.n = X.shape[0]
        self.upto = self.plan.ncell if upto_cell is None else min(upto_cell + 1, self.plan.ncell)
        self._run()

    # -- forward pass ------------------------------------------------------
    def _run(self):
        plan, m = self.plan, self.upto
        lengths = plan.lengths[:m]
        if plan.kind == "closed":
            self.block_log0, self.block_dirs, self.block_gains, self.block_prefix = [], [], [], []
            for blk, (a, b, c) in zip(plan.blocks, plan.block_params):
                sub = self.X0[:, list(blk)]
                nb = np.linalg.norm(sub, axis=1)
                active = nb > 0
                U0 = np.zeros((self.n, 2))
                U0[:, 0] = 1.0
                U0[active, : len(blk)] = sub[active] / nb[active, None]
                try:
                    dirs, gains = _kernels.forward_closed(a[:m], b[:m], c[:m], lengths, U0)
                except FloatingPointError as exc:
                    raise PropagationError(str(exc)) from None
                with np.errstate(divide="ignore"):
                    log0 = np.where(active, np.log(np.where(active, nb, 1.0)), -np.inf)
                self.block_log0.append(log0)
                self.block_dirs.append(dirs)
                self.block_gains.append(gains)
                self.block_prefix.append(np.concatenate([np.zeros((self.n, 1)), np.cumsum(gains, axis=1)], axis=1))
            return
        d = self.sys.dimension
        dirs = np.empty((self.n, m + 1, d))
        gains = np.empty((self.n, m))
        U = self.X0.T.copy()
        dirs[:, 0] = self.X0
        if plan.kind == "rk":
            general = isinstance(self.sys.body, General)
            hmax = math.inf if self.sys.bound is None else 1.0 / (10 * self.sys.bound)
            t = 0.0
            for k in range(m):
                if general:
                    func, t_next = self.sys.body.func, self.seq.boundaries[k + 1]
                else:
                    M = plan.cell_mats[k]
                    func, t_next = (lambda s, M=M: M), t + plan.lengths[k]
                g, U = _rk_columns(func, t, t_next, U, hmax=hmax)
                gains[:, k] = g
                dirs[:, k + 1] = U.T
                t = t_next
        else:
            cache = {}
            for k in range(m):
                key = (id(plan.cell_mats[k]), lengths[k])
                E = cache.get(key)
                if E is None:
                    E = cache[key] = expm(plan.cell_mats[k] * lengths[k])
                V = E @ U
                nv = np.linalg.norm(V, axis=0)
                if np.any(~np.isfinite(nv)) or np.any(nv == 0):
                    raise PropagationError(f"non-finite state in cell {k}")
                gains[:, k] = np.log(nv)
                U = V / nv
                dirs[:, k + 1] = U.T
        self.dirs, self.gains = dirs, gains
        self.prefix = np.concatenate([np.zeros((self.n, 1)), np.cumsum(gains, axis=1)], axis=1)

    # -- helpers -----------------------------------------------------------
    def locate(self, tp: TimePoint) -> tuple[int, float]:
        cell, off = self.plan.locate(tp.segment, tp.offset, self.seq)
        if cell >= self.upto:
            raise PropagationError("time beyond the propagated range")
        return cell, off

    def _partial(self, r: int, cell: int, off: float):
        """(log gain, direction) from the start of ``cell`` to ``off`` inside it."""
        u = self.dirs[r, cell]
        if off == 0.0:
            return 0.0, u
        if self.plan.kind == "rk" and isinstance(self.sys.body, General):
            t0 = self.seq.boundaries[cell]
            g, U = _rk_columns(self.sys.body.func, t0, t0 + off, u[:, None])
            return float(g[0]), U[:, 0]
        E = expm(self.plan.cell_mats[cell] * off)
        v = E @ u
        nv = float(np.linalg.norm(v))
        return math.log(nv), v / nv

    # -- queries -----------------------------------------------------------
    def windows(self, traj, i, o, j, o2, norm: str = "euclidean"):
        """Log norm ratios over windows ``(i, o) -> (j, o2)`` in cell coordinates.

        Returns ``(L, ratio)`` arrays where ``L`` is the window length.
        """
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        traj = np.atleast_1d(np.asarray(traj, dtype=np.int64))
        i = np.atleast_1d(np.asarray(i, dtype=np.int64))
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        o = np.broadcast_to(np.asarray(o, dtype=float), i.shape).copy()
        o2 = np.broadcast_to(np.asarray(o2, dtype=float), j.shape).copy()
        if np.any(j >= self.upto) or np.any((j < i) | ((j == i) & (o2 < o))):
            raise ValueError("invalid window")
        if self.plan.kind == "closed":
            return self._windows_closed(traj, i, o, j, o2, norm)
        return self._windows_cells(traj, i, o, j, o2, norm)

    def _windows_closed(self, traj, i, o, j, o2, norm):
        plan = self.plan
        L = None
        base, gain, cs, ct = [], [], [], []
        for bi, (a, b, c) in enumerate(plan.block_params):
            lead, G, Lb, us, ut = _kernels.window_closed(
                a, b, c, plan.lengths, self.block_dirs[bi], self.block_gains[bi], traj, i, o, j, o2
            )
            if L is None:
                L = Lb
            # absolute logs are only used to rank blocks; window gains are
            # kept separate so they are never absorbed by a huge absolute log
            base.append(self.block_log0[bi][traj] + self.block_prefix[bi][traj, i] + lead)
            gain.append(G)
            if norm == "max":
                cs.append(np.log(np.max(np.abs(us), axis=1)))
                ct.append(np.log(np.max(np.abs(ut), axis=1)))
            else:
                cs.append(np.zeros_like(G))
                ct.append(np.zeros_like(G))
        base, gain, cs, ct = map(np.array, (base, gain, cs, ct))
        if len(plan.blocks) == 1:
            return L, gain[0] + ct[0] - cs[0]
        top = np.max(base, axis=0)
        with np.errstate(invalid="ignore"):
            rs = base - top
        rs = np.where(np.isnan(rs), -np.inf, rs)
        rt = rs + gain
        if norm == "max":
            return L, np.max(rt + ct, axis=0) - np.max(rs + cs, axis=0)
        return L, 0.5 * (_lse(2 * rt) - _lse(2 * rs))

    def _windows_cells(self, traj, i, o, j, o2, norm):
        # offsets at a cell end are the start of the next cell
        lens = self.plan.lengths
        end_i = o >= lens[i]
        i, o = np.where(end_i, i + 1, i), np.where(end_i, 0.0, o)
        end_j = o2 >= lens[j]
        j, o2 = np.where(end_j, j + 1, j), np.where(end_j, 0.0, o2)
        Lsum, Gsum = _kernels.span_sums(self.plan.lengths, self.gains, traj, i, j)
        L = Lsum - o + o2
        ratio = Gsum.copy()
        nonzero = np.flatnonzero((o != 0) | (o2 != 0))
        us = self.dirs[traj, i].copy()
        ut = self.dirs[traj, j].copy()
        for q in nonzero:
            g1, u1 = self._partial(traj[q], i[q], o[q])
            g2, u2 = self._partial(traj[q], j[q], o2[q])
            ratio[q] += g2 - g1
            us[q], ut[q] = u1, u2
        if norm == "max":
            ratio += np.log(np.max(np.abs(ut), axis=1)) - np.log(np.max(np.abs(us), axis=1))
        return L, ratio

    def state(self, r: int, tp: TimePoint) -> LogVector:
        cell, off = self.locate(tp)
        if self.plan.kind == "closed":
            logs, dirs = [], []
            for bi, (a, b, c) in enumerate(self.plan.block_params):
                l0 = self.block_log0[bi][r]
                u = self.block_dirs[bi][r, cell]
                g, v0, v1 = _kernels.tri_step(a[cell], b[cell], c[cell], u[0], u[1], off)
                logs.append(l0 + math.fsum(self.block_gains[bi][r, :cell]) + g if l0 != -math.inf else -math.inf)
                dirs.append((v0, v1))
            return _combine_blocks(self.plan.blocks, logs, dirs, self.sys.dimension)
        g, u = self._partial(r, cell, off)
        return LogVector(u, math.fsum(self.gains[r, :cell]) + g)


def _lse(x: np.ndarray) -> np.ndarray:
    top = np.max(x, axis=0)
    with np.errstate(invalid="ignore", under="ignore"):
        return top + np.log(np.sum(np.exp(x - top), axis=0))


# ---------------------------------------------------------------------------
# public operations


def as_timepoint(sys: LinearSystem, t) -> TimePoint:
    if isinstance(t, TimePoint):
        if t.segment >= sys.sequence.horizon_segments:
            raise PropagationError("time beyond horizon")
        return t
    try:
        return sys.sequence.locate(float(t))
    except ValueError as exc:
        raise PropagationError(str(exc)) from None


def evolve(sys: LinearSystem, xi, t) -> LogVector:
    """The solution ``X(t) xi / |xi|`` in log space."""
    tp = as_timepoint(sys, t)
    cell, _ = plan_cells(sys).locate(tp.segment, tp.offset, sys.sequence)
    return Bundle(sys, [xi], upto_cell=cell).state(0, tp)


def log_norm_ratio(sys: LinearSystem, xi, s, t, norm: str = "euclidean") -> float:
    """``ln |X(t) xi| - ln |X(s) xi|`` from one forward pass."""
    sp, tp = as_timepoint(sys, s), as_timepoint(sys, t)
    if (tp.segment, tp.offset) < (sp.segment, sp.offset):
        raise ValueError("t must not precede s")
    b = Bundle(sys, [xi])
    i, o = b.locate(sp)
    j, o2 = b.locate(tp)
    _, ratio = b.windows([0], [i], [o], [j], [o2], norm)
    return float(ratio[0])


def trajectory_rows(sys: LinearSystem, xi, times) -> list[list[float]]:
    b = Bundle(sys, [xi])
    rows = []
    for t in times:
        tp = as_timepoint(sys, t)
        lv = b.state(0, tp)
        rows.append([tp.clock, lv.log_mag, *lv.direction.tolist()])
    return rows


def dump_trajectory(sys: LinearSystem, xi, times, path) -> None:
    """CSV rows ``clock, log_mag, u_1..u_d`` at the requested times."""
    rows = trajectory_rows(sys, xi, times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clock", "log_mag", *[f"u{k + 1}" for k in range(sys.dimension)]])
        w.writerows(rows)
