"""Nonlinear perturbations ``x' = A(t) x + f(t, x)``: simulation, stability
probes and the checks attached to the dyadic counterexample.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .system import (
    SEC6_NONLINEAR,
    ExampleSpec,
    General,
    LinearSystem,
    PiecewiseConstant,
    build_example,
)

BLOWUP_THRESHOLD = 1e6
GROWTH_FACTOR = 10.0
SIM_RTOL = 1e-10
SIM_ATOL = 1e-300
MAX_STEPS = 5_000_000
BOUND_SAMPLES = 1000


class PerturbationError(ValueError):
    """The perturbation violates its declared bound or does not fix 0."""


# ---------------------------------------------------------------------------
# systems


def quadratic_form_rhs(Q: np.ndarray) -> Callable:
    Q = np.asarray(Q, dtype=float)
    return lambda t, x: np.einsum("ijk,j,k->i", Q, x, x)


def x1_squared(d: int = 2) -> np.ndarray:
    """Quadratic form of ``f(x) = (0, x_1^2)``."""
    Q = np.zeros((d, d, d))
    Q[1, 0, 0] = 1.0
    return Q


@dataclass(frozen=True, eq=False)
class NonlinearSystem:
    """``x' = A(t) x + f(t, x)`` with ``|f(t, x)| <= L |x|^q`` for ``|x| <= delta``.

    ``Q`` optionally gives ``f`` as a quadratic form, which lets the compiled
    integrator take over.
    """

    linear: LinearSystem
    f: Callable | None = None
    L: float = 1.0
    q: float = 2.0
    delta: float = 1.0
    Q: np.ndarray | None = None
    name: str = ""
    validate: bool = True

    def __post_init__(self):
        if self.Q is not None:
            Q = np.asarray(self.Q, dtype=float)
            d = self.linear.dimension
            if Q.shape != (d, d, d):
                raise PerturbationError(f"Q must have shape {(d, d, d)}")
            object.__setattr__(self, "Q", Q)
            if self.f is None:
                object.__setattr__(self, "f", quadratic_form_rhs(Q))
        if self.f is None:
            raise PerturbationError("either f or Q is required")
        if not self.q > 1:
            raise PerturbationError("q must exceed 1")
        if not (self.delta > 0 and self.L >= 0):
            raise PerturbationError("delta must be positive and L non-negative")
        if self.validate:
            self.check_bound()

    def check_bound(self, samples: int = BOUND_SAMPLES, seed: int = 0) -> None:
        d = self.linear.dimension
        rng = np.random.default_rng(seed)
        H = min(self.linear.horizon, 1e4)
        ts = rng.uniform(0.0, H, samples)
        dirs = rng.normal(size=(samples, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = self.delta * rng.uniform(0.0, 1.0, samples) ** (1.0 / d)
        for t in ts[:16]:
            if np.linalg.norm(self.f(t, np.zeros(d))) != 0:
                raise PerturbationError(f"f({t:g}, 0) is not zero")
        for t, u, r in zip(ts, dirs, radii):
            x = r * u
            if np.linalg.norm(self.f(t, x)) > self.L * r**self.q * (1 + 1e-9):
                raise PerturbationError(f"|f(t, x)| > L |x|^q at t={t:g}, |x|={r:g}")

    def rhs_factory(self):
        """``make_rhs(k)`` for the integration intervals of the linear part."""
        sys, f = self.linear, self.f
        if isinstance(sys.body, General):
            A = sys.body.func
            return lambda k: (lambda t, x: np.asarray(A(t)) @ x + f(t, x))

        def make(k):
            M = sys.segment_matrix(k)
            return lambda t, x: M @ x + f(t, x)

        return make


def prop52_nonlinear(delta: float = 1.0, horizon_segments: int = 15) -> NonlinearSystem:
    """prop52 on the mild51 sequence plus ``(0, x_1^2)``."""
    lin = build_example(ExampleSpec("prop52", {"delta": delta}, "mild51", horizon_segments))
    return NonlinearSystem(lin, L=1.0, q=2.0, delta=1.0, Q=x1_squared(), name="prop52+x1^2")


def sec6_nonlinear(params=None, horizon_segments: int = 13) -> NonlinearSystem:
    """The dyadic counterexample plus ``(0, x_1^2)``; 13 segments reach ``2**12``."""
    lin = build_example(ExampleSpec("sec6", dict(params or SEC6_NONLINEAR), "dyadic", horizon_segments))
    return NonlinearSystem(lin, L=1.0, q=2.0, delta=1.0, Q=x1_squared(), name="sec6+x1^2")


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True, eq=False)
class Trajectory:
    ts: np.ndarray
    xs: np.ndarray
    status: str  # completed | blowup | stalled
    blowup_time: float | None = None
    notes: tuple[str, ...] = ()

    @property
    def norms(self) -> np.ndarray:
        return scaled_norms(self.xs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm", *[f"x{k + 1}" for k in range(self.xs.shape[1])]])
            for t, n, x in zip(self.ts, self.norms, self.xs):
                w.writerow([repr(float(t)), repr(float(n)), *map(repr, x.tolist())])


def scaled_norms(xs: np.ndarray) -> np.ndarray:
    """Row norms that neither underflow nor overflow in the squares."""
    xs = np.atleast_2d(xs)
    m = np.max(np.abs(xs), axis=1)
    safe = np.where(m > 0, m, 1.0)
    return m * np.linalg.norm(xs / safe[:, None], axis=1)


def _boundaries(sys: LinearSystem, horizon: float) -> np.ndarray:
    b = np.asarray(sys.sequence.boundaries, dtype=float)
    k = int(np.searchsorted(b, horizon, side="left"))
    return np.append(b[: k + 1][b[: k + 1] < horizon], horizon)


def _interval_of(bnd: np.ndarray, t: float) -> int:
    return max(0, min(int(np.searchsorted(bnd, t, side="right")) - 1, len(bnd) - 2))


def simulate(
    nsys: NonlinearSystem,
    x0,
    horizon: float | None = None,
    blowup_threshold: float = BLOWUP_THRESHOLD,
    rtol: float = SIM_RTOL,
    atol: float = SIM_ATOL,
    max_steps: int = MAX_STEPS,
) -> Trajectory:
    """Adaptive Dormand-Prince trajectory that never steps across a switch.

    Stops with a blow-up marker once ``|x(t)|`` exceeds ``blowup_threshold``;
    the crossing time is then refined by bisection to relative ``1e-6``.
    """
    sys = nsys.linear
    if isinstance(sys.body, PiecewiseConstant) and sys.sequence.kind == "paper51":
        raise ValueError("step-wise integration over paper51 segments is infeasible; use mild51")
    H = sys.horizon if horizon is None else float(horizon)
    if not 0 < H <= sys.horizon * (1 + 1e-12):
        raise ValueError(f"horizon must lie in (0, {sys.horizon}]")
    H = min(H, sys.horizon)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.dimension,):
        raise ValueError(f"x0 must have shape {(sys.dimension,)}")
    bnd = _boundaries(sys, H)
    if nsys.Q is not None and isinstance(sys.body, PiecewiseConstant):
        mats = np.array([sys.segment_matrix(k) for k in range(len(bnd) - 1)])
        ts, xs, status = _kernels.dp45_piecewise(bnd, mats, nsys.Q, x0, H, rtol, atol, blowup_threshold, max_steps)
    else:
        ts, xs, status = _kernels.integrate_intervals(
            bnd, nsys.rhs_factory(), x0, H, rtol, atol, blowup_threshold, max_steps
        )
    if status == 0:
        return Trajectory(ts, xs, "completed")
    if status == 2:
        return Trajectory(ts, xs, "stalled", notes=(f"step underflow or budget exhausted near t={ts[-1]:.6g}",))
    t_cross = _refine_crossing(nsys, bnd, ts[-2], xs[-2], ts[-1], blowup_threshold, rtol, atol)
    return Trajectory(ts, xs, "blowup", t_cross)


def _refine_crossing(nsys, bnd, t0, x0, t1, threshold, rtol, atol) -> float:
    rhs = nsys.rhs_factory()(_interval_of(bnd, t0))
    lo, hi = t0, t1
    while hi - lo > 1e-6 * abs(hi):
        mid = 0.5 * (lo + hi)
        _, xs, status, _ = _kernels.dp45_solve(rhs, t0, x0, mid, rtol, atol, math.inf, MAX_STEPS)
        if status == 0 and np.linalg.norm(xs[-1]) > threshold:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# stability probes


@dataclass(frozen=True)
class StabilityVerdict:
    """``kind`` is exp_stable_evidence, unstable_evidence or indeterminate."""

    kind: str
    horizon_used: float
    K: float | None = None
    alpha: float | None = None
    delta_tilde: float | None = None
    escape_time: float | None = None
    escape_norm: float | None = None
    witness_initial: tuple | None = None
    notes: tuple[str, ...] = ()
    probes: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "horizon_used": self.horizon_used,
            "K": self.K,
            "alpha": self.alpha,
            "delta_tilde": self.delta_tilde,
            "escape_time": self.escape_time,
            "escape_norm": self.escape_norm,
            "witness_initial": None if self.witness_initial is None else list(self.witness_initial),
            "notes": list(self.notes),
            "probes": self.probes,
        }


def probe_directions(d: int, n: int = 8, seed: int = 0) -> np.ndarray:
    """``n`` unit vectors: a full circle in the plane, else axes plus random."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        th = 2 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(th), np.sin(th)])
    rows = list(np.eye(d))
    z = np.random.default_rng(seed).normal(size=(max(0, n - d), d))
    rows.extend(z / np.linalg.norm(z, axis=1, keepdims=True))
    return np.array(rows[:n])


def decay_fit(ts: np.ndarray, log_r: np.ndarray) -> tuple[float, float]:
    """``(ln K, alpha)`` with ``log_r <= ln K - alpha t`` at every sample.

    ``alpha`` is the least-squares decay rate of the running-max envelope
    over the last three quarters of the run.
    """
    env = np.maximum.accumulate(log_r[::-1])[::-1]
    T = ts[-1]
    sel = ts >= 0.25 * T
    if sel.sum() < 2 or T <= 0:
        return float(np.max(log_r)), 0.0
    slope = np.polyfit(ts[sel], env[sel], 1)[0]
    alpha = -float(slope)
    return float(np.max(log_r + alpha * ts)), alpha


def stability_probe(
    nsys: NonlinearSystem,
    radii,
    horizon: float | None = None,
    n_directions: int = 8,
    blowup_threshold: float = BLOWUP_THRESHOLD,
    seed: int = 0,
) -> StabilityVerdict:
    """Probe the origin from ``n_directions`` points on each sphere of ``radii``."""
    radii = [float(r) for r in radii]
    if not radii or any(r <= 0 for r in radii) or any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be positive and strictly decreasing")
    if n_directions < 8:
        raise ValueError("at least 8 directions per radius")
    notes = []
    if len(radii) < 3:
        notes.append("fewer than 3 radii; the evidence is correspondingly weaker")
    H = nsys.linear.horizon if horizon is None else float(horizon)
    dirs = probe_directions(nsys.linear.dimension, n_directions, seed)
    fits, decayed_radii, stuck = [], [], False
    for r in radii:
        all_decayed = True
        for u in dirs:
            x0 = r * u
            tr = simulate(nsys, x0, H, blowup_threshold)
            n0 = float(np.linalg.norm(x0))
            if tr.status == "blowup":
                return StabilityVerdict(
                    "unstable_evidence", H, escape_time=tr.blowup_time, escape_norm=float(tr.norms[-1]),
                    witness_initial=tuple(x0.tolist()), notes=tuple(notes), probes=len(radii) * len(dirs),
                )
            if tr.status == "stalled":
                notes.extend(tr.notes)
                stuck = True
                all_decayed = False
                continue
            final = float(tr.norms[-1])
            if final > GROWTH_FACTOR * n0:
                return StabilityVerdict(
                    "unstable_evidence", H, escape_time=None, escape_norm=final,
                    witness_initial=tuple(x0.tolist()),
                    notes=tuple(notes + [f"final norm exceeds {GROWTH_FACTOR:g} times the initial norm"]),
                    probes=len(radii) * len(dirs),
                )
            if final >= n0:
                all_decayed = False
            with np.errstate(divide="ignore"):
                fits.append((tr.ts, np.log(tr.norms / n0)))
        if all_decayed:
            decayed_radii.append(r)
    if stuck or not decayed_radii:
        notes.append("neither decay nor escape within the horizon; a longer run is needed")
        return StabilityVerdict("indeterminate", H, notes=tuple(notes), probes=len(radii) * len(dirs))
    alpha = min(decay_fit(ts, lr)[1] for ts, lr in fits)
    if not alpha > 0:
        notes.append("envelopes do not decay exponentially within the horizon")
        return StabilityVerdict("indeterminate", H, notes=tuple(notes), probes=len(radii) * len(dirs))
    # the uniform K is only estimated: the largest over the probes
    log_K = max(float(np.max(lr + alpha * ts)) for ts, lr in fits)
    notes.append("K is the largest fitted constant over the probes, not a proven uniform bound")
    return StabilityVerdict(
        "exp_stable_evidence", H, K=math.exp(log_K), alpha=alpha, delta_tilde=max(decayed_radii),
        notes=tuple(notes), probes=len(radii) * len(dirs),
    )


# ---------------------------------------------------------------------------
# dyadic counterexample checks


@dataclass(frozen=True)
class BoundReport:
    passed: bool
    tightest_ratio: float
    times: tuple[float, ...]
    ratios: tuple[float, ...]
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tightest_ratio": self.tightest_ratio,
            "samples": [{"t": t, "ratio": r} for t, r in zip(self.times, self.ratios)],
            "notes": list(self.notes),
        }


def _sec6_params(sys: LinearSystem):
    try:
        return sys.params["alpha"], sys.params["beta"], sys.params["gamma"]
    except KeyError:
        raise ValueError("expected the dyadic counterexample (params alpha, beta, gamma)") from None


def log_second_component(sys: LinearSystem, t: float) -> float:
    """``ln(y(t) / y(0))`` from exact segment sums of the ``(2,2)`` entry."""
    seq = sys.sequence
    tp = seq.locate(t) if t < seq.horizon else seq.point(seq.horizon_segments - 1, seq.gaps[-1])
    parts = [sys.segment_matrix(k)[1, 1] * seq.gaps[k] for k in range(tp.segment)]
    parts.append(sys.segment_matrix(tp.segment)[1, 1] * tp.offset)
    return math.fsum(parts)


def lemma63_bound_check(sys: LinearSystem, y0: float = 1.0, sample_times=None) -> BoundReport:
    """``|y(t)| <= exp(-(beta - 2 gamma) t / 3) |y(0)|`` in closed form."""
    if sys.sequence.kind != "dyadic" or not isinstance(sys.body, PiecewiseConstant):
        raise ValueError("the bound applies to the piecewise-constant dyadic system")
    _, beta, gamma = _sec6_params(sys)
    if sample_times is None:
        sample_times = np.linspace(0.0, sys.horizon, 100)
    times = tuple(float(t) for t in sample_times)
    rate = (beta - 2 * gamma) / 3
    if y0 == 0:
        return BoundReport(True, 0.0, times, tuple(0.0 for _ in times), ("y is identically zero",))
    logs = [log_second_component(sys, t) + rate * t for t in times]
    ratios = tuple(math.exp(min(l, 700.0)) for l in logs)
    tight = max(logs)
    ok = all(l <= 1e-12 * (1 + rate * t) for l, t in zip(logs, times))
    return BoundReport(ok, math.exp(min(tight, 700.0)), times, ratios)


@dataclass(frozen=True)
class LowerBoundReport:
    passed: bool
    positive: bool
    entries: tuple[tuple[int, float, float, float, bool], ...]  # (k, t, y, bound, ok)
    blowup_time: float | None = None

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "positive": self.positive,
            "blowup_time": self.blowup_time,
            "entries": [dict(zip(("k", "t", "y", "bound", "ok"), e)) for e in self.entries],
        }


def prop65_bound(alpha: float, gamma: float, x0: float, k: int) -> float:
    return math.expm1((gamma - 2 * alpha) * 4.0**k) / (2 * alpha + gamma) * x0**2


def prop65_lower_bound_check(nsys: NonlinearSystem, x0: float = 0.1, y0: float = 0.1, k_max: int = 3, k_min: int = 1):
    """Simulated ``y(2^(2k+1))`` against the lower bound, plus positivity."""
    if not (x0 > 0 and y0 > 0):
        raise ValueError("both initial components must be positive")
    sys = nsys.linear
    alpha, _, gamma = _sec6_params(sys)
    T = 2.0 ** (2 * k_max + 1)
    if T > sys.horizon:
        raise ValueError(f"k_max={k_max} needs a horizon of {T:g}")
    tr = simulate(nsys, [x0, y0], T, blowup_threshold=1e300)
    positive = bool(np.all(tr.xs > 0))
    entries = []
    for k in range(k_min, k_max + 1):
        t = 2.0 ** (2 * k + 1)
        bound = prop65_bound(alpha, gamma, x0, k)
        hit = np.flatnonzero(tr.ts == t)
        if hit.size:
            y = float(tr.xs[hit[0], 1])
        elif tr.status == "blowup" and tr.blowup_time is not None and tr.blowup_time <= t:
            y = math.inf
        else:
            y = float(np.interp(t, tr.ts, tr.xs[:, 1]))
        entries.append((k, t, y, bound, y >= bound))
    passed = positive and all(e[-1] for e in entries)
    return LowerBoundReport(passed, positive, tuple(entries), tr.blowup_time)
