"""Reference implementations of the hot loops.

The compiled module ``_ckernels`` exposes the same functions with the same
signatures; :mod:`bohlspec._kernels` picks one at import time.

A 2x2 upper-triangular cell ``[[a, c], [0, b]]`` of length ``tau`` acts on a
unit vector ``u`` through

    e^{A tau} u = (u0 e^{a tau} + c phi u1, u1 e^{b tau}),
    phi = (e^{a tau} - e^{b tau}) / (a - b)      (tau e^{a tau} if a == b).

Every term is formed from its logarithm so that no exponential of a large
argument is ever evaluated.  Scalar blocks use ``b = a, c = 0, u = (1, 0)``.
"""

from __future__ import annotations

import math

import numpy as np

_NEG_INF = float("-inf")


def _log_phi(a: float, b: float, tau: float) -> float:
    """ln of e^{-m tau} (e^{a tau} - e^{b tau}) / (a - b) with m = max(a, b)."""
    d = abs(a - b)
    if d == 0.0 or d * tau < 1e-300:
        return math.log(tau)
    return math.log(-math.expm1(-d * tau) / d)


def tri_step(a: float, b: float, c: float, u0: float, u1: float, tau: float):
    """Advance unit ``(u0, u1)`` by ``tau``; returns ``(gain, v0, v1)``.

    ``gain`` is ln of the norm growth and ``(v0, v1)`` the new unit direction.
    """
    if tau == 0.0:
        return 0.0, u0, u1
    # logs relative to e^{m tau}; m tau itself is added last
    m = a if a > b else b
    la = (a - m) * tau + math.log(abs(u0)) if u0 != 0.0 else _NEG_INF
    lb = (b - m) * tau + math.log(abs(u1)) if u1 != 0.0 else _NEG_INF
    if c != 0.0 and u1 != 0.0:
        lc = math.log(abs(c)) + _log_phi(a, b, tau) + math.log(abs(u1))
    else:
        lc = _NEG_INF
    top = max(la, lb, lc)
    v0 = 0.0
    if la != _NEG_INF:
        v0 += math.copysign(math.exp(la - top), u0)
    if lc != _NEG_INF:
        v0 += math.copysign(math.exp(lc - top), c * u1)
    v1 = math.copysign(math.exp(lb - top), u1) if lb != _NEG_INF else 0.0
    n = math.hypot(v0, v1)
    if not (n > 0.0) or not math.isfinite(top):
        raise FloatingPointError(f"non-finite closed-form step (tau={tau!r})")
    return m * tau + (top + math.log(n)), v0 / n, v1 / n


def forward_closed(a, b, c, lengths, U0):
    """Forward pass over all cells for every start direction.

    Returns ``dirs`` of shape ``(n, ncell + 1, 2)`` holding the direction at
    each cell start (and at the end) and ``gains`` of shape ``(n, ncell)``.
    """
    U0 = np.asarray(U0, dtype=float)
    n, ncell = U0.shape[0], len(lengths)
    dirs = np.empty((n, ncell + 1, 2))
    gains = np.empty((n, ncell))
    for r in range(n):
        u0, u1 = U0[r]
        dirs[r, 0] = u0, u1
        for k in range(ncell):
            g, u0, u1 = tri_step(a[k], b[k], c[k], u0, u1, lengths[k])
            gains[r, k] = g
            dirs[r, k + 1] = u0, u1
    return dirs, gains


def window_closed(a, b, c, lengths, dirs, gains, q_traj, q_i, q_o, q_j, q_o2):
    """Window log-gains along stored trajectories.

    A query runs from offset ``q_o`` in cell ``q_i`` to offset ``q_o2`` in cell
    ``q_j`` of trajectory ``q_traj``.  Returns ``(lead, G, L, us, ut)``: the
    gain from the start of cell ``q_i`` to the window start, the gain over the
    window, the window length and the directions at both ends.
    """
    nq = len(q_traj)
    lead = np.empty(nq)
    G = np.empty(nq)
    L = np.empty(nq)
    us = np.empty((nq, 2))
    ut = np.empty((nq, 2))
    for q in range(nq):
        r, i, o, j, o2 = int(q_traj[q]), int(q_i[q]), float(q_o[q]), int(q_j[q]), float(q_o2[q])
        u0, u1 = dirs[r, i]
        g0, s0, s1 = tri_step(a[i], b[i], c[i], u0, u1, o)
        lead[q] = g0
        us[q] = s0, s1
        if i == j:
            g, e0, e1 = tri_step(a[i], b[i], c[i], s0, s1, o2 - o)
            G[q] = g
            L[q] = o2 - o
        else:
            g1, _, _ = tri_step(a[i], b[i], c[i], s0, s1, lengths[i] - o)
            w0, w1 = dirs[r, j]
            g2, e0, e1 = tri_step(a[j], b[j], c[j], w0, w1, o2)
            G[q] = math.fsum([g1, *gains[r, i + 1:j], g2])
            L[q] = math.fsum([lengths[i] - o, *lengths[i + 1:j], o2])
        ut[q] = e0, e1
    return lead, G, L, us, ut


def span_sums(lengths, gains, q_traj, q_i, q_j):
    """Compensated sums of lengths and gains over cells ``[i, j)``."""
    nq = len(q_traj)
    L = np.empty(nq)
    G = np.empty(nq)
    for q in range(nq):
        r, i, j = int(q_traj[q]), int(q_i[q]), int(q_j[q])
        L[q] = math.fsum(lengths[i:j])
        G[q] = math.fsum(gains[r, i:j])
    return L, G


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])

DP45_TABLEAU = (_C, _A, _B, _E)


def dp45_step(rhs, t, x, h, k1):
    """One Dormand-Prince step; returns ``(x_new, err_vec, k7)``."""
    ks = [k1]
    for s in range(1, 7):
        xs = x + h * sum(coef * ks[m] for m, coef in enumerate(_A[s]) if coef != 0.0)
        ks.append(rhs(t + _C[s] * h, xs))
    x_new = x + h * sum(_B[m] * ks[m] for m in range(6) if _B[m] != 0.0)
    err = h * sum(_E[m] * ks[m] for m in range(7) if _E[m] != 0.0)
    return x_new, err, ks[6]


def _error_ratio(x, x_new, err, rtol, atol):
    scale = atol + rtol * max(np.max(np.abs(x)), np.max(np.abs(x_new)))
    if scale == 0.0:
        return 0.0 if not np.any(err) else math.inf
    return float(np.max(np.abs(err))) / scale


def dp45_solve(rhs, t0, x0, t_end, rtol, atol, threshold, max_steps, h0=0.0):
    """Adaptive integration of a smooth ``rhs`` from ``t0`` to exactly ``t_end``.

    Stops early when the Euclidean norm exceeds ``threshold``.  Returns
    ``(ts, xs, status, h)`` where status is 0 (reached ``t_end``), 1 (threshold
    crossed at the last stored point) or 2 (step budget exhausted or step
    underflow) and ``h`` is the step size to try next.
    """
    x = np.array(x0, dtype=float)
    t = float(t0)
    ts = [t]
    xs = [x.copy()]
    h = h0 if h0 > 0 else min(0.01, t_end - t)
    steps = 0
    k1 = rhs(t, x)
    while t < t_end:
        if steps >= max_steps:
            return np.array(ts), np.array(xs), 2, h
        last = h >= t_end - t
        hh = t_end - t if last else h
        x_new, err, k7 = dp45_step(rhs, t, x, hh, k1)
        ratio = _error_ratio(x, x_new, err, rtol, atol)
        steps += 1
        if ratio <= 1.0 and np.all(np.isfinite(x_new)):
            t = t_end if last else t + hh
            x = x_new
            k1 = k7
            ts.append(t)
            xs.append(x.copy())
            fac = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
            # a step shortened to land on ``t_end`` must not shrink h
            h = max(h, hh * fac) if last else hh * fac
            if np.linalg.norm(x) > threshold:
                return np.array(ts), np.array(xs), 1, h
        else:
            fac = 0.2 if not math.isfinite(ratio) else max(0.2, 0.9 * ratio ** -0.25)
            h = hh * fac
            if h < 1e-14 * max(1.0, abs(t)):
                return np.array(ts), np.array(xs), 2, h
    return np.array(ts), np.array(xs), 0, h


def integrate_intervals(boundaries, make_rhs, x0, t_end, rtol, atol, threshold, max_steps):
    """Run :func:`dp45_solve` interval by interval.

    ``make_rhs(k)`` returns the right-hand side valid on
    ``[boundaries[k], boundaries[k+1]]``; steps never straddle a boundary.
    """
    x = np.array(x0, dtype=float)
    ts_all = [0.0]
    xs_all = [x.copy()]
    h = 0.0
    for k in range(len(boundaries) - 1):
        lo, hi = boundaries[k], min(boundaries[k + 1], t_end)
        if hi <= lo:
            break
        ts, xs, status, h = dp45_solve(make_rhs(k), lo, x, hi, rtol, atol, threshold, max_steps, h)
        max_steps -= len(ts) - 1
        ts_all.extend(ts[1:].tolist())
        xs_all.extend(xs[1:])
        x = xs[-1]
        if status != 0 or hi >= t_end:
            return np.array(ts_all), np.array(xs_all), status
    return np.array(ts_all), np.array(xs_all), 0


def dp45_piecewise(boundaries, mats, Q, x0, t_end, rtol, atol, threshold, max_steps):
    """Integrate ``x' = A_k x + q(x)`` with ``A_k`` constant on each interval.

    ``mats[k]`` is the matrix on ``[boundaries[k], boundaries[k+1])`` and
    ``Q[i]`` the quadratic form giving component ``i`` of the perturbation.
    Returns ``(ts, xs, status)`` as :func:`integrate_intervals`.
    """
    boundaries = np.asarray(boundaries, dtype=float)
    mats = np.asarray(mats, dtype=float)
    Q = np.asarray(Q, dtype=float)

    def make_rhs(k):
        A = mats[k]
        return lambda t, x: A @ x + np.einsum("ijk,j,k->i", Q, x, x)

    return integrate_intervals(boundaries, make_rhs, x0, t_end, rtol, atol, threshold, max_steps)


def transport_closed(a, b, c, lengths, q_i, q_o, q_j, q_o2, U):
    """Propagate fresh unit vectors ``U[q]`` from ``(i, o)`` to ``(j, o2)``.

    Unlike :func:`window_closed` the start direction is arbitrary, so this
    yields columns of the two-parameter transition matrix.  Returns the log
    gains and end directions.
    """
    nq = len(q_i)
    G = np.empty(nq)
    V = np.empty((nq, 2))
    for q in range(nq):
        i, o, j, o2 = int(q_i[q]), float(q_o[q]), int(q_j[q]), float(q_o2[q])
        u0, u1 = float(U[q, 0]), float(U[q, 1])
        if i == j:
            g, u0, u1 = tri_step(a[i], b[i], c[i], u0, u1, o2 - o)
            G[q] = g
        else:
            parts = []
            g, u0, u1 = tri_step(a[i], b[i], c[i], u0, u1, lengths[i] - o)
            parts.append(g)
            for k in range(i + 1, j):
                g, u0, u1 = tri_step(a[k], b[k], c[k], u0, u1, lengths[k])
                parts.append(g)
            g, u0, u1 = tri_step(a[j], b[j], c[j], u0, u1, o2)
            parts.append(g)
            G[q] = math.fsum(parts)
        V[q] = u0, u1
    return G, V
