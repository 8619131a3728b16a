# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the functions in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, expm1, copysign, sqrt, INFINITY, isfinite

cnp.import_array()

DEF MAXD = 8


cdef inline double _log_phi(double a, double b, double tau) nogil:
    cdef double d = fabs(a - b)
    if d == 0.0 or d * tau < 1e-300:
        return log(tau)
    return log(-expm1(-d * tau) / d)


cdef inline int _tri(double a, double b, double c, double u0, double u1, double tau,
                     double *g, double *v0, double *v1) nogil:
    cdef double la, lb, lc, top, w0, w1, n
    cdef double m = a if a > b else b
    if tau == 0.0:
        g[0] = 0.0
        v0[0] = u0
        v1[0] = u1
        return 0
    la = (a - m) * tau + log(fabs(u0)) if u0 != 0.0 else -INFINITY
    lb = (b - m) * tau + log(fabs(u1)) if u1 != 0.0 else -INFINITY
    if c != 0.0 and u1 != 0.0:
        lc = log(fabs(c)) + _log_phi(a, b, tau) + log(fabs(u1))
    else:
        lc = -INFINITY
    top = la
    if lb > top:
        top = lb
    if lc > top:
        top = lc
    w0 = 0.0
    if la != -INFINITY:
        w0 += copysign(exp(la - top), u0)
    if lc != -INFINITY:
        w0 += copysign(exp(lc - top), c * u1)
    w1 = copysign(exp(lb - top), u1) if lb != -INFINITY else 0.0
    n = sqrt(w0 * w0 + w1 * w1)
    if not (n > 0.0) or not isfinite(top):
        return -1
    g[0] = m * tau + (top + log(n))
    v0[0] = w0 / n
    v1[0] = w1 / n
    return 0


def tri_step(double a, double b, double c, double u0, double u1, double tau):
    cdef double g, v0, v1
    if _tri(a, b, c, u0, u1, tau, &g, &v0, &v1) != 0:
        raise FloatingPointError(f"non-finite closed-form step (tau={tau!r})")
    return g, v0, v1


def forward_closed(a, b, c, lengths, U0):
    cdef double[:] av = np.ascontiguousarray(a, dtype=float)
    cdef double[:] bv = np.ascontiguousarray(b, dtype=float)
    cdef double[:] cv = np.ascontiguousarray(c, dtype=float)
    cdef double[:] lv = np.ascontiguousarray(lengths, dtype=float)
    cdef double[:, :] U = np.ascontiguousarray(U0, dtype=float)
    cdef Py_ssize_t n = U.shape[0], ncell = lv.shape[0], r, k
    dirs_np = np.empty((n, ncell + 1, 2))
    gains_np = np.empty((n, ncell))
    cdef double[:, :, :] dirs = dirs_np
    cdef double[:, :] gains = gains_np
    cdef double u0, u1, g
    cdef int bad = 0
    with nogil:
        for r in range(n):
            u0 = U[r, 0]
            u1 = U[r, 1]
            dirs[r, 0, 0] = u0
            dirs[r, 0, 1] = u1
            for k in range(ncell):
                if _tri(av[k], bv[k], cv[k], u0, u1, lv[k], &g, &u0, &u1) != 0:
                    bad = 1
                    break
                gains[r, k] = g
                dirs[r, k + 1, 0] = u0
                dirs[r, k + 1, 1] = u1
            if bad:
                break
    if bad:
        raise FloatingPointError("non-finite closed-form step in forward pass")
    return dirs_np, gains_np


cdef inline void _neumaier(double x, double *s, double *comp) nogil:
    cdef double t = s[0] + x
    if fabs(s[0]) >= fabs(x):
        comp[0] += (s[0] - t) + x
    else:
        comp[0] += (x - t) + s[0]
    s[0] = t


def window_closed(a, b, c, lengths, dirs, gains, q_traj, q_i, q_o, q_j, q_o2):
    cdef double[:] av = np.ascontiguousarray(a, dtype=float)
    cdef double[:] bv = np.ascontiguousarray(b, dtype=float)
    cdef double[:] cv = np.ascontiguousarray(c, dtype=float)
    cdef double[:] lv = np.ascontiguousarray(lengths, dtype=float)
    cdef double[:, :, :] D = np.ascontiguousarray(dirs, dtype=float)
    cdef double[:, :] Gn = np.ascontiguousarray(gains, dtype=float)
    cdef long[:] qt = np.ascontiguousarray(q_traj, dtype=np.int64)
    cdef long[:] qi = np.ascontiguousarray(q_i, dtype=np.int64)
    cdef double[:] qo = np.ascontiguousarray(q_o, dtype=float)
    cdef long[:] qj = np.ascontiguousarray(q_j, dtype=np.int64)
    cdef double[:] qo2 = np.ascontiguousarray(q_o2, dtype=float)
    cdef Py_ssize_t nq = qt.shape[0], q, k
    lead_np = np.empty(nq)
    G_np = np.empty(nq)
    L_np = np.empty(nq)
    us_np = np.empty((nq, 2))
    ut_np = np.empty((nq, 2))
    cdef double[:] lead = lead_np
    cdef double[:] Gv = G_np
    cdef double[:] Lv = L_np
    cdef double[:, :] us = us_np
    cdef double[:, :] ut = ut_np
    cdef long r, i, j
    cdef double o, o2, g0, s0, s1, g1, g2, e0, e1, d0, d1, sg, cg, sl, cl
    cdef int bad = 0
    with nogil:
        for q in range(nq):
            r = qt[q]
            i = qi[q]
            j = qj[q]
            o = qo[q]
            o2 = qo2[q]
            bad |= _tri(av[i], bv[i], cv[i], D[r, i, 0], D[r, i, 1], o, &g0, &s0, &s1)
            lead[q] = g0
            us[q, 0] = s0
            us[q, 1] = s1
            if i == j:
                bad |= _tri(av[i], bv[i], cv[i], s0, s1, o2 - o, &g1, &e0, &e1)
                Gv[q] = g1
                Lv[q] = o2 - o
            else:
                bad |= _tri(av[i], bv[i], cv[i], s0, s1, lv[i] - o, &g1, &d0, &d1)
                bad |= _tri(av[j], bv[j], cv[j], D[r, j, 0], D[r, j, 1], o2, &g2, &e0, &e1)
                sg = 0.0
                cg = 0.0
                sl = 0.0
                cl = 0.0
                _neumaier(g1, &sg, &cg)
                _neumaier(lv[i] - o, &sl, &cl)
                for k in range(i + 1, j):
                    _neumaier(Gn[r, k], &sg, &cg)
                    _neumaier(lv[k], &sl, &cl)
                _neumaier(g2, &sg, &cg)
                _neumaier(o2, &sl, &cl)
                Gv[q] = sg + cg
                Lv[q] = sl + cl
            ut[q, 0] = e0
            ut[q, 1] = e1
    if bad:
        raise FloatingPointError("non-finite closed-form step in window evaluation")
    return lead_np, G_np, L_np, us_np, ut_np


def span_sums(lengths, gains, q_traj, q_i, q_j):
    cdef double[:] lv = np.ascontiguousarray(lengths, dtype=float)
    cdef double[:, :] Gn = np.ascontiguousarray(gains, dtype=float)
    cdef long[:] qt = np.ascontiguousarray(q_traj, dtype=np.int64)
    cdef long[:] qi = np.ascontiguousarray(q_i, dtype=np.int64)
    cdef long[:] qj = np.ascontiguousarray(q_j, dtype=np.int64)
    cdef Py_ssize_t nq = qt.shape[0], q, k
    L_np = np.empty(nq)
    G_np = np.empty(nq)
    cdef double[:] Lv = L_np
    cdef double[:] Gv = G_np
    cdef double sl, cl, sg, cg
    with nogil:
        for q in range(nq):
            sl = 0.0
            cl = 0.0
            sg = 0.0
            cg = 0.0
            for k in range(qi[q], qj[q]):
                _neumaier(lv[k], &sl, &cl)
                _neumaier(Gn[qt[q], k], &sg, &cg)
            Lv[q] = sl + cl
            Gv[q] = sg + cg
    return L_np, G_np


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) for x' = A_k x + (x^T Q_i x)_i

cdef double[7] C_ = [0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0]
cdef double[7][6] A_ = [
    [0, 0, 0, 0, 0, 0],
    [1.0 / 5, 0, 0, 0, 0, 0],
    [3.0 / 40, 9.0 / 40, 0, 0, 0, 0],
    [44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0],
    [19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0],
    [9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0],
    [35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84],
]
cdef double[7] B_ = [35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0]
cdef double[7] E_ = [
    35.0 / 384 - 5179.0 / 57600,
    0,
    500.0 / 1113 - 7571.0 / 16695,
    125.0 / 192 - 393.0 / 640,
    -2187.0 / 6784 + 92097.0 / 339200,
    11.0 / 84 - 187.0 / 2100,
    -1.0 / 40,
]


cdef inline void _rhs(int d, double[:, :] A, double[:, :, :] Q, double *x, double *out) nogil:
    cdef int i, j, k
    cdef double s, qs
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += A[i, j] * x[j]
        qs = 0.0
        for j in range(d):
            for k in range(d):
                qs += Q[i, j, k] * x[j] * x[k]
        out[i] = s + qs


def dp45_piecewise(boundaries, mats, Q, x0, double t_end, double rtol, double atol,
                   double threshold, long max_steps):
    cdef double[:] bnd = np.ascontiguousarray(boundaries, dtype=float)
    cdef double[:, :, :] M = np.ascontiguousarray(mats, dtype=float)
    cdef double[:, :, :] Qv = np.ascontiguousarray(Q, dtype=float)
    cdef int d = M.shape[1]
    if d > MAXD:
        raise ValueError(f"dimension {d} exceeds {MAXD}")
    cdef double x[MAXD]
    cdef double xs_[MAXD]
    cdef double xn[MAXD]
    cdef double err[MAXD]
    cdef double K[7][MAXD]
    cdef int i, s, m, status = 0, last
    cdef long steps = 0, nint = M.shape[0], kk
    cdef double t, lo, hi, h = 0.0, hh, ratio, scale, xmax, nmax, emax, fac, ssq
    x0a = np.ascontiguousarray(x0, dtype=float)
    for i in range(d):
        x[i] = x0a[i]
    cap = 1024
    ts_np = np.empty(cap)
    xs_np = np.empty((cap, d))
    cdef double[:] tsv = ts_np
    cdef double[:, :] xsv = xs_np
    cdef long count = 1
    tsv[0] = 0.0
    for i in range(d):
        xsv[0, i] = x[i]
    for kk in range(nint):
        lo = bnd[kk]
        hi = bnd[kk + 1] if bnd[kk + 1] < t_end else t_end
        if hi <= lo:
            break
        t = lo
        if h <= 0.0:
            h = 0.01 if 0.01 < hi - lo else hi - lo
        _rhs(d, M[kk], Qv, x, K[0])
        while t < hi:
            if steps >= max_steps:
                status = 2
                break
            last = h >= hi - t
            hh = hi - t if last else h
            for s in range(1, 7):
                for i in range(d):
                    xs_[i] = x[i]
                    for m in range(s):
                        xs_[i] += hh * A_[s][m] * K[m][i]
                _rhs(d, M[kk], Qv, xs_, K[s])
            xmax = 0.0
            nmax = 0.0
            emax = 0.0
            for i in range(d):
                xn[i] = x[i]
                err[i] = 0.0
                for m in range(7):
                    xn[i] += hh * B_[m] * K[m][i]
                    err[i] += hh * E_[m] * K[m][i]
                if fabs(x[i]) > xmax:
                    xmax = fabs(x[i])
                if fabs(xn[i]) > nmax:
                    nmax = fabs(xn[i])
                if fabs(err[i]) > emax:
                    emax = fabs(err[i])
            scale = atol + rtol * (xmax if xmax > nmax else nmax)
            if scale == 0.0:
                ratio = 0.0 if emax == 0.0 else INFINITY
            else:
                ratio = emax / scale
            steps += 1
            if ratio <= 1.0 and isfinite(nmax):
                t = hi if last else t + hh
                for i in range(d):
                    x[i] = xn[i]
                    K[0][i] = K[6][i]
                if count >= cap:
                    cap *= 2
                    ts_np = np.resize(ts_np, cap)
                    xs_np = np.resize(xs_np, (cap, d))
                    tsv = ts_np
                    xsv = xs_np
                tsv[count] = t
                for i in range(d):
                    xsv[count, i] = x[i]
                count += 1
                if ratio == 0.0:
                    fac = 5.0
                else:
                    fac = 0.9 * ratio ** -0.2
                    fac = 5.0 if fac > 5.0 else (0.2 if fac < 0.2 else fac)
                if last:
                    if hh * fac > h:
                        h = hh * fac
                else:
                    h = hh * fac
                ssq = 0.0
                for i in range(d):
                    ssq += x[i] * x[i]
                if sqrt(ssq) > threshold:
                    status = 1
                    break
            else:
                if isfinite(ratio):
                    fac = 0.9 * ratio ** -0.25
                    if fac < 0.2:
                        fac = 0.2
                else:
                    fac = 0.2
                h = hh * fac
                if h < 1e-14 * (1.0 if fabs(t) < 1.0 else fabs(t)):
                    status = 2
                    break
        if status != 0 or hi >= t_end:
            break
    return ts_np[:count].copy(), xs_np[:count].copy(), status


def transport_closed(a, b, c, lengths, q_i, q_o, q_j, q_o2, U):
    cdef double[:] av = np.ascontiguousarray(a, dtype=float)
    cdef double[:] bv = np.ascontiguousarray(b, dtype=float)
    cdef double[:] cv = np.ascontiguousarray(c, dtype=float)
    cdef double[:] lv = np.ascontiguousarray(lengths, dtype=float)
    cdef long[:] qi = np.ascontiguousarray(q_i, dtype=np.int64)
    cdef double[:] qo = np.ascontiguousarray(q_o, dtype=float)
    cdef long[:] qj = np.ascontiguousarray(q_j, dtype=np.int64)
    cdef double[:] qo2 = np.ascontiguousarray(q_o2, dtype=float)
    cdef double[:, :] Uv = np.ascontiguousarray(U, dtype=float)
    cdef Py_ssize_t nq = qi.shape[0], q
    G_np = np.empty(nq)
    V_np = np.empty((nq, 2))
    cdef double[:] Gv = G_np
    cdef double[:, :] Vv = V_np
    cdef long i, j, k
    cdef double u0, u1, g, sg, cg
    cdef int bad = 0
    with nogil:
        for q in range(nq):
            i = qi[q]
            j = qj[q]
            u0 = Uv[q, 0]
            u1 = Uv[q, 1]
            if i == j:
                bad |= _tri(av[i], bv[i], cv[i], u0, u1, qo2[q] - qo[q], &g, &u0, &u1)
                Gv[q] = g
            else:
                sg = 0.0
                cg = 0.0
                bad |= _tri(av[i], bv[i], cv[i], u0, u1, lv[i] - qo[q], &g, &u0, &u1)
                _neumaier(g, &sg, &cg)
                for k in range(i + 1, j):
                    bad |= _tri(av[k], bv[k], cv[k], u0, u1, lv[k], &g, &u0, &u1)
                    _neumaier(g, &sg, &cg)
                bad |= _tri(av[j], bv[j], cv[j], u0, u1, qo2[q], &g, &u0, &u1)
                _neumaier(g, &sg, &cg)
                Gv[q] = sg + cg
            Vv[q, 0] = u0
            Vv[q, 1] = u1
    if bad:
        raise FloatingPointError("non-finite closed-form step in transport")
    return G_np, V_np
