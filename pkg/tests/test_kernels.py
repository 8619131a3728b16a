"""The compiled kernels against the pure-Python reference."""

import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohlspec import _kernels, _pykernels

ck = pytest.importorskip("bohlspec._ckernels")

finite = st.floats(-20, 20)


def test_backend_selected():
    forced = os.environ.get("BOHLSPEC_PURE_PYTHON", "") not in ("", "0")
    assert _kernels.BACKEND == ("python" if forced else "cython")


@settings(max_examples=300, deadline=None)
@given(finite, finite, st.floats(-50, 50), st.floats(-math.pi, math.pi), st.floats(0, 200))
def test_tri_step(a, b, c, th, tau):
    u0, u1 = math.cos(th), math.sin(th)
    g1, v0, v1 = _pykernels.tri_step(a, b, c, u0, u1, tau)
    g2, w0, w1 = ck.tri_step(a, b, c, u0, u1, tau)
    assert g2 == pytest.approx(g1, rel=1e-12, abs=1e-12)
    assert (w0, w1) == pytest.approx((v0, v1), abs=1e-12)


def test_tri_step_equal_rates_and_huge_times():
    for a, b, c, tau in [(-1.0, -1.0, 1.0, 1e80), (0.0, 0.0, 5.0, 1e6), (-1.0, 0.0, 1.0, 1e300)]:
        p = _pykernels.tri_step(a, b, c, 0.6, 0.8, tau)
        q = ck.tri_step(a, b, c, 0.6, 0.8, tau)
        assert all(math.isfinite(v) for v in q)
        assert q == pytest.approx(p, rel=1e-12)


def _cells(rng, n):
    a = rng.uniform(-2, 1, n)
    b = rng.uniform(-2, 1, n)
    c = rng.uniform(-3, 3, n)
    lengths = rng.uniform(0.1, 20, n)
    return a, b, c, lengths


def test_forward_window_transport():
    rng = np.random.default_rng(11)
    a, b, c, lengths = _cells(rng, 40)
    U0 = rng.normal(size=(5, 2))
    U0 /= np.linalg.norm(U0, axis=1, keepdims=True)
    dp, gp = _pykernels.forward_closed(a, b, c, lengths, U0)
    dc, gc = ck.forward_closed(a, b, c, lengths, U0)
    np.testing.assert_allclose(dc, dp, atol=1e-13)
    np.testing.assert_allclose(gc, gp, rtol=1e-12, atol=1e-12)

    nq = 300
    traj = rng.integers(0, 5, nq)
    i = rng.integers(0, 40, nq)
    j = np.minimum(i + rng.integers(0, 10, nq), 39)
    o = rng.uniform(0, 1, nq) * lengths[i]
    o2 = np.where(j == i, o + rng.uniform(0, 1, nq) * (lengths[i] - o), rng.uniform(0, 1, nq) * lengths[j])
    args = (a, b, c, lengths, dp, gp, traj, i, o, j, o2)
    for x, y in zip(ck.window_closed(*args), _pykernels.window_closed(*args)):
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-11)

    U = rng.normal(size=(nq, 2))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    targs = (a, b, c, lengths, i, o, j, o2, U)
    for x, y in zip(ck.transport_closed(*targs), _pykernels.transport_closed(*targs)):
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-11)

    L1, G1 = ck.span_sums(lengths, gp, traj, i, j)
    L2, G2 = _pykernels.span_sums(lengths, gp, traj, i, j)
    np.testing.assert_allclose(L1, L2, rtol=1e-15)
    np.testing.assert_allclose(G1, G2, rtol=1e-13, atol=1e-13)


def test_span_sums_compensated():
    lengths = np.array([1e16, 1.0, -1e16, 1.0])
    gains = lengths[None, :]
    L, G = ck.span_sums(lengths, gains, [0], [0], [4])
    assert L[0] == 2.0 and G[0] == 2.0


@pytest.mark.parametrize("x0", [[0.1, 0.1], [1e-3, -2e-3]])
def test_dp45_piecewise(x0):
    bnd = np.array([0.0, 1.0, 2.0, 4.0, 8.0])
    mats = np.array([[[-1.0, 1.0], [0.0, -9.0]], [[-1.0, 1.0], [0.0, 2.5]]] * 2)
    Q = np.zeros((2, 2, 2))
    Q[1, 0, 0] = 1.0
    tp, xp, sp = _pykernels.dp45_piecewise(bnd, mats, Q, np.array(x0), 8.0, 1e-10, 1e-300, 1e6, 10**6)
    tc, xc, sc = ck.dp45_piecewise(bnd, mats, Q, np.array(x0), 8.0, 1e-10, 1e-300, 1e6, 10**6)
    # rounding differs in the error norm, so step grids drift apart slightly
    assert sp == sc and abs(len(tc) - len(tp)) <= 2
    assert tc[-1] == tp[-1] == 8.0
    np.testing.assert_allclose(xc[-1], xp[-1], rtol=1e-8)


def test_dp45_threshold_is_euclidean():
    bnd = np.array([0.0, 10.0])
    mats = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    Q = np.zeros((2, 2, 2))
    x0 = np.array([1.0, 1.0]) / math.sqrt(2)
    for impl in (_pykernels, ck):
        ts, xs, status = impl.dp45_piecewise(bnd, mats, Q, x0, 10.0, 1e-10, 1e-300, 100.0, 10**6)
        assert status == 1
        assert np.linalg.norm(xs[-1]) > 100.0 >= np.linalg.norm(xs[-2])


def test_pure_python_fallback_selected_at_import():
    import json
    import subprocess
    import sys

    code = (
        "import json; from bohlspec import _kernels; from bohlspec.spectrum import bohl_spectrum;"
        "from bohlspec.system import build_example, ExampleSpec;"
        "e, _ = bohl_spectrum(build_example(ExampleSpec('eps_perturbed')));"
        "print(json.dumps([_kernels.BACKEND, [iv.as_list() for iv in e.intervals]]))"
    )
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, BOHLSPEC_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[flag] = json.loads(res.stdout)
    assert out["1"][0] == "python" and out["0"][0] == "cython"
    np.testing.assert_allclose(out["1"][1], out["0"][1], atol=1e-9)
