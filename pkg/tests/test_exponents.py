import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohlspec.exponents import (
    HorizonError,
    WindowGrid,
    bohl_interval,
    bohl_intervals,
    combination_spectrum,
    default_grid,
    estimate,
    integral_separation_check,
    lyapunov_exponents,
    separation_fit,
    window_rate,
)
from bohlspec.system import constant_system, nonpos_pm1_gaps

from conftest import example

BOUNDED = ("prop52", "eps_perturbed", "diag_pm1", "sec6", "product3d")


def test_window_rate_constant():
    s = constant_system([[0.7]], 10, 3.0)
    assert window_rate(s, [1.0], 2.0, 17.5) == pytest.approx(0.7, abs=1e-14)
    with pytest.raises(ValueError):
        window_rate(s, [1.0], 4.0, 4.0)


def test_window_rate_remark26():
    assert window_rate(example("remark26"), [1.0], 0.0, 200.0) == pytest.approx(-25.25, abs=1e-12)


def test_window_rate_remark59():
    assert window_rate(example("remark59"), [0.0, 1.0], 10.0, 30.0) == pytest.approx(2.0, abs=0.05)


def test_bohl_interval_diag_pm1():
    s = example("diag_pm1")
    e2 = bohl_interval(s, [0.0, 1.0])
    assert e2.lower == pytest.approx(-1.0, abs=0.05) and e2.upper == pytest.approx(1.0, abs=0.05)
    e1 = bohl_interval(s, [1.0, 0.0])
    assert abs(e1.lower) < 1e-12 and abs(e1.upper) < 1e-12


@pytest.mark.parametrize("xi", [[0.6, 0.8], [1.0, 1.0], [-0.3, 2.0]])
def test_bohl_interval_prop52_generic(xi):
    e = bohl_interval(example("prop52"), xi)
    assert e.converged
    assert e.lower == pytest.approx(-1.0, abs=0.05) and e.upper == pytest.approx(-1.0, abs=0.05)


def test_eps_perturbed_second_direction():
    e = bohl_interval(example("eps_perturbed"), [0.0, 1.0])
    assert e.lower == pytest.approx(-0.8, abs=0.05) and e.upper == pytest.approx(0.2, abs=0.05)


def test_stats_ladder(tmp_path):
    e = bohl_interval(example("diag_pm1"), [0.0, 1.0])
    st_ = e.stats
    assert all(lo <= hi for _, lo, hi in st_.rows())
    p = tmp_path / "ladder.csv"
    st_.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["length", "min_rate", "max_rate"] and len(rows) == len(st_.lengths) + 1


def test_grid_validation():
    with pytest.raises(HorizonError):
        WindowGrid((1.0, 2.0))
    with pytest.raises(ValueError):
        WindowGrid((1.0, 3.0, 2.0))
    g = default_grid(example("prop52"))
    assert g.lengths[-1] <= example("prop52").horizon


def test_estimate_extrapolates_inverse_length():
    L = np.array([10.0, 20.0, 40.0, 80.0])
    e = estimate(L, -1.0 - 2.0 / L, -1.0 + 3.0 / L)
    assert e.lower == pytest.approx(-1.0, abs=1e-9)
    assert e.upper == pytest.approx(-1.0, abs=1e-9)
    assert e.converged


def test_estimate_flags_drift():
    L = np.array([10.0, 20.0, 40.0, 80.0])
    e = estimate(L, np.array([-1.0, -0.5, 0.3, 0.9]), np.array([2.0, 2.5, 3.2, 4.0]))
    assert not e.converged


def test_lyapunov_scalar():
    lo, hi = lyapunov_exponents(constant_system([[-1.0]], 20, 10.0), [1.0])
    assert lo == pytest.approx(-1.0, abs=1e-9) and hi == pytest.approx(-1.0, abs=1e-9)


def test_lyapunov_prop52():
    lo, hi = lyapunov_exponents(example("prop52"), [0.6, 0.8])
    assert lo == pytest.approx(-1.0, abs=0.05) and hi == pytest.approx(-1.0, abs=0.05)


def test_lyapunov_remark26_trend():
    s = example("remark26")
    vals = [lyapunov_exponents(s, [1.0], T)[1] for T in (100, 200, 400)]
    assert all(v < -T / 9 for v, T in zip(vals, (100, 200, 400)))
    assert vals[0] > vals[1] > vals[2]


def test_integral_separation_remark59():
    cert = integral_separation_check(example("remark59"), [0.0, 1.0], [1.0, 0.0])
    assert cert is not None and 1.8 <= cert.alpha <= 2.2


def test_integral_separation_absent():
    assert integral_separation_check(constant_system(np.diag([-1.0, -1.0])), [0, 1], [1, 0]) is None
    with pytest.raises(ValueError):
        integral_separation_check(example("prop52"), [1, 0], [2, 0])


def test_integral_separation_eps():
    cert = integral_separation_check(example("eps_perturbed"), [0.0, 1.0], [1.0, 0.0])
    assert cert is not None and cert.alpha == pytest.approx(0.2, abs=0.05)


def test_separation_fit_is_a_lower_support():
    rng = np.random.default_rng(3)
    L = rng.uniform(1, 50, 200)
    D = 0.5 + 2.0 * L + rng.uniform(0, 0.1, 200)
    log_k, alpha = separation_fit(L, D)
    assert np.all(D >= log_k + alpha * L - 1e-9)
    assert alpha == pytest.approx(2.0, abs=0.1)


def test_combination_rejects_zero():
    with pytest.raises(ValueError):
        combination_spectrum(example("remark59"), [0, 1], [1, 0], (0.0, 1.0))
    with pytest.raises(ValueError):
        combination_spectrum(example("remark59"), [0, 1], [0, 1], (1.0, -1.0))


def test_eq4_window_bound_prop52():
    """Max-norm windows past T_4 stay in [-1, -1 + eps] for eps = 1/2."""
    s = example("prop52", segments=10)
    eps = 0.5
    assert all(math.exp(2 * k + 1) / math.exp(4 * k * k) <= eps for k in range(1, 5))
    b = s.sequence.boundaries
    rng = np.random.default_rng(1)
    xi = [0.6, 0.8]
    for _ in range(200):
        j1, j2 = sorted(rng.integers(4, 10, 2))
        s0 = b[j1] + rng.uniform(0, 1) * (b[j1 + 1] - b[j1])
        t0 = b[j2] + rng.uniform(0, 1) * (b[j2 + 1] - b[j2])
        if t0 <= s0 * (1 + 1e-12):
            continue
        r = window_rate(s, xi, s0, t0, "max")
        assert -1 - 1e-6 <= r <= -1 + eps


# invariant properties -------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e6, 1e6).filter(lambda c: abs(c) > 1e-6), st.floats(-math.pi, math.pi))
def test_scale_invariance(c, angle):
    s = example("eps_perturbed")
    xi = np.array([math.cos(angle), math.sin(angle)])
    assert bohl_interval(s, c * xi) == bohl_interval(s, xi)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(BOUNDED), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_gronwall_bound(name, f1, f2, seed):
    s = example(name, "mild51" if name in ("prop52", "eps_perturbed", "product3d") else None, 12)
    lo, hi = sorted((f1, f2))
    if hi - lo < 1e-6:
        return
    xi = np.random.default_rng(seed).normal(size=s.dimension)
    H = s.horizon
    r = window_rate(s, xi, lo * H, hi * H)
    assert abs(r) <= s.bound * (1 + 1e-12)


@pytest.mark.parametrize("name", BOUNDED)
def test_bohl_within_bound(name):
    s = example(name)
    for e in bohl_intervals(s, np.eye(s.dimension)):
        assert -s.bound - e.margin <= e.lower <= e.upper <= s.bound + e.margin


# the Lyapunov surrogate carries its own extrapolation error (about 5e-4 on
# the dyadic system), which the Bohl margin knows nothing about
LYAPUNOV_TOL = 0.01


@pytest.mark.parametrize("name", ["prop52", "eps_perturbed", "diag_pm1", "sec6", "remark59"])
def test_lyapunov_nested_in_bohl(name):
    s = example(name)
    for xi in ([1.0, 0.0], [0.0, 1.0], [0.6, 0.8]):
        e = bohl_interval(s, xi)
        lo, hi = lyapunov_exponents(s, xi)
        tol = e.margin + LYAPUNOV_TOL
        assert e.lower - tol <= lo <= hi <= e.upper + tol


@pytest.mark.parametrize("name", ["prop52", "diag_pm1", "sec6", "remark59"])
def test_anchor_doubling(name):
    s = example(name)
    g = default_grid(s)
    for xi in ([1.0, 0.0], [0.6, 0.8]):
        a, b = bohl_interval(s, xi, g), bohl_interval(s, xi, g.doubled())
        m = max(a.margin, b.margin) + 1e-12
        assert abs(a.lower - b.lower) <= m and abs(a.upper - b.upper) <= m


@pytest.mark.parametrize("coeffs", [(1, 1), (1, -1), (-3, 0.5), (1e-3, 100)])
def test_dominant_solution_wins(coeffs):
    e = combination_spectrum(example("remark59"), [0.0, 1.0], [1.0, 0.0], coeffs)
    assert e.lower == pytest.approx(2.0, abs=0.05) and e.upper == pytest.approx(2.0, abs=0.05)


@pytest.mark.parametrize("norm", ["max", "euclidean"])
def test_arrangement_outcomes(norm):
    up = example("diag_pm1")
    y = bohl_interval(up, [0.0, 1.0], norm=norm)
    both = combination_spectrum(up, [1.0, 0.0], [0.0, 1.0], (1, 1), norm=norm)
    assert both.lower == pytest.approx(y.lower, abs=0.05) and both.upper == pytest.approx(y.upper, abs=0.05)
    down = example("diag_pm1", gaps=nonpos_pm1_gaps(24))
    both = combination_spectrum(down, [1.0, 0.0], [0.0, 1.0], (1, 1), norm=norm)
    assert abs(both.lower) <= 0.05 and abs(both.upper) <= 0.05
