import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohlspec.propagation import (
    Bundle,
    LogVector,
    SegmentPropagator,
    apply_propagator,
    dump_trajectory,
    evolve,
    log_norm_ratio,
)
from bohlspec.system import constant_system

from conftest import example

A1 = np.array([[-1.0, 1.0], [0.0, -1.0]])
A2 = np.array([[-1.0, 0.0], [0.0, 0.0]])


def _state(v):
    v = np.asarray(v, dtype=float)
    return LogVector(v / np.linalg.norm(v), math.log(np.linalg.norm(v)))


def test_closed_step_along_e1():
    out = apply_propagator(SegmentPropagator.for_matrix(A1), _state([1, 0]), 1.0)
    np.testing.assert_allclose(out.direction, [1, 0], atol=1e-15)
    assert out.log_mag == pytest.approx(-1.0, abs=1e-15)


def test_zero_step_is_identity():
    s = _state([0.6, 0.8])
    assert apply_propagator(SegmentPropagator.for_matrix(A1), s, 0.0) is s


def test_neutral_second_coordinate():
    out = apply_propagator(SegmentPropagator.for_matrix(A2), _state([0, 1]), 2.0)
    np.testing.assert_allclose(out.direction, [0, 1], atol=1e-15)
    assert out.log_mag == pytest.approx(0.0, abs=1e-15)


def test_negative_step_rejected():
    with pytest.raises(ValueError):
        apply_propagator(SegmentPropagator.for_matrix(A1), _state([1, 0]), -1.0)


def test_closed_form_matches_expm_random():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        a, c = rng.uniform(-3, 3, 2)
        b = rng.uniform(-5, 5)
        A = np.array([[a, b], [0.0, c]])
        x = rng.normal(size=2)
        dt = rng.uniform(0.01, 5.0)
        closed = SegmentPropagator.for_matrix(A)
        assert closed.form == "closed"
        ref = apply_propagator(SegmentPropagator("expm", A), _state(x), dt)
        got = apply_propagator(closed, _state(x), dt)
        err = abs(got.log_mag - ref.log_mag) / max(1.0, abs(ref.log_mag))
        worst = max(worst, err, float(np.max(np.abs(got.direction - ref.direction))))
    assert worst <= 1e-10


def test_evolve_at_zero():
    r = evolve(example("prop52"), [3.0, 4.0], 0.0)
    np.testing.assert_allclose(r.direction, [0.6, 0.8])
    assert r.log_mag == 0.0


def test_evolve_scalar():
    s = constant_system([[-1.0]], 10, 1.0)
    assert evolve(s, [1.0], 5.0).log_mag == pytest.approx(-5.0, abs=1e-14)
    assert log_norm_ratio(s, [1.0], 0.0, 10.0) == pytest.approx(-10.0, abs=1e-13)


def test_remark59_closed_form():
    r = evolve(example("remark59"), [0.0, 1.0], 1.0)
    e = math.e
    assert r.log_mag == pytest.approx(math.log(math.hypot(e * e - 1, e)), rel=1e-9)
    np.testing.assert_allclose(r.direction, np.array([e * e - 1, e]) / math.hypot(e * e - 1, e), rtol=1e-9)


@pytest.mark.parametrize("norm", ["euclidean", "max"])
def test_prop52_e1_decay(norm):
    assert log_norm_ratio(example("prop52"), [1.0, 0.0], 0.0, 3.0, norm) == pytest.approx(-3.0, abs=1e-13)


def test_remark26_integral():
    assert log_norm_ratio(example("remark26"), [1.0], 0.0, 4.0) == pytest.approx(-3.0, abs=1e-13)


def test_paper51_horizon_without_overflow():
    s = example("prop52")
    H = s.horizon
    assert H > 1e80
    r = evolve(s, [1.0, 0.0], H)
    assert r.log_mag == pytest.approx(-H, rel=1e-12)
    g = evolve(s, [0.6, 0.8], H)
    assert math.isfinite(g.log_mag) and g.log_mag < 0


def _walk(sys, xi, s, u):
    """Reference cocycle: step the piecewise-constant system segment by segment."""
    state = evolve(sys, xi, s)
    b = sys.sequence.boundaries
    t = s
    while t < u:
        j = sys.sequence.locate(t).segment
        end = min(b[j + 1], u)
        state = apply_propagator(SegmentPropagator.for_matrix(sys.segment_matrix(j)), state, end - t)
        t = end
    return state


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(-1.0, 1.0))
def test_cocycle_identity(f1, f2, angle):
    sys = example("prop52", "mild51", 12)
    H = sys.horizon
    s, u = sorted((f1 * H, f2 * H))
    xi = [math.cos(angle), math.sin(angle)]
    a = evolve(sys, xi, u).log_mag
    b = _walk(sys, xi, s, u).log_mag
    assert abs(a - b) <= 1e-9 * max(u - s, 1.0)


def test_cocycle_3d():
    sys = example("product3d", "mild51", 10)
    xi = [0.3, -0.5, 0.8]
    H = sys.horizon
    assert abs(evolve(sys, xi, H).log_mag - _walk(sys, xi, 0.3 * H, H).log_mag) <= 1e-9 * H


@pytest.mark.parametrize("force", ["expm", "rk"])
def test_forced_plans_agree(force):
    sys = example("sec6", segments=8)
    X = [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]
    ref = Bundle(sys, X)
    alt = Bundle(sys, X, force=force)
    tp = sys.sequence.boundary(8)
    for k in range(3):
        a, b = ref.state(k, tp).log_mag, alt.state(k, tp).log_mag
        assert abs(a - b) <= (1e-9 if force == "expm" else 1e-6) * max(1.0, abs(a))


def test_bundle_rejects_bad_directions():
    with pytest.raises(ValueError):
        Bundle(example("prop52"), [[0.0, 0.0]])
    with pytest.raises(ValueError):
        Bundle(example("prop52"), [[1.0, 0.0, 0.0]])


def test_dump_trajectory(tmp_path):
    p = tmp_path / "traj.csv"
    dump_trajectory(constant_system([[-1.0, 0.0], [0.0, -2.0]], 5, 1.0), [1.0, 1.0], [0.0, 1.0, 2.0], p)
    rows = list(csv.reader(open(p)))
    assert rows[0][:2] == ["clock", "log_mag"]
    assert len(rows) == 4
    assert float(rows[1][1]) == pytest.approx(0.0, abs=1e-15)
    assert float(rows[3][1]) == pytest.approx(math.log(math.hypot(math.exp(-2), math.exp(-4)) / math.sqrt(2)), rel=1e-12)
