import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohlspec.nonlinear import (
    NonlinearSystem,
    PerturbationError,
    decay_fit,
    lemma63_bound_check,
    log_second_component,
    prop52_nonlinear,
    prop65_bound,
    prop65_lower_bound_check,
    scaled_norms,
    sec6_nonlinear,
    simulate,
    stability_probe,
    x1_squared,
)
from bohlspec.propagation import evolve
from bohlspec.system import constant_system

from conftest import example


def linear_only(sys):
    d = sys.dimension
    return NonlinearSystem(sys, L=0.0, Q=np.zeros((d, d, d)))


def test_perturbation_validation():
    lin = constant_system(-np.eye(2))
    with pytest.raises(PerturbationError):
        NonlinearSystem(lin)
    with pytest.raises(PerturbationError):
        NonlinearSystem(lin, f=lambda t, x: x + 1.0)
    with pytest.raises(PerturbationError):
        NonlinearSystem(lin, f=lambda t, x: 5 * x * np.linalg.norm(x), L=1.0)
    with pytest.raises(PerturbationError):
        NonlinearSystem(lin, Q=x1_squared(), q=1.0)
    NonlinearSystem(lin, Q=x1_squared())


def test_scalar_decay_matches_closed_form():
    tr = simulate(linear_only(constant_system([[-1.0]], 10, 1.0)), [1.0], 10.0)
    assert tr.status == "completed"
    assert tr.xs[-1, 0] == pytest.approx(math.exp(-10.0), rel=1e-8)


def test_callable_and_quadratic_paths_agree():
    lin = example("sec6", segments=6)
    a = simulate(NonlinearSystem(lin, Q=x1_squared()), [0.1, 0.1], 20.0)
    b = simulate(NonlinearSystem(lin, f=lambda t, x: np.array([0.0, x[0] ** 2])), [0.1, 0.1], 20.0)
    assert a.xs[-1] == pytest.approx(b.xs[-1], rel=1e-7)


def test_simulate_matches_linear_propagation():
    lin = example("prop52", "mild51", 15)
    tr = simulate(linear_only(lin), [0.6, 0.8], 100.0)
    ref = evolve(lin, [0.6, 0.8], 100.0).log_mag
    assert abs(math.log(tr.norms[-1]) - ref) <= 1e-6 * abs(ref)


def test_simulate_rejects_paper51_and_bad_input():
    with pytest.raises(ValueError):
        simulate(linear_only(example("prop52")), [1.0, 0.0], 10.0)
    ns = linear_only(constant_system(-np.eye(2)))
    with pytest.raises(ValueError):
        simulate(ns, [1.0, 0.0, 0.0], 10.0)
    with pytest.raises(ValueError):
        simulate(ns, [1.0, 0.0], -1.0)


def test_blowup_time_refined():
    tr = simulate(sec6_nonlinear(), [0.1, 0.1])
    assert tr.status == "blowup"
    assert 5.0 < tr.blowup_time < 100.0
    assert tr.norms[-1] > 1e6 and tr.norms[-2] <= 1e6
    assert tr.ts[-2] <= tr.blowup_time <= tr.ts[-1]
    # the refined crossing reaches the threshold
    before = simulate(sec6_nonlinear(), [0.1, 0.1], tr.blowup_time * (1 - 1e-5))
    after = simulate(sec6_nonlinear(), [0.1, 0.1], tr.blowup_time * (1 + 1e-5))
    assert before.status == "completed" and after.status == "blowup"


def test_trajectory_csv(tmp_path):
    tr = simulate(linear_only(constant_system(-np.eye(2), 5, 1.0)), [1.0, 1.0], 5.0)
    p = tmp_path / "t.csv"
    tr.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "norm", "x1", "x2"]
    assert len(rows) == len(tr.ts) + 1


@settings(max_examples=40, deadline=None)
@given(st.floats(-300, 300), st.floats(-300, 300))
def test_scaled_norms(e1, e2):
    x = np.array([[10.0**e1, -(10.0**e2)]])
    n = scaled_norms(x)[0]
    ref = math.hypot(10.0**e1, 10.0**e2)
    assert n == pytest.approx(ref, rel=1e-14)


def test_decay_fit_recovers_rate():
    t = np.linspace(0, 50, 500)
    log_k, alpha = decay_fit(t, np.log(3.0) - 0.7 * t + 0.1 * np.sin(t))
    assert alpha == pytest.approx(0.7, abs=0.02)
    assert np.all(np.log(3.0) - 0.7 * t + 0.1 * np.sin(t) <= log_k - alpha * t + 1e-12)


def test_probe_stable_linear():
    v = stability_probe(linear_only(constant_system(np.diag([-1.0, -2.0]), 10, 10.0)), [1.0, 0.5, 0.25])
    assert v.kind == "exp_stable_evidence"
    assert v.alpha == pytest.approx(1.0, abs=0.05)
    assert v.K == pytest.approx(1.0, abs=0.05)


def test_probe_unstable_sec6():
    v = stability_probe(sec6_nonlinear(), [0.1, 0.05, 0.025])
    assert v.kind == "unstable_evidence"
    assert v.escape_time is not None and v.witness_initial is not None


def test_probe_prop52():
    v = stability_probe(prop52_nonlinear(), [1e-2, 1e-3, 1e-4], 500.0)
    assert v.kind == "exp_stable_evidence" and v.alpha >= 0.5


def test_probe_indeterminate_for_neutral_system():
    v = stability_probe(linear_only(constant_system(np.zeros((2, 2)), 10, 1.0)), [0.1, 0.05, 0.02])
    assert v.kind == "indeterminate"


def test_probe_argument_checks():
    ns = linear_only(constant_system(-np.eye(2)))
    with pytest.raises(ValueError):
        stability_probe(ns, [0.1, 0.2])
    with pytest.raises(ValueError):
        stability_probe(ns, [0.1], n_directions=4)
    v = stability_probe(ns, [0.1], 20.0)
    assert any("fewer than 3" in n for n in v.notes)


def test_log_second_component_exact():
    s = example("sec6", segments=12)
    # y' = -9 y on [0,1) and [2,4), +2.5 y on [1,2)
    assert log_second_component(s, 4.0) == pytest.approx(-9 + 2.5 - 18, abs=1e-12)


def test_lemma63():
    rep = lemma63_bound_check(example("sec6", segments=12))
    assert rep.passed and len(rep.times) == 100
    assert rep.tightest_ratio <= 1.0 + 1e-12
    odd = lemma63_bound_check(example("sec6", segments=12), 1.0, [2.0 ** (2 * k + 1) for k in range(5)])
    np.testing.assert_allclose(odd.ratios, math.exp(-(9 + 2.5) / 3), rtol=1e-12)


def test_lemma63_requires_dyadic():
    with pytest.raises(ValueError):
        lemma63_bound_check(example("prop52"))


def test_prop65():
    rep = prop65_lower_bound_check(sec6_nonlinear(), 0.1, 0.1, 3)
    assert rep.passed and rep.positive
    assert [e[0] for e in rep.entries] == [1, 2, 3]
    assert prop65_bound(0.05, 0.12, 0.1, 1) == pytest.approx(math.expm1(0.02 * 4) / 0.22 * 0.01)
    with pytest.raises(ValueError):
        prop65_lower_bound_check(sec6_nonlinear(), -0.1, 0.1)
