import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohlspec.exponents import bohl_interval
from bohlspec.spectrum import (
    Interval,
    KinematicError,
    KinematicSpec,
    PreconditionError,
    SpectrumEstimate,
    bohl_spectrum,
    coincidence_check,
    constant_similarity,
    dichotomy_test,
    interval_witness,
    kinematic_transform,
    merge_intervals,
    rotation_family,
    sacker_sell,
    sacker_sell_diagonal,
    sacker_sell_general,
    subset_check,
    sweep_directions,
)
from bohlspec.system import constant_system, scale_shift

from conftest import example

SADDLE = constant_system(np.diag([-1.0, 1.0]))


def spans(iv_list):
    return [(iv.lo, iv.hi) for iv in iv_list]


def close(ivs, expected, tol):
    return len(ivs) == len(expected) and all(
        abs(a - c) <= tol and abs(b - d) <= tol for (a, b), (c, d) in zip(spans(ivs), expected)
    )


# helpers --------------------------------------------------------------------


def test_merge_intervals():
    out = merge_intervals([(0.0, 1.0, 0.0), (1.01, 2.0, 0.0), (5.0, 5.0, 0.1)], 0.02)
    assert spans(out) == [(0.0, 2.0), (5.0, 5.0)]
    assert out[1].lo_margin == 0.1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 2)), min_size=1, max_size=12), st.floats(0, 0.5))
def test_merge_is_ordered_and_disjoint(raw, tol):
    items = [(a, a + w, 0.0) for a, w in raw]
    out = merge_intervals(items, tol)
    for x, y in zip(out, out[1:]):
        assert x.hi + tol < y.lo
    for a, b, _ in items:
        assert any(iv.lo <= a and b <= iv.hi for iv in out)


def test_sweep_directions():
    X = sweep_directions(2, 16)
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0)
    np.testing.assert_allclose(X[:2], np.eye(2))
    Y = sweep_directions(3, 24, seed=4, special=[[1.0, 1.0, 0.0]])
    assert Y.shape[0] >= 24
    assert any(np.allclose(y, np.array([1, 1, 0]) / np.sqrt(2)) for y in Y)
    np.testing.assert_array_equal(Y, sweep_directions(3, 24, seed=4, special=[[1.0, 1.0, 0.0]]))


def test_interval_helpers():
    a = Interval(-1.0, 0.0, 0.01, 0.01)
    assert a.width == 1.0
    assert a.covers(Interval(-1.04, -0.5), 0.05)
    assert not a.covers(Interval(-1.2, -0.5), 0.05)
    est = SpectrumEstimate((a,), "ss_diagonal")
    aff = est.affine(0.5, 0.25)
    assert spans(aff.intervals) == [(-0.25, 0.25)]
    json.dumps(est.to_dict())


def test_estimate_rejects_bad_method():
    with pytest.raises(ValueError):
        SpectrumEstimate((), "guess")


# Bohl spectrum --------------------------------------------------------------


def test_bohl_prop52():
    est, filt = bohl_spectrum(example("prop52"))
    assert close(est.intervals, [(-1.0, -1.0)], 0.05)
    assert filt.dims == (2,)


def test_bohl_remark59():
    est, filt = bohl_spectrum(example("remark59"))
    assert close(est.intervals, [(0.0, 0.0), (2.0, 2.0)], 0.05)
    assert filt.dims == (1, 2)
    np.testing.assert_allclose(np.abs(filt.subspaces[0][:, 0]), [1.0, 0.0], atol=1e-6)


def test_bohl_saddle():
    est, filt = bohl_spectrum(SADDLE)
    assert close(est.intervals, [(-1.0, -1.0), (1.0, 1.0)], 1e-9)
    np.testing.assert_allclose(np.abs(filt.subspaces[0][:, 0]), [1.0, 0.0], atol=1e-9)
    json.dumps(filt.to_dict())


def test_bohl_product3d():
    est, filt = bohl_spectrum(example("product3d"))
    assert close(est.intervals, [(-1.0, -1.0), (-0.5, 0.5)], 0.05)
    assert filt.dims == (2, 3)


def test_bohl_sweep_minimum():
    with pytest.raises(ValueError):
        bohl_spectrum(example("prop52"), n_directions=8)


@pytest.mark.parametrize("eps", [0.1, 0.2, 0.5])
def test_bohl_eps_perturbed(eps):
    est, _ = bohl_spectrum(example("eps_perturbed", eps=eps))
    assert close(est.intervals, [(-1.0, -1.0), (-1.0 + eps, eps)], 0.05)


def test_filtration_layers_realise_their_intervals():
    s = example("eps_perturbed")
    est, filt = bohl_spectrum(s)
    x = filt.subspaces[0][:, 0]
    e = bohl_interval(s, x)
    assert e.upper <= est.intervals[0].hi + 0.05


# Sacker-Sell ----------------------------------------------------------------


def test_ss_diagonal_prop52():
    assert close(sacker_sell_diagonal(example("prop52")).intervals, [(-1.0, 0.0)], 0.03)


def test_ss_diagonal_eps():
    assert close(sacker_sell_diagonal(example("eps_perturbed")).intervals, [(-1.0, -1.0), (-0.8, 0.2)], 0.03)


def test_ss_diagonal_scalar():
    est = sacker_sell_diagonal(constant_system([[0.3]]))
    assert close(est.intervals, [(0.3, 0.3)], 1e-12)


@pytest.mark.parametrize("name,tag", [("remark59", "bounded"), ("remark26", "bounded")])
def test_ss_diagonal_preconditions(name, tag):
    with pytest.raises(PreconditionError, match=tag):
        sacker_sell_diagonal(example(name))
    with pytest.raises(PreconditionError, match="upper_triangular"):
        sacker_sell_diagonal(constant_system([[0.0, 1.0], [1.0, 0.0]]))


def test_dichotomy_saddle():
    v = dichotomy_test(SADDLE, 0.0)
    assert v.admits and v.rank == 1
    assert v.alpha == pytest.approx(1.0, abs=0.02)
    np.testing.assert_allclose(np.abs(v.basis[:, 0]), [1.0, 0.0], atol=1e-9)


def test_dichotomy_prop52():
    p = example("prop52")
    v = dichotomy_test(p, -0.5)
    assert not v.admits and v.witness
    v = dichotomy_test(p, 0.5)
    assert v.admits and v.rank == 2
    v = dichotomy_test(p, -1.5)
    assert v.admits and v.rank == 0


def test_dichotomy_dimension_limit():
    with pytest.raises(ValueError):
        dichotomy_test(constant_system(-np.eye(5)), 0.0)


def test_ss_general_saddle():
    est = sacker_sell_general(SADDLE)
    assert close(est.intervals, [(-1.0, -1.0), (1.0, 1.0)], 0.01)
    assert not (est.minus_inf_flag or est.plus_inf_flag)


def test_ss_general_prop52_long_gaps():
    s = example("prop52", "custom", 16, (400.0,) * 16)
    assert close(sacker_sell_general(s).intervals, [(-1.0, 0.0)], 0.05)


def test_ss_general_remark26_flags():
    est = sacker_sell_general(example("remark26"))
    assert est.minus_inf_flag and est.plus_inf_flag


def test_ss_dispatch():
    assert sacker_sell(example("prop52")).method == "ss_diagonal"
    assert sacker_sell(example("remark59")).method == "ss_dichotomy"


# comparison theorems -----------------------------------------------------------


@pytest.mark.parametrize(
    "name,params",
    [("prop52", {}), ("diag_pm1", {}), ("sec6", {}), ("product3d", {}), ("remark59", {}), ("eps_perturbed", {"eps": 0.5})],
)
def test_subset(name, params):
    s = example(name, **params)
    b, f = bohl_spectrum(s)
    assert subset_check(b, sacker_sell(s), 0.05, f).passed


def test_subset_detects_violation():
    b = SpectrumEstimate((Interval(1.0, 1.0),), "bohl_sweep")
    ss = SpectrumEstimate((Interval(-1.0, 0.0),), "ss_diagonal")
    rep = subset_check(b, ss)
    assert not rep.passed
    json.dumps(rep.to_dict())


@pytest.mark.parametrize("system", [example("diag_pm1"), SADDLE, constant_system([[-1.0, 1.0], [0.0, 1.0]])])
def test_coincidence(system):
    b, _ = bohl_spectrum(system)
    assert coincidence_check(b, sacker_sell(system), 0.05).passed


def test_point_spectrum_coincidence():
    s = constant_system(np.diag([-2.0, 0.5]))
    ss = sacker_sell_general(s)
    assert all(iv.width < 0.1 for iv in ss.intervals)
    b, _ = bohl_spectrum(s)
    assert coincidence_check(b, ss, 0.05).passed


def test_affine_covariance():
    s = example("prop52")
    t = scale_shift(s, 0.5, 0.25)
    b0, _ = bohl_spectrum(s)
    b1, _ = bohl_spectrum(t)
    assert coincidence_check(b1, b0.affine(0.5, 0.25), 0.05).passed
    assert coincidence_check(sacker_sell(t), sacker_sell(s).affine(0.5, 0.25), 0.05).passed


# kinematic similarity --------------------------------------------------------


def test_identity_similarity():
    s = example("sec6")
    t = kinematic_transform(s, constant_similarity(np.eye(2)))
    for j in range(4):
        np.testing.assert_allclose(t.segment_matrix(j), s.segment_matrix(j))


def test_constant_similarity_keeps_spectra():
    t = kinematic_transform(SADDLE, constant_similarity([[1.0, 1.0], [0.0, 1.0]]))
    np.testing.assert_allclose(t.segment_matrix(0), [[-1.0, -2.0], [0.0, 1.0]])
    b, _ = bohl_spectrum(t)
    assert close(b.intervals, [(-1.0, -1.0), (1.0, 1.0)], 0.01)
    assert close(sacker_sell_general(t).intervals, [(-1.0, -1.0), (1.0, 1.0)], 0.02)


def test_rotation_similarity_prop52():
    s = example("prop52", "mild51", 10)
    t = kinematic_transform(s, rotation_family())
    b, _ = bohl_spectrum(t)
    assert len(b) == 1 and b.intervals[0].hi <= -0.9 and b.intervals[0].lo >= -1.05


def test_kinematic_bound_violation():
    bad = KinematicSpec(
        lambda t: np.eye(2) * (1 + t), lambda t: np.eye(2) / (1 + t), lambda t: np.eye(2), 2.0, 1.0, 1.0
    )
    with pytest.raises(KinematicError):
        kinematic_transform(example("sec6"), bad)


# witnesses -------------------------------------------------------------------


def test_witness_saddle():
    ss = sacker_sell_general(SADDLE)
    np.testing.assert_allclose(np.abs(interval_witness(SADDLE, ss, 1)), [0.0, 1.0], atol=1e-9)


def test_witness_prop52():
    s = example("prop52")
    x = interval_witness(s, sacker_sell_diagonal(s), 0)
    e = bohl_interval(s, x)
    assert -1.05 <= e.lower and e.upper <= 0.05


def test_witness_product3d():
    s = example("product3d")
    ss = sacker_sell_diagonal(s)
    x = interval_witness(s, ss, 0)
    e = bohl_interval(s, x)
    assert ss.intervals[0].lo - 0.05 <= e.lower and e.upper <= ss.intervals[0].hi + 0.05
