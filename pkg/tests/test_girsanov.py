import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.forward import GridSpec, simulate
from twoscale.girsanov import (ESSWarning, GirsanovSpec, MeasureChangeError, cell_statistics,
                               check_uniform_integrability, constant_policy, control_measure, doleans_dade,
                               doleans_dade_product, inverse_weight_moments, piecewise_log_weight,
                               reweighted_functional, reweighted_mean)

from conftest import make_spec

JUMPS = {"levy1": {"marks": [0.3], "intensities": [1.0]}, "levy2": {"marks": [0.4], "intensities": [2.0]}}
CONTROL = {"coefficients": {"control_set": [[-1.0], [1.0]], "b": {"name": "linear", "params": {"a": 0.5}},
                            "rho": {"name": "linear", "params": {"a": 0.3}},
                            "r": {"name": "affine", "params": {"a": 0.2, "offset": 1.0}},
                            "gamma": {"name": "affine", "params": {"a": -0.2, "offset": 1.0}}}}


@pytest.fixture(scope="module")
def ens():
    spec = make_spec(scales={"epsilon": 0.5}, **JUMPS)
    g = GridSpec(20)
    return spec, g, simulate(spec, g, 20000, seed=5)


def test_zero_tilt_has_unit_weight(ens):
    spec, g, e = ens
    wp = doleans_dade(GirsanovSpec.for_model(spec, epsilon=0.5), e, g, spec)
    assert np.all(wp.log_weight == 0.0)


def test_product_form_agrees_with_log_sum(ens):
    spec, g, e = ens

    def beta(t, x, q):
        return 0.3 * np.tanh(x)

    gs = GirsanovSpec.for_model(spec, beta1=beta, beta2=lambda t, x, q: 0.2 * np.cos(q),
                                gamma1=lambda t, x, q: 1.0 + 0.2 * np.sin(x), gamma2=0.7, epsilon=0.5)
    lw = doleans_dade(gs, e, g, spec).log_weight[:, -1]
    prod = doleans_dade_product(gs, e, g, spec)
    assert np.allclose(np.log(prod), lw, atol=1e-10, rtol=0)


def test_drift_shift_expectation(ens):
    # beta = 1 on W1 with A = 0, R = 1: E~[X_1] = x0 + 1
    spec, g, e = ens
    r = reweighted_functional(lambda en: en.X[:, -1, 0], GirsanovSpec.for_model(spec, beta1=1.0, epsilon=0.5),
                              e, g, spec)
    assert abs(r.estimate - 2.0) <= 3 * r.se


@settings(max_examples=10, deadline=None)
@given(b1=st.floats(-1, 1), b2=st.floats(-1, 1), g1=st.floats(0.3, 2.0), g2=st.floats(0.3, 2.0))
def test_normalization_property(ens, b1, b2, g1, g2):
    spec, g, e = ens
    gs = GirsanovSpec.for_model(spec, beta1=b1, beta2=b2, gamma1=g1, gamma2=g2, epsilon=0.5)
    w = doleans_dade(gs, e, g, spec).weight
    assert abs(w.mean() - 1.0) <= 4.5 * w.std() / math.sqrt(w.size)


def test_tilted_jump_counts(ens):
    spec, g, e = ens
    gs = GirsanovSpec.for_model(spec, gamma1=1.6, gamma2=0.5, epsilon=0.5)
    w = doleans_dade(gs, e, g, spec).weight
    for cnt, expect in ((e.noise.counts1.sum(axis=(1, 2)), 1.6 * 1.0), (e.noise.counts2.sum(axis=(1, 2)), 0.5 * 2.0 / 0.5)):
        r = reweighted_mean(cnt, w)
        assert abs(r.estimate - expect) <= 3 * r.se


def test_nonpositive_multiplier_at_jump(ens):
    spec, g, e = ens
    with pytest.raises(MeasureChangeError):
        doleans_dade(GirsanovSpec.for_model(spec, gamma1=0.0, epsilon=0.5), e, g, spec)


def test_piecewise_weight_matches_general_route(ens):
    spec, g, e = ens
    stats = cell_statistics(e, g, 4)
    beta = np.array([[0.5], [-0.2], [0.0], [1.0]])
    gamma = np.array([[1.3], [0.8], [1.0], [0.5]])
    cell_of = lambda t: min(int(t * 4 + 1e-9), 3)
    gs = GirsanovSpec.for_model(spec, beta1=lambda t, x, q: np.full((x.shape[0], 1), beta[cell_of(t), 0]),
                                gamma1=lambda t, x, q: np.full((x.shape[0], 1), gamma[cell_of(t), 0]), epsilon=0.5)
    ref = doleans_dade(gs, e, g, spec).log_weight[:, -1]
    got = piecewise_log_weight(stats, beta, gamma, spec.nu1.intensities)
    assert np.allclose(got, ref, atol=1e-10)


def test_control_measure_integrands():
    spec = make_spec(scales={"epsilon": 0.25}, **JUMPS, **CONTROL)
    gs = control_measure(spec, constant_policy(1))
    x, q = np.zeros((3, 1)), np.zeros((3, 1))
    b1, b2, g1, g2 = gs.integrands(0.0, x, q)
    assert np.allclose(b1, 0.5) and np.allclose(b2, 0.3 / 0.5)
    assert np.allclose(g1, 1.2) and np.allclose(g2, 0.8)


def test_uniform_integrability_exponent():
    rep = check_uniform_integrability(2.0, [0.5], [1.5], [4.0], horizon=2.0)
    assert rep.passed and rep.exponent == pytest.approx(0.5 * 4 * 2 + 2 * 0.25 * 4)
    assert check_uniform_integrability(1.0, None, None, [], l2_bound=3.0).exponent == pytest.approx(0.5 + 9.0)
    bad = check_uniform_integrability(0.0, [0.0], [1.0], [1.0])
    assert not bad.passed and "Gamma_min" in bad.reason


def test_low_ess_warns_and_moments():
    w = np.r_[np.full(99, 1e-6), 100.0]
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        reweighted_mean(np.ones(100), w)
    assert any(issubclass(r.category, ESSWarning) for r in rec)
    lw = np.random.default_rng(0).normal(size=1000)
    m = inverse_weight_moments(lw)
    assert m["identity"] == pytest.approx(1.0) and m["p1"] == pytest.approx(1.0)
