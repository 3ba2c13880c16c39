import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.bsde import RegressionBasis, markovian_decoder, slice_summary, solve_full_bsde, solve_reduced_bsde
from twoscale.forward import GridSpec, simulate
from twoscale.reduction import exact_lambda_map

from conftest import make_spec

JUMPS = {"levy1": {"marks": [0.3], "intensities": [1.0]}, "levy2": {"marks": [0.4], "intensities": [1.0]}}
SQUARE = {"h": {"name": "quadratic", "params": {"x": 1.0}}}


def solve(spec, K, n, seed=1, **kw):
    g = GridSpec(K)
    ens = simulate(spec, g, n, seed=seed)
    return solve_full_bsde(spec, g, ens, **kw), ens


def test_zero_driver_constant_terminal():
    spec = make_spec(coefficients={"h": {"name": "constant", "params": {"value": 2.5}}},
                     driver={"terms": [{"name": "constant", "params": {"value": 0.0}}]}, **JUMPS)
    sol, _ = solve(spec, 20, 2000)
    assert np.all(np.abs(sol.Y - 2.5) < 1e-12)
    for f in (sol.Z, sol.Xi, sol.U, sol.Theta):
        assert np.all(np.abs(f) < 1e-12)


def test_unit_driver_zero_terminal_is_quadrature():
    spec = make_spec(coefficients={"h": {"name": "zero"}},
                     driver={"terms": [{"name": "constant", "params": {"value": 1.0}}]}, **JUMPS)
    sol, _ = solve(spec, 25, 1000)
    assert np.max(np.abs(sol.Y - (1.0 - sol.times)[:, None])) <= 1e-10


def test_linear_driver_closed_form():
    # psi = z, h = x, A = 0: Y_0 = E[X_1 + W_1] = x0 + 1 under the shifted measure
    spec = make_spec(initial={"x0": [0.5]}, coefficients={"h": {"name": "linear", "params": {"x": 1.0}}},
                     driver={"terms": [{"name": "linear", "params": {"z": 1.0}}]})
    sol, _ = solve(spec, 50, 5000)
    assert abs(sol.Y0 - 1.5) <= max(3 * sol.se, 5e-3)


def test_jump_closed_form_zero_driver():
    # h = x^2: Y_t = X_t^2 + (1 - t)(1 + lambda w^2), Z = 2X, U = 2Xw + w^2
    spec = make_spec(levy1=JUMPS["levy1"], coefficients=SQUARE,
                     driver={"terms": [{"name": "constant", "params": {"value": 0.0}}]})
    sol, ens = solve(spec, 200, 20000)
    assert abs(sol.Y0 - 2.09) <= 3 * sol.se
    k = 100
    X = ens.X[:, k, 0]
    assert np.mean(np.abs(sol.Z[k][:, 0] - 2 * X)) < 0.02
    assert np.mean(np.abs(sol.U[k][:, 0] - (0.6 * X + 0.09))) < 0.005


def test_jump_closed_form_drift_shift():
    # psi = 0.5 z shifts W by 0.5: Y_0 = (x0 + 0.5)^2 + 1 + lambda w^2
    spec = make_spec(levy1=JUMPS["levy1"], coefficients=SQUARE,
                     driver={"terms": [{"name": "linear", "params": {"z": 0.5}}]})
    sol, ens = solve(spec, 200, 20000)
    assert abs(sol.Y0 - 3.34) <= 3 * sol.se
    k = 100
    m = ens.X[:, k, 0] + 0.5 * (1 - sol.times[k])
    assert np.mean(np.abs(sol.Z[k][:, 0] - 2 * m)) < 0.02
    assert np.mean(np.abs(sol.U[k][:, 0] - (0.6 * m + 0.09))) < 0.005


def test_reduced_matches_full_for_slow_driver():
    spec = make_spec(levy1=JUMPS["levy1"], coefficients=SQUARE,
                     driver={"terms": [{"name": "linear", "params": {"z": 0.5, "u": 0.3}}]})
    g = GridSpec(100)
    ens = simulate(spec, g, 10000, seed=2)
    full = solve_full_bsde(spec, g, ens)
    red = solve_reduced_bsde(spec, g, ens, exact_lambda_map(spec))
    assert red.Xi is None or red.Xi.size == 0 or np.all(red.Xi == 0)
    assert abs(full.Y0 - red.Y0) <= 3 * math.hypot(full.se, red.se)


def test_decoder_and_summary():
    spec = make_spec(levy1=JUMPS["levy1"], coefficients=SQUARE,
                     driver={"terms": [{"name": "constant", "params": {"value": 0.0}}]})
    sol, ens = solve(spec, 40, 4000)
    dec = markovian_decoder(sol)
    S = np.column_stack([ens.X[:, 20], ens.Q[:, 20]])
    exact = ens.X[:, 20, 0] ** 2 + 0.5 * 1.09
    assert np.mean(np.abs(dec.y(20, S) - exact)) < 0.02
    assert np.array_equal(dec.y(40, np.column_stack([ens.X[:, 40], ens.Q[:, 40]])), ens.X[:, 40, 0] ** 2)
    rows = slice_summary(sol)
    assert len(rows) == 41 and len(rows[0]) == 7
    # rows hold the regressed slice; Y0 is the cross-fitted mean
    assert abs(rows[0][1] - sol.Y0) <= 3 * sol.se + 0.01
    coefs = dec.coefficients()
    assert len(coefs) == 40 and coefs[0]["t"] == 0.0


def test_grid_basis_runs():
    spec = make_spec(levy1=JUMPS["levy1"], coefficients=SQUARE,
                     driver={"terms": [{"name": "constant", "params": {"value": 0.0}}]})
    sol, _ = solve(spec, 50, 10000, basis=RegressionBasis("grid", resolution=12))
    assert abs(sol.Y0 - 2.09) <= 3 * sol.se + 0.02


def test_basis_validation():
    with pytest.raises(ValueError):
        RegressionBasis("spline")
    with pytest.raises(ValueError):
        RegressionBasis(degree=-1)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.floats(-1, 1), eps=st.sampled_from([1.0, 0.5, 0.2]))
def test_terminal_condition_and_finite_fields(seed, c, eps):
    spec = make_spec(coefficients=SQUARE, scales={"epsilon": eps},
                     driver={"terms": [{"name": "square_q"}, {"name": "linear", "params": {"z": c, "u": c}}]}, **JUMPS)
    g = GridSpec(10)
    ens = simulate(spec, g, 600, seed=seed)
    sol = solve_full_bsde(spec, g, ens)
    assert np.array_equal(sol.Y[-1], ens.X[:, -1, 0] ** 2)
    for f in (sol.Y, sol.Z, sol.Xi, sol.U, sol.Theta):
        assert np.all(np.isfinite(f))
