import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.ergodic import (CertificationError, LambdaMap, LambdaQuery, NonDissipativeError, build_lambda_map,
                              certify_vbar, lambda_oracle_timeavg, lambda_pointwise)

from conftest import make_spec

OU_JUMP = {"levy2": {"marks": [0.4], "intensities": [1.0]}, "driver": {"terms": [{"name": "square_q"}]}}
# Ito balance for the OU fast process: E[q^2] = (G^2 + lambda w^2) / (2 mu)
EXACT = (0.4 ** 2 + 0.4 ** 2) / 2


@pytest.fixture(scope="module")
def ou_solution():
    spec = make_spec(**OU_JUMP)
    q = LambdaQuery.build(spec, x=[1.0])
    return spec, q, lambda_pointwise(spec, q, n_paths=2000, seed=1)


def test_pointwise_matches_ito_balance(ou_solution):
    _, _, sol = ou_solution
    assert abs(sol.lambda_value - EXACT) <= 3 * sol.se
    assert not sol.exact


def test_time_average_oracle_matches_ito_balance(ou_solution):
    spec, q, _ = ou_solution
    o = lambda_oracle_timeavg(spec, q, n_paths=2000, seed=2)
    assert abs(o.value - EXACT) <= 3 * o.se


def test_corrector_is_half_square(ou_solution):
    # psi - lambda + L v = 0 is solved by v(q) = q^2 / 2 with v(0) = 0
    _, _, sol = ou_solution
    q = np.linspace(-1.0, 1.0, 9)[:, None]
    assert np.max(np.abs(sol.vbar(q) - 0.5 * q[:, 0] ** 2)) < 0.05
    cert = certify_vbar(sol, n_pairs=200, seed=0)
    assert cert["vbar_at_ref"] == 0.0
    assert math.isfinite(cert["max_growth_ratio"]) and math.isfinite(cert["max_lipschitz_quotient"])


def test_slow_only_driver_is_exact():
    spec = make_spec(levy1={"marks": [0.3], "intensities": [1.0]},
                     driver={"terms": [{"name": "linear", "params": {"z": 0.5, "u": 0.3, "offset": 0.1}}]})
    sol = lambda_pointwise(spec, LambdaQuery.build(spec, z=[2.0], u=[1.0]))
    assert sol.exact and sol.lambda_value == pytest.approx(0.1 + 1.0 + 0.3)


def test_non_dissipative_refused():
    spec = make_spec(operators={"B": [[0.5]]}, **OU_JUMP)
    with pytest.raises(NonDissipativeError):
        lambda_pointwise(spec, LambdaQuery.build(spec))


def test_oracle_refuses_zeta_dependence():
    spec = make_spec(driver={"terms": [{"name": "linear", "params": {"zeta": 1.0}}]})
    with pytest.raises(ValueError):
        lambda_oracle_timeavg(spec, LambdaQuery.build(spec), n_paths=10)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2), c=st.floats(-2, 2),
       x=st.floats(-1, 1), z=st.floats(-3, 3), u=st.floats(-1, 1))
def test_cached_map_reproduces_multilinear_functions(a, b, c, x, z, u):
    axes = [np.linspace(-1, 1, 3), np.linspace(-3, 3, 4), np.linspace(-1, 1, 2)]
    lm = LambdaMap.from_function(1, 1, lambda X, Z, U: a * X[:, 0] + b * Z[:, 0] * X[:, 0] + c * U[:, 0], axes)
    got = lm([[x]], [[z]], [[u]])[0]
    assert got == pytest.approx(a * x + b * z * x + c * u, abs=1e-10)
    assert lm.last_outside == 0


def test_outside_points_are_clamped_and_counted():
    lm = LambdaMap.from_function(1, 0, lambda X, Z, U: Z[:, 0], [np.zeros(1), np.linspace(-1, 1, 5)])
    out = lm(np.zeros((3, 1)), [[-5.0], [0.5], [5.0]], np.zeros((3, 0)))
    assert out.tolist() == [-1.0, 0.5, 1.0]
    assert lm.last_outside == 2
    const = LambdaMap.constant(1, 1, 0.16)
    assert np.all(const(np.ones((4, 1)), 7 * np.ones((4, 1)), np.ones((4, 1))) == 0.16)
    assert const.last_outside == 0


def test_certificates_and_concavity():
    axes = [np.zeros(1), np.linspace(-3, 3, 13)]
    concave = LambdaMap.from_function(1, 0, lambda X, Z, U: -np.abs(Z[:, 0]), axes)
    assert concave.certificates["L_z"] == pytest.approx(1.0)
    assert concave.concavity_report()["violations"] == 0
    convex = LambdaMap.from_function(1, 0, lambda X, Z, U: np.abs(Z[:, 0]), axes)
    assert convex.concavity_report()["violations"] == 1


def test_map_shape_validation():
    with pytest.raises(ValueError):
        LambdaMap(1, 0, axes=[np.zeros(2)], values=np.zeros(2))


def test_build_map_certifies_and_refuses():
    spec = make_spec(**OU_JUMP)
    box = [(-1.0, 1.0), (0.0, 0.0)]
    lm = build_lambda_map(spec, box, [2, 1], n_paths=500, seed=3, n_holdout=1, tol=0.02)
    assert lm.holdout and lm.holdout[0]["error"] <= lm.holdout[0]["allowed"]
    with pytest.raises(CertificationError):
        build_lambda_map(make_spec(levy2=OU_JUMP["levy2"], driver={"terms": [{"name": "square_q"}, {
            "name": "sin_x", "params": {"amplitude": 1.0, "frequency": 3.0}}]}),
            box, [2, 1], n_paths=500, seed=3, n_holdout=2, tol=1e-4)
