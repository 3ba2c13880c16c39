import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.model import (ConfigError, check_dissipativity, check_lipschitz_bounds, load_model,
                            load_model_file, model_to_dict, serialize_model)

from conftest import make_spec

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


def test_minimal_corpus_loads(corpus):
    spec = load_model_file(corpus / "minimal.toml")
    assert (spec.dx, spec.dq, spec.dw) == (1, 1, 1)
    assert spec.nu1.n_marks == 0 and spec.nu2.n_marks == 0


def test_dimension_mismatch_is_config_error():
    with pytest.raises(ConfigError, match="dimension mismatch"):
        make_spec(initial={"x0": [1.0, 2.0]})
    with pytest.raises(ConfigError, match="dimension mismatch"):
        make_spec(levy1={"marks": [[0.1, 0.2]], "intensities": [1.0]})


def test_missing_operator_and_bad_toml():
    with pytest.raises(ConfigError):
        load_model("[operators]\nA = [[0.0]]\n")
    with pytest.raises(ConfigError, match="parse"):
        load_model("[operators\n")


def test_epsilon_range():
    with pytest.raises(ConfigError):
        make_spec(scales={"epsilon": 0.0})
    with pytest.raises(ConfigError):
        make_spec(scales={"epsilon": 1.5})


@settings(max_examples=40, deadline=None)
@given(a=finite, g=finite, x0=finite, w=st.floats(min_value=-5, max_value=5, allow_nan=False).filter(lambda v: abs(v) > 1e-9),
       lam=st.floats(min_value=1e-3, max_value=50, allow_nan=False))
def test_config_round_trip_is_bit_exact(a, g, x0, w, lam):
    spec = make_spec(operators={"A": [[a]], "G": [[g]]}, initial={"x0": [x0]},
                     levy1={"marks": [w], "intensities": [lam]})
    back = load_model(serialize_model(spec))
    assert back.ops.A[0, 0] == a and back.ops.G[0, 0] == g
    assert back.x0[0] == x0
    assert back.nu1.marks[0, 0] == w and back.nu1.intensities[0] == lam
    assert model_to_dict(back) == model_to_dict(spec)


def test_dissipativity_of_linear_fast_drift_is_exact():
    # <B(q - q'), q - q'> = -mu |q - q'|^2 with B = -mu I
    for mu in (0.5, 1.0, 3.0):
        rep = check_dissipativity(make_spec(operators={"B": [[-mu]]}), n_samples=500)
        assert rep.mu_hat == pytest.approx(mu, rel=1e-12)
        assert rep.ok


def test_sin_perturbation_lowers_dissipativity():
    # F = 0.5 sin q has Lipschitz constant 0.5, so mu >= 0.5 and the sample infimum approaches it
    spec = make_spec(coefficients={"F": {"name": "sinusoidal",
                                         "params": {"on": "q", "amplitude": 0.5, "frequency": 1.0}}})
    rep = check_dissipativity(spec, n_samples=4000)
    assert 0.5 <= rep.mu_hat < 0.52


def test_non_dissipative_flagged():
    rep = check_dissipativity(make_spec(operators={"B": [[0.5]]}), n_samples=200)
    assert rep.mu_hat < 0 and not rep.ok


def test_declared_constants_are_checked():
    good = make_spec(coefficients={"h": {"name": "linear", "params": {"x": 2.0}}, "constants": {"L_h": 2.0}})
    assert check_lipschitz_bounds(good, n_samples=300).lipschitz_violations == 0
    bad = make_spec(coefficients={"h": {"name": "linear", "params": {"x": 2.0}}, "constants": {"L_h": 1.0}})
    rep = check_lipschitz_bounds(bad, n_samples=300)
    assert rep.lipschitz_violations > 0 and not rep.ok
    assert "L_F" in rep.details["skipped"]


def test_unknown_coefficient_kind():
    with pytest.raises(ConfigError):
        make_spec(coefficients={"h": {"name": "cubic", "params": {}}})


def test_extras_sections_preserved():
    spec = make_spec(run={"seed": 3}, sweep={"tol": 0.5})
    assert spec.extras == {"run": {"seed": 3}, "sweep": {"tol": 0.5}}
    assert not math.isnan(spec.horizon)
    assert np.all(spec.q0 == 0)
