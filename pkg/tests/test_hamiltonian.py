import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.hamiltonian import (DriverInput, build_driver, certify_driver, control_terms, eval_control_hamiltonian,
                                  selector_slack)
from twoscale.model import ConfigError, FunctionSpec

from conftest import make_spec

CONTROLLED = {
    "levy1": {"marks": [0.3], "intensities": [1.0]},
    "levy2": {"marks": [0.4], "intensities": [2.0]},
    "coefficients": {
        "control_set": [[-1.0], [0.0], [1.0]],
        "b": {"name": "linear", "params": {"a": 0.5}},
        "rho": {"name": "linear", "params": {"a": 0.3}},
        "r": {"name": "affine", "params": {"a": 0.2, "offset": 1.0}},
        "gamma": {"name": "affine", "params": {"a": -0.2, "offset": 1.0}},
        "l": {"name": "quadratic", "params": {"q": 0.5, "a": 0.7}},
    },
}

vec = st.floats(-3, 3, allow_nan=False)


def brute(a, q, z, zeta, u, theta):
    # l + z b + zeta rho + u (r - 1) lambda1 + theta (gamma - 1) lambda2, written out by hand
    return 0.5 * q * q + 0.7 * a * a + z * 0.5 * a + zeta * 0.3 * a + u * 0.2 * a * 1.0 + theta * (-0.2 * a) * 2.0


def test_hamiltonian_matches_hand_formula():
    spec = make_spec(**CONTROLLED)
    g = np.random.default_rng(0)
    cols = {k: g.normal(size=(50, 1)) for k in ("x", "q", "z", "zeta", "u", "theta")}
    inp = DriverInput.build(spec, **cols)
    vals, idx = eval_control_hamiltonian(spec, inp)
    table = np.array([brute(a, *(cols[k][:, 0] for k in ("q", "z", "zeta", "u", "theta"))) for a in (-1, 0, 1)])
    assert np.allclose(control_terms(spec, inp), table, atol=1e-13)
    assert np.allclose(vals, table.min(axis=0), atol=1e-13)
    assert np.array_equal(idx, table.argmin(axis=0))


def test_driver_terms():
    spec = make_spec(levy1={"marks": [0.3], "intensities": [1.0]})
    inp = DriverInput.build(spec, x=[[0.5]], q=[[2.0]], z=[[-3.0]], u=[[1.0]])
    cases = [({"name": "square_q", "params": {"coef": 2.0}}, 8.0),
             ({"name": "abs_z", "params": {"coef": -1.0}}, -3.0),
             ({"name": "constant", "params": {"value": 0.25}}, 0.25),
             ({"name": "linear", "params": {"z": 0.5, "u": 0.3, "offset": 0.1}}, 0.1 - 1.5 + 0.3),
             ({"name": "sin_x", "params": {"amplitude": 0.2}}, 0.2 * np.sin(0.5))]
    for term, expect in cases:
        assert build_driver(spec, [term])(inp)[0] == pytest.approx(expect, abs=1e-14)
    d = build_driver(spec, [c[0] for c in cases])
    assert d(inp)[0] == pytest.approx(sum(c[1] for c in cases), abs=1e-13)
    assert d.depends_on("q") and d.depends_on("z") and not d.depends_on("zeta")


def test_unknown_driver_term():
    with pytest.raises(ConfigError, match="unknown driver term"):
        build_driver(make_spec(), [FunctionSpec("cubic_z")])


def test_hamiltonian_dependencies():
    spec = make_spec(**CONTROLLED)
    d = build_driver(spec, [FunctionSpec("hamiltonian")])
    assert d.is_hamiltonian
    assert all(d.depends_on(k) for k in ("z", "zeta", "u", "theta"))


@settings(max_examples=50, deadline=None)
@given(z1=vec, z2=vec, u1=vec, u2=vec, t=st.floats(0, 1))
def test_hamiltonian_is_concave_in_z_u(z1, z2, u1, u2, t):
    spec = make_spec(**CONTROLLED)
    d = build_driver(spec, [FunctionSpec("hamiltonian")])

    def psi(z, u):
        return d(DriverInput.build(spec, n=1, z=[[z]], u=[[u]]))[0]

    mid = psi(t * z1 + (1 - t) * z2, t * u1 + (1 - t) * u2)
    assert mid >= t * psi(z1, u1) + (1 - t) * psi(z2, u2) - 1e-12


@settings(max_examples=50, deadline=None)
@given(u=vec, up=vec, th=vec, thp=vec, z=vec)
def test_selector_inequality(u, up, th, thp, z):
    spec = make_spec(**CONTROLLED)
    inp = DriverInput.build(spec, n=1, z=[[z]], u=[[u]], theta=[[th]])
    assert selector_slack(spec, inp, [[up]], [[thp]])[0] >= -1e-12


def test_certificate_constants():
    spec = make_spec(levy1={"marks": [0.3], "intensities": [4.0]})
    cert = certify_driver(spec, n_samples=400, driver=build_driver(spec, [
        {"name": "linear", "params": {"z": 0.5, "u": 0.3}}]))
    assert cert.L_z == pytest.approx(0.5, rel=1e-9)
    # |0.3 (u - u')| / ||u - u'||_L2(nu) = 0.3 / sqrt(lambda)
    assert cert.L_u == pytest.approx(0.3 / 2.0, rel=1e-9)
    assert cert.L_q == 0.0 and cert.M_psi == 0.0
    c = certify_driver(spec, n_samples=400, driver=build_driver(spec, [{"name": "abs_z", "params": {"coef": -1.0}}]))
    assert c.L_z <= 1.0 + 1e-12 and c.L_z > 0.9
    assert c.to_dict()["samples_used"] == 400


def test_certificate_selector_band():
    spec = make_spec(**CONTROLLED)
    cert = certify_driver(spec, n_samples=200, driver=build_driver(spec, [FunctionSpec("hamiltonian")]))
    # r - 1 = 0.2 a on a in [-1, 1]; gamma - 1 = -0.2 a
    assert cert.C1 == pytest.approx(-0.2) and cert.C2 == pytest.approx(0.2)
    assert cert.C1_bar == pytest.approx(-0.2) and cert.C2_bar == pytest.approx(0.2)
