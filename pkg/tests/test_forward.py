import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.forward import (GridSpec, StiffnessError, contraction_check, estimate_kappa, sample_compound_poisson,
                              sample_noise, simulate, simulate_frozen_fast)
from twoscale.model import LevyMeasure

from conftest import make_spec

JUMPS = {"levy1": {"marks": [0.3], "intensities": [1.0]}, "levy2": {"marks": [0.4], "intensities": [1.0]}}


def within(est, se, target, k=4.0, slack=0.0):
    return abs(est - target) <= k * se + slack


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(0)
    with pytest.raises(ValueError):
        GridSpec(10, 0.0)
    g = GridSpec(4, 2.0)
    assert g.dt == 0.5 and g.times.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]


def test_slow_ou_is_exact_in_distribution():
    # dX = -theta X dt + dW: X_1 ~ N(e^-theta x0, (1 - e^-2theta) / (2 theta)) at any step count
    theta, x0, n = 1.0, 1.0, 40000
    spec = make_spec(operators={"A": [[-theta]]}, initial={"x0": [x0]})
    mean = math.exp(-theta) * x0
    var = (1 - math.exp(-2 * theta)) / (2 * theta)
    for K in (5, 50):
        X1 = simulate(spec, GridSpec(K), n, seed=1, fast=False).X[:, -1, 0]
        assert within(X1.mean(), X1.std() / math.sqrt(n), mean)
        assert within(X1.var(), var * math.sqrt(2.0 / n), var)


def test_deterministic_decay_exact_under_refinement():
    # no noise: X_1 = e^-1 x0, exact for every step count
    spec = make_spec(operators={"A": [[-1.0]], "R": [[1e-300]]})
    errs = [abs(simulate(spec, GridSpec(K), 2, seed=0, fast=False).X[0, -1, 0] - math.exp(-1.0))
            for K in (100, 1000, 10000)]
    assert max(errs) < 1e-12


def test_compensated_slow_jumps_moments():
    spec = make_spec(**JUMPS)
    n = 40000
    X1 = simulate(spec, GridSpec(20), n, seed=2, fast=False).X[:, -1, 0]
    assert within(X1.mean(), X1.std() / math.sqrt(n), 1.0)
    var = 1.0 + 0.3 ** 2
    assert within(X1.var(), var * math.sqrt(2.0 / n) * 1.2, var)


def test_compound_poisson_counts():
    nu = LevyMeasure(np.array([[0.1], [0.2]]), [1.0, 3.0])
    counts = np.array([len(sample_compound_poisson(nu, 0.5, 2.0, seed=s)) for s in range(3000)])
    expect = 0.5 * 4.0 * 2.0
    assert within(counts.mean(), counts.std() / math.sqrt(counts.size), expect)
    ev = sample_compound_poisson(nu, 1.0, 1.0, seed=5)
    assert all(0 < e.time <= 1.0 for e in ev)
    assert [e.time for e in ev] == sorted(e.time for e in ev)
    with pytest.raises(ValueError):
        sample_compound_poisson(nu, 1.0, 0.0, seed=0)


def test_fast_jump_rate_scales_with_inverse_epsilon():
    spec = make_spec(**JUMPS)
    n, eps = 4000, 0.1
    noise = sample_noise(spec, GridSpec(10), n, seed=3, epsilon=eps)
    per_path = noise.counts2.sum(axis=(1, 2))
    assert within(per_path.mean(), per_path.std() / math.sqrt(n), 1.0 / eps)


def test_fast_ou_stationary_variance():
    # frozen fast OU with mu = 1: Var Q = (G^2 + lambda w^2) / 2 on the invariant law
    spec = make_spec(**JUMPS)
    n = 20000
    Q, _ = simulate_frozen_fast(spec, [1.0], GridSpec(100, 10.0), seed=4, n_paths=n)
    q = Q[:, -1, 0]
    var = (0.4 ** 2 + 0.4 ** 2) / 2
    assert within(q.mean(), q.std() / math.sqrt(n), 0.0)
    assert within(q.var(), var * math.sqrt(2.0 / n) * 1.2, var, slack=1e-3)


def test_slow_noise_shared_across_epsilon():
    spec = make_spec(**JUMPS)
    a = sample_noise(spec, GridSpec(8), 50, seed=9, epsilon=1.0)
    b = sample_noise(spec, GridSpec(8), 50, seed=9, epsilon=0.05)
    c = sample_noise(spec, GridSpec(8), 50, seed=9, epsilon=0.05, fast=False)
    assert np.array_equal(a.dW1, b.dW1) and np.array_equal(a.counts1, b.counts1)
    assert np.array_equal(a.dW1, c.dW1)


def test_reproducible_and_thread_independent():
    spec = make_spec(**JUMPS)
    a = simulate(spec, GridSpec(10), 3000, seed=11, threads=1)
    b = simulate(spec, GridSpec(10), 3000, seed=11, threads=3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Q, b.Q)


def test_longer_run_extends_shorter_one():
    spec = make_spec(**JUMPS)
    short = simulate(spec, GridSpec(6), 1024, seed=12)
    long = simulate(spec, GridSpec(6), 2500, seed=12)
    assert np.array_equal(short.X, long.X[:1024])


def test_path_view_matches_batch():
    spec = make_spec(**JUMPS)
    noise = sample_noise(spec, GridSpec(10), 20, seed=13, epsilon=0.5)
    for i in range(20):
        p = noise.path(i)
        assert len(p.jumps1) == noise.counts1[i].sum()
        assert len(p.jumps2) == noise.counts2[i].sum()
        assert all(j.measure_id == 2 for j in p.jumps2)


def test_stiffness_guard():
    spec = make_spec(scales={"max_stiffness": 0.01, "fast_step_ratio": 10.0})
    with pytest.raises(StiffnessError):
        simulate(spec, GridSpec(10), 4, seed=0, epsilon=0.1)


def test_contraction_linear_is_exact():
    spec = make_spec(**JUMPS)
    g = np.random.default_rng(0)
    q, qp = g.normal(0, 2, (200, 1)), g.normal(0, 2, (200, 1))
    r = contraction_check(spec, q, qp, [0.3], GridSpec(100, 5.0), seed=1, mu=1.0, n_pairs=200)
    assert abs(r - 1.0) <= 1e-9
    assert contraction_check(spec, [1.0], [1.0], [0.0], GridSpec(10), seed=1, mu=1.0) == 0.0


@settings(max_examples=15, deadline=None)
@given(amp=st.floats(min_value=0.0, max_value=0.9), freq=st.floats(min_value=0.1, max_value=1.0),
       q=st.floats(-5, 5), qp=st.floats(-5, 5), seed=st.integers(0, 2 ** 31))
def test_contraction_with_lipschitz_perturbation(amp, freq, q, qp, seed):
    # F = amp sin(freq q) keeps mu = 1 - amp freq; the pathwise ratio never exceeds 1
    spec = make_spec(coefficients={"F": {"name": "sinusoidal",
                                         "params": {"on": "q", "amplitude": amp, "frequency": freq}}}, **JUMPS)
    if q == qp:
        return
    r = contraction_check(spec, [q], [qp], [0.0], GridSpec(40, 4.0), seed=seed, mu=1.0 - amp * freq)
    assert r <= 1.0 + 1e-6


def test_kappa_equals_lipschitz_constant_for_linear_coupling():
    # F = 0.5 x: Q - Q' solves the linear fast equation driven by 0.5 (G - G'), so kappa = 0.5
    spec = make_spec(coefficients={"F": {"name": "linear", "params": {"x": 0.5}}}, scales={"epsilon": 0.2})
    g = GridSpec(50)
    G = np.sin(3 * g.times)[:, None]
    assert estimate_kappa(spec, G, np.zeros_like(G), g, seed=0, mu=1.0) == pytest.approx(0.5, rel=1e-9)
