"""Noise sampling and simulation of the slow, fast and frozen fast equations.

Both equations use an exponential integrator with the linear part solved
exactly and the noise/jump increments weighted at the step midpoint.  The
fast equation runs on ``m`` sub-steps per slow step so that its own-clock
step ``h = dt/(eps*m)`` stays below ``spec.fast_step_ratio``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import rng
from .model import LevyMeasure, ModelSpec


class StiffnessError(ValueError):
    """Fast step exceeds the configured stiffness bound."""


@dataclass(frozen=True)
class GridSpec:
    n_steps: int
    horizon: float = 1.0

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass(frozen=True)
class JumpRecord:
    time: float
    mark_index: int
    measure_id: int = 1


def sample_compound_poisson(nu: LevyMeasure, rate_scale: float, horizon: float, seed: int,
                            measure_id: int = 1) -> list:
    """Event list of a Poisson measure with intensities ``rate_scale * nu.intensities``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    total = rate_scale * nu.total_rate
    if nu.n_marks == 0 or total <= 0:
        return []
    gen = rng.generator(seed, "compound_poisson", measure_id)
    probs = nu.intensities / nu.total_rate
    out, t = [], 0.0
    while True:
        t += gen.exponential(1.0 / total)
        if t > horizon:
            return out
        out.append(JumpRecord(t, int(gen.choice(nu.n_marks, p=probs)), measure_id))


def _poisson_events(gen, size, nu, rate_scale, horizon):
    """Flat (path, time, mark) arrays for ``size`` independent paths."""
    if nu.n_marks == 0:
        return np.zeros(0, int), np.zeros(0), np.zeros(0, int)
    counts = gen.poisson(rate_scale * nu.total_rate * horizon, size=size)
    total = int(counts.sum())
    path = np.repeat(np.arange(size), counts)
    times = gen.uniform(0.0, horizon, size=total)
    marks = gen.choice(nu.n_marks, size=total, p=nu.intensities / nu.total_rate)
    order = np.lexsort((times, path))
    return path[order], times[order], marks[order]


def _bin(times, grid, m=1):
    """Index of the sub-interval ``(s_j, s_{j+1}]`` holding each time, ``m`` per step."""
    h = grid.dt / m
    idx = np.ceil(times / h).astype(int) - 1
    return np.clip(idx, 0, grid.n_steps * m - 1)


@dataclass
class NoisePath:
    dW1: np.ndarray
    dW2: np.ndarray
    jumps1: list
    jumps2: list
    seed: int


@dataclass
class NoiseEnsemble:
    """Batched noise for ``n_paths`` paths on ``grid``.

    ``dW2_sub`` and ``counts2_sub`` live on the fast sub-grid with ``substeps``
    points per slow step; ``dW2`` and ``counts2`` are their slow-step sums.
    ``N2`` events arrive at rate ``lambda_j / epsilon``.
    """

    grid: GridSpec
    seed: int
    epsilon: float
    substeps: int
    dW1: np.ndarray
    dW2_sub: np.ndarray
    jumps1: tuple
    jumps2: tuple
    counts1: np.ndarray
    counts2_sub: np.ndarray

    @property
    def n_paths(self):
        return self.dW1.shape[0]

    @property
    def dW2(self):
        return self.dW2_sub.sum(axis=2)

    @property
    def counts2(self):
        return self.counts2_sub.sum(axis=2)

    def path(self, i) -> NoisePath:
        j1 = [JumpRecord(float(t), int(k), 1) for p, t, k in zip(*self.jumps1) if p == i]
        j2 = [JumpRecord(float(t), int(k), 2) for p, t, k in zip(*self.jumps2) if p == i]
        return NoisePath(self.dW1[i], self.dW2[i], j1, j2, self.seed)


def fast_substeps(spec: ModelSpec, grid: GridSpec, epsilon: float, max_substeps: int = 4096) -> int:
    m = max(1, math.ceil(grid.dt / (epsilon * spec.fast_step_ratio) - 1e-12))
    m = min(m, max_substeps)
    if grid.dt / (epsilon * m) > spec.max_stiffness:
        raise StiffnessError(
            f"fast step dt/eps = {grid.dt / (epsilon * m):.3g} exceeds max_stiffness {spec.max_stiffness}")
    return m


def sample_noise(spec: ModelSpec, grid: GridSpec, n_paths: int, seed: int, epsilon: float = None,
                 slow: bool = True, fast: bool = True, threads: int = 1) -> NoiseEnsemble:
    """Draw Wiener increments and jump events for an ensemble.

    Streams are labelled per noise source, so the slow noise (W1, N1) of a
    given seed does not depend on ``epsilon`` or on whether fast noise is drawn.
    """
    eps = spec.epsilon if epsilon is None else float(epsilon)
    K, dt = grid.n_steps, grid.dt
    m = fast_substeps(spec, grid, eps) if fast else 1
    dx, dw = spec.dx, spec.dw
    m1, m2 = spec.nu1.n_marks, spec.nu2.n_marks

    def draw_chunk(c, size):
        g1 = rng.generator(seed, "W1", c)
        g2 = rng.generator(seed, "W2", c)
        n1 = rng.generator(seed, "N1", c)
        n2 = rng.generator(seed, "N2", c)
        w1 = g1.standard_normal((size, K, dx)) * math.sqrt(dt) if slow else np.zeros((size, K, dx))
        w2 = g2.standard_normal((size, K, m, dw)) * math.sqrt(dt / m) if fast else np.zeros((size, K, 1, dw))
        e1 = _poisson_events(n1, size, spec.nu1, 1.0, grid.horizon) if slow else _poisson_events(n1, size, LevyMeasure.empty(dx), 1.0, 1.0)
        e2 = _poisson_events(n2, size, spec.nu2, 1.0 / eps, grid.horizon) if fast else _poisson_events(n2, size, LevyMeasure.empty(spec.dq), 1.0, 1.0)
        return w1, w2, e1, e2

    starts = list(range(0, n_paths, rng.CHUNK))
    sizes = [min(rng.CHUNK, n_paths - s) for s in starts]
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(draw_chunk, range(len(starts)), sizes))
    else:
        parts = [draw_chunk(c, s) for c, s in enumerate(sizes)]
    dW1 = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, K, dx))
    dW2_sub = np.concatenate([p[1] for p in parts]) if parts else np.zeros((0, K, m, dw))

    def merge(idx):
        paths = [p[idx][0] + s for p, s in zip(parts, starts)]
        return (np.concatenate(paths).astype(int) if paths else np.zeros(0, int),
                np.concatenate([p[idx][1] for p in parts]) if parts else np.zeros(0),
                np.concatenate([p[idx][2] for p in parts]).astype(int) if parts else np.zeros(0, int))

    j1, j2 = merge(2), merge(3)
    counts1 = np.zeros((n_paths, K, m1))
    if m1:
        np.add.at(counts1, (j1[0], _bin(j1[1], grid), j1[2]), 1.0)
    mm = dW2_sub.shape[2]
    counts2_sub = np.zeros((n_paths, K * mm, m2))
    if m2:
        np.add.at(counts2_sub, (j2[0], _bin(j2[1], grid, mm), j2[2]), 1.0)
    counts2_sub = counts2_sub.reshape(n_paths, K, mm, m2)
    return NoiseEnsemble(grid, seed, eps, mm, dW1, dW2_sub, j1, j2, counts1, counts2_sub)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"numerical overflow in {what}")


def simulate_slow(spec: ModelSpec, grid: GridSpec, noise: NoiseEnsemble, x0=None) -> np.ndarray:
    """Slow trajectories, shape ``(n_paths, n_steps+1, d_x)``.

    ``X_{k+1} = e^{A dt} X_k + e^{A dt/2} (R dW1_k + sum of jumps - comp1 dt)``.
    ``x0`` may be a vector or a per-path ``(n_paths, d_x)`` array.
    """
    n, K, dt = noise.n_paths, grid.n_steps, grid.dt
    E, Eh = expm(spec.ops.A * dt), expm(spec.ops.A * dt / 2)
    incr = noise.dW1 @ spec.ops.R.T
    if spec.nu1.n_marks:
        incr = incr + noise.counts1 @ spec.nu1.marks - spec.nu1.compensator * dt
    incr = incr @ Eh.T
    X = np.empty((n, K + 1, spec.dx))
    X[:, 0] = spec.x0 if x0 is None else x0
    for k in range(K):
        X[:, k + 1] = X[:, k] @ E.T + incr[:, k]
    _check_finite(X, "simulate_slow")
    return X


def simulate_fast(spec: ModelSpec, grid: GridSpec, noise: NoiseEnsemble, X, q0=None) -> np.ndarray:
    """Fast trajectories on the slow grid, shape ``(n_paths, n_steps+1, d_q)``.

    On each sub-step of own-clock length ``h`` with ``X`` frozen at the left
    slow node: ``Q <- e^{hB}(Q + h F(X, Q)) + e^{hB/2}(G dW2/sqrt(eps) + jumps - comp2 h)``.
    ``X`` may be a full trajectory array or a single frozen vector.
    """
    n, K, dt, eps = noise.n_paths, grid.n_steps, grid.dt, noise.epsilon
    m = noise.substeps
    h = dt / (eps * m)
    if h > spec.max_stiffness:
        raise StiffnessError(f"fast step {h:.3g} exceeds max_stiffness {spec.max_stiffness}")
    B, G = spec.ops.B, spec.ops.G
    E, Eh = expm(B * h), expm(B * h / 2)
    F = spec.funcs.F
    f_active = spec.coeffs.F.name != "zero"
    X = np.asarray(X, dtype=float)
    frozen = X.ndim == 1
    Q = np.empty((n, K + 1, spec.dq))
    q = np.broadcast_to(spec.q0 if q0 is None else np.asarray(q0, float), (n, spec.dq)).copy()
    Q[:, 0] = q
    scale = 1.0 / math.sqrt(eps)
    comp = spec.nu2.compensator * h
    for k in range(K):
        x = X if frozen else X[:, k]
        noise_k = (noise.dW2_sub[:, k] @ G.T) * scale
        if spec.nu2.n_marks:
            noise_k = noise_k + noise.counts2_sub[:, k] @ spec.nu2.marks - comp
        noise_k = noise_k @ Eh.T
        for i in range(m):
            drift = q + h * F(x, q) if f_active else q
            q = drift @ E.T + noise_k[:, i]
        Q[:, k + 1] = q
    _check_finite(Q, "simulate_fast")
    return Q


@dataclass
class ForwardEnsemble:
    grid: GridSpec
    noise: NoiseEnsemble
    X: np.ndarray
    Q: np.ndarray = None

    @property
    def n_paths(self):
        return self.X.shape[0]


def simulate(spec: ModelSpec, grid: GridSpec, n_paths: int, seed: int, epsilon: float = None,
             fast: bool = True, x0=None, threads: int = 1) -> ForwardEnsemble:
    """Sample noise and run the slow (and optionally fast) equation."""
    eps = spec.epsilon if epsilon is None else epsilon
    noise = sample_noise(spec, grid, n_paths, seed, epsilon=eps, fast=fast, threads=threads)
    X = simulate_slow(spec, grid, noise, x0=x0)
    Q = simulate_fast(spec, grid, noise, X) if fast else None
    return ForwardEnsemble(grid, noise, X, Q)


def simulate_frozen_fast(spec: ModelSpec, frozen_x, grid: GridSpec, seed: int, n_paths: int = 1,
                         q0=None, threads: int = 1):
    """Trajectories of the fast equation on its own clock with ``x`` frozen.

    Identical to :func:`simulate_fast` at ``epsilon = 1`` with ``X`` constant.
    Returns ``(Q, noise)``.
    """
    noise = sample_noise(spec, grid, n_paths, seed, epsilon=1.0, slow=False, threads=threads)
    x = np.asarray(frozen_x, dtype=float).reshape(spec.dx)
    return simulate_fast(spec, grid, noise, x, q0=q0), noise


def contraction_check(spec: ModelSpec, q, q_prime, frozen_x, grid: GridSpec, seed: int,
                      mu: float = None, n_pairs: int = 1) -> float:
    """Max over pairs and times of ``|dQ_t| / (e^{-mu t} |q - q'|)`` under common noise.

    ``mu`` defaults to the sampled dissipativity constant.  Returns 0 when
    ``q == q'``.
    """
    from .model import check_dissipativity

    if mu is None:
        mu = check_dissipativity(spec, rng_seed=seed).mu_hat
    q = np.atleast_2d(np.asarray(q, float))
    qp = np.atleast_2d(np.asarray(q_prime, float))
    d0 = np.linalg.norm(q - qp, axis=1)
    noise = sample_noise(spec, grid, n_pairs, seed, epsilon=1.0, slow=False)
    x = np.asarray(frozen_x, dtype=float).reshape(spec.dx)
    Qa = simulate_fast(spec, grid, noise, x, q0=np.broadcast_to(q, (n_pairs, spec.dq)))
    Qb = simulate_fast(spec, grid, noise, x, q0=np.broadcast_to(qp, (n_pairs, spec.dq)))
    dq = np.linalg.norm(Qa - Qb, axis=2)
    if np.all(dq == 0):
        return 0.0
    d0 = np.broadcast_to(d0, (n_pairs,))
    ratio = dq / (np.exp(-mu * grid.times)[None, :] * d0[:, None])
    return float(np.max(ratio[d0 > 0]))


def estimate_kappa(spec: ModelSpec, gamma_path, gamma_prime_path, grid: GridSpec, seed: int,
                   mu: float = None, epsilon: float = None, q0=None) -> float:
    """Smallest ``kappa`` with ``|Q_t - Q'_t| <= kappa * int_0^t e^{-mu(t-s)/eps} |G_s - G'_s| ds/eps``.

    ``Q`` and ``Q'`` are driven by input paths ``G`` and ``G'`` (shape
    ``(n_steps+1, d_x)`` or ``(n, n_steps+1, d_x)``) under common fast noise.
    The integral uses the left-point rule on the fast sub-grid, matching
    the scheme.
    """
    from .model import check_dissipativity

    if mu is None:
        mu = check_dissipativity(spec, rng_seed=seed).mu_hat
    eps = spec.epsilon if epsilon is None else float(epsilon)
    g = np.asarray(gamma_path, float)
    gp = np.asarray(gamma_prime_path, float)
    if g.ndim == 2:
        g, gp = g[None], gp[None]
    n = g.shape[0]
    noise = sample_noise(spec, grid, n, seed, epsilon=eps, slow=False)
    Qa = simulate_fast(spec, grid, noise, g, q0=q0)
    Qb = simulate_fast(spec, grid, noise, gp, q0=q0)
    dq = np.linalg.norm(Qa - Qb, axis=2)
    if np.all(dq == 0):
        return 0.0
    m = noise.substeps
    h = grid.dt / (eps * m)
    dg = np.linalg.norm(g - gp, axis=2)[:, :-1]
    # one slow step of the integral: sum_i e^{-mu h (m - i)} h |dG_k|, then decay
    w_step = h * np.sum(np.exp(-mu * h * np.arange(m, 0, -1)))
    decay = math.exp(-mu * h * m)
    bound = np.zeros_like(dq)
    for k in range(grid.n_steps):
        bound[:, k + 1] = decay * bound[:, k] + w_step * dg[:, k]
    mask = bound > 0
    if np.any(dq[~mask] > 0):
        return math.inf
    return float(np.max(dq[mask] / bound[mask])) if np.any(mask) else 0.0
