"""Doléans-Dade exponentials for Wiener plus finite-activity jump integrands,
measure-change reweighting and integrability checks.

A tilt has Wiener integrands ``beta1`` (against W1) and ``beta2`` (against
W2) and jump intensity multipliers ``gamma1`` (per nu1 mark) and ``gamma2``
(per nu2 mark, whose events arrive at rate ``lambda/eps``).  Integrands are
evaluated at the left node of each step, so they are predictable; the
Wiener integral reuses the simulation's own increments.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec

log = logging.getLogger(__name__)


class ESSWarning(RuntimeWarning):
    pass


class MeasureChangeError(ValueError):
    pass


def _as_fn(value, dim):
    if value is None:
        return None
    if callable(value):
        return value
    arr = np.broadcast_to(np.asarray(value, float).reshape(-1), (dim,)) if dim else np.zeros(0)
    return lambda t, x, q: np.broadcast_to(arr, (x.shape[0], dim))


@dataclass
class GirsanovSpec:
    """Predictable integrands, each a constant or a callable ``(t, x, q) -> (n, dim)``.

    ``joint`` may instead return all four at once.  Declared bounds feed
    :func:`check_uniform_integrability`.
    """

    dx: int
    dw: int
    m1: int
    m2: int
    beta1: object = None
    beta2: object = None
    gamma1: object = None
    gamma2: object = None
    joint: object = None
    epsilon: float = 1.0
    beta_bound: float = None
    gamma_min: float = None
    gamma_max: float = None
    label: str = ""

    @classmethod
    def for_model(cls, spec: ModelSpec, **kw):
        return cls(spec.dx, spec.dw, spec.nu1.n_marks, spec.nu2.n_marks, **kw)

    @property
    def measure_ids(self):
        ids = []
        if self.joint is not None or self.gamma1 is not None:
            ids.append(1)
        if self.joint is not None or self.gamma2 is not None:
            ids.append(2)
        return ids

    def integrands(self, t, x, q):
        n = x.shape[0]
        if self.joint is not None:
            return self.joint(t, x, q)
        out = []
        for val, dim, default in ((self.beta1, self.dx, 0.0), (self.beta2, self.dw, 0.0),
                                  (self.gamma1, self.m1, 1.0), (self.gamma2, self.m2, 1.0)):
            f = _as_fn(val, dim)
            out.append(np.full((n, dim), default) if f is None else np.asarray(f(t, x, q), float).reshape(n, dim))
        return tuple(out)


@dataclass
class WeightPath:
    log_weight: np.ndarray
    jump_factors: list = field(default_factory=list)

    @property
    def weight(self):
        return np.exp(self.log_weight[:, -1])


def doleans_dade(gspec: GirsanovSpec, ensemble, grid, spec: ModelSpec = None, keep_jumps=False) -> WeightPath:
    """``log E_t`` along every path, shape ``(n, n_steps+1)``.

    Per step: ``b.dW - |b|^2 dt/2 + sum (1 - G) lambda dt + sum dN log G`` for
    each noise source, with the ``N2`` intensity ``lambda/eps``.
    """
    noise = ensemble.noise
    n, K, dt = noise.n_paths, grid.n_steps, grid.dt
    lam1 = np.zeros(gspec.m1) if spec is None else spec.nu1.intensities
    lam2 = np.zeros(gspec.m2) if spec is None else spec.nu2.intensities / gspec.epsilon
    X = ensemble.X
    Q = ensemble.Q if ensemble.Q is not None else np.zeros((n, K + 1, 0))
    dW2 = noise.dW2
    c2 = noise.counts2
    L = np.zeros((n, K + 1))
    jumps = []
    for k in range(K):
        t = grid.times[k]
        b1, b2, g1, g2 = gspec.integrands(t, X[:, k], Q[:, k])
        inc = np.sum(b1 * noise.dW1[:, k], axis=1) - 0.5 * np.sum(b1 * b1, axis=1) * dt
        inc += np.sum(b2 * dW2[:, k], axis=1) - 0.5 * np.sum(b2 * b2, axis=1) * dt
        for g, lam, cnt in ((g1, lam1, noise.counts1[:, k]), (g2, lam2, c2[:, k])):
            if g.shape[1] == 0:
                continue
            inc += np.sum((1.0 - g) * lam, axis=1) * dt
            hit = cnt > 0
            if np.any(hit):
                if np.any(g[hit] <= 0):
                    raise MeasureChangeError("jump multiplier Gamma <= 0 at a jump: measure change undefined")
                lg = np.where(hit, np.log(np.where(hit, g, 1.0)), 0.0)
                inc += np.sum(cnt * lg, axis=1)
                if keep_jumps:
                    jumps.append((k, np.argwhere(hit), g[hit]))
        L[:, k + 1] = L[:, k] + inc
    return WeightPath(L, jumps)


def doleans_dade_product(gspec: GirsanovSpec, ensemble, grid, spec: ModelSpec):
    """Brute-force ``E_T = exp(M_T - <M^c>_T/2) prod (1 + dM) exp(-dM)`` per path.

    ``M`` is assembled explicitly from its continuous part and its
    compensated jump part, looping over the recorded jump events.
    """
    noise = ensemble.noise
    n, K, dt = noise.n_paths, grid.n_steps, grid.dt
    lam1 = spec.nu1.intensities
    lam2 = spec.nu2.intensities / gspec.epsilon
    Mc = np.zeros(n)
    qv = np.zeros(n)
    comp = np.zeros(n)
    ints = []
    for k in range(K):
        q = ensemble.Q[:, k] if ensemble.Q is not None else np.zeros((n, 0))
        b1, b2, g1, g2 = gspec.integrands(grid.times[k], ensemble.X[:, k], q)
        Mc += np.sum(b1 * noise.dW1[:, k], axis=1) + np.sum(b2 * noise.dW2[:, k], axis=1)
        qv += (np.sum(b1 * b1, axis=1) + np.sum(b2 * b2, axis=1)) * dt
        comp += np.sum((g1 - 1.0) * lam1, axis=1) * dt + np.sum((g2 - 1.0) * lam2, axis=1) * dt
        ints.append((g1, g2))
    Md_jumps = np.zeros(n)
    log_prod = np.zeros(n)
    for events, which in ((noise.jumps1, 0), (noise.jumps2, 1)):
        paths, times, marks = events
        for p, t, m in zip(paths, times, marks):
            k = min(max(int(math.ceil(t / dt)) - 1, 0), K - 1)
            dM = ints[k][which][p, m] - 1.0
            Md_jumps[p] += dM
            log_prod[p] += math.log1p(dM) - dM
    M = Mc + Md_jumps - comp
    return np.exp(M - 0.5 * qv + log_prod)


@dataclass
class Reweighted:
    estimate: float
    se: float
    ess: float

    def __iter__(self):
        return iter((self.estimate, self.se))


def effective_sample_size(w):
    w = np.asarray(w, float)
    return float(w.sum() ** 2 / np.sum(w * w)) if np.any(w) else 0.0


def reweighted_mean(values, weights, ess_fraction: float = 0.1) -> Reweighted:
    """``E~[f] = E[E_T f]`` with SE from the weighted sample; warns on low ESS."""
    f = np.asarray(values, float)
    w = np.asarray(weights, float)
    wf = w * f
    n = f.size
    ess = effective_sample_size(w)
    if ess < ess_fraction * n:
        warnings.warn(f"effective sample size {ess:.0f} below {ess_fraction:g} n = {ess_fraction * n:.0f}",
                      ESSWarning, stacklevel=2)
    return Reweighted(float(wf.mean()), float(wf.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan, ess)


def reweighted_functional(fn, gspec: GirsanovSpec, ensemble, grid, spec: ModelSpec, **kw) -> Reweighted:
    """Apply ``fn(ensemble) -> (n,)`` and reweight by the tilt's terminal weight."""
    w = doleans_dade(gspec, ensemble, grid, spec).weight
    return reweighted_mean(fn(ensemble), w, **kw)


@dataclass
class UIReport:
    passed: bool
    exponent: float
    gamma_min: float
    reason: str = ""


def check_uniform_integrability(beta_bound: float, gamma_min, gamma_max, intensities, horizon: float = 1.0,
                                l2_bound: float = None) -> UIReport:
    """Novikov-type exponent ``beta^2 T/2 + T sum_i sup|Gamma_i - 1|^2 lambda_i``.

    ``l2_bound`` replaces the jump sum by a declared bound ``B`` on
    ``(sum_i |Gamma_i - 1|^2 lambda_i)^(1/2)``, giving ``beta^2 T/2 + B^2 T``.
    Passes when the exponent is finite and ``min Gamma > 0``.
    """
    lam = np.asarray(intensities, float).reshape(-1)
    gmin = np.broadcast_to(np.asarray(gamma_min if gamma_min is not None else 1.0, float), lam.shape)
    gmax = np.broadcast_to(np.asarray(gamma_max if gamma_max is not None else 1.0, float), lam.shape)
    beta = 0.0 if beta_bound is None else float(beta_bound)
    if l2_bound is not None:
        jump = float(l2_bound) ** 2
    else:
        dev = np.maximum(np.abs(gmax - 1.0), np.abs(1.0 - gmin))
        jump = float(np.sum(dev ** 2 * lam))
    exponent = 0.5 * beta ** 2 * horizon + jump * horizon
    g_lo = float(np.min(gmin)) if lam.size else 1.0
    if not math.isfinite(exponent):
        return UIReport(False, exponent, g_lo, "exponent not finite")
    if lam.size and g_lo <= 0:
        return UIReport(False, exponent, g_lo, "Gamma_min <= 0: a jump can send the exponential to zero")
    return UIReport(True, exponent, g_lo)


def check_spec_integrability(gspec: GirsanovSpec, spec: ModelSpec, horizon: float = 1.0) -> UIReport:
    lam = np.concatenate([spec.nu1.intensities, spec.nu2.intensities / gspec.epsilon])
    return check_uniform_integrability(gspec.beta_bound, gspec.gamma_min, gspec.gamma_max, lam, horizon)


def control_measure(spec: ModelSpec, policy, epsilon: float = None) -> GirsanovSpec:
    """Tilt induced by a feedback ``policy(t, x, q) -> control index per path``.

    ``beta1 = R^{-1} b``, ``gamma1 = r(., w_i)``, ``beta2 = rho/sqrt(eps)``,
    ``gamma2 = gamma(., w_j)``.
    """
    eps = spec.epsilon if epsilon is None else float(epsilon)
    f = spec.funcs
    cs = spec.coeffs.control_set
    Rinv = spec.ops.R_inv
    sq = math.sqrt(eps)
    gam2 = np.array([[f.gamma(a, w) for w in spec.nu2.marks] for a in cs]).reshape(len(cs), spec.nu2.n_marks)
    rho = np.array([f.rho(a) for a in cs]).reshape(len(cs), spec.dw)

    def joint(t, x, q):
        n = x.shape[0]
        idx = np.broadcast_to(np.asarray(policy(t, x, q), int), (n,))
        b1 = np.zeros((n, spec.dx))
        g1 = np.ones((n, spec.nu1.n_marks))
        for j in np.unique(idx):
            sel = idx == j
            a = cs[j]
            b1[sel] = f.b(x[sel], q[sel], a) @ Rinv.T
            for i, w in enumerate(spec.nu1.marks):
                g1[sel, i] = f.r(x[sel], q[sel], a, w)
        return b1, rho[idx] / sq, g1, gam2[idx]

    bmax = 0.0
    r_lo, r_hi = [], []
    if spec.coeffs.constants.get("M_prime") is not None:
        bmax = float(np.linalg.norm(Rinv, 2)) * spec.coeffs.constants["M_prime"] + \
            spec.coeffs.constants["M_prime"] / sq
    return GirsanovSpec(spec.dx, spec.dw, spec.nu1.n_marks, spec.nu2.n_marks, joint=joint, epsilon=eps,
                        beta_bound=bmax if bmax else None,
                        gamma_min=spec.coeffs.constants.get("eta"), gamma_max=spec.coeffs.constants.get("C_r"),
                        label="control")


def constant_policy(j):
    return lambda t, x, q: np.full(x.shape[0], j, dtype=int)


def inverse_weight_moments(log_weight_T, ps=(1, 2, 3)):
    """``E~[E_T^{-p}] = E[E_T^{1-p}]`` for each ``p``, plus ``E~[E_T^{-1} E_T]``."""
    lw = np.asarray(log_weight_T, float)
    w = np.exp(lw)
    out = {"identity": float(np.mean(w * np.exp(-lw)))}
    for p in ps:
        out[f"p{p}"] = float(np.mean(np.exp((1 - p) * lw)))
    return out


# ---------------------------------------------------------------------------
# Piecewise-constant tilts on the slow noise (dual schedules)
# ---------------------------------------------------------------------------

@dataclass
class CellStats:
    """Per-path sums of W1 increments and N1 counts over ``n_cells`` time cells."""

    dW: np.ndarray
    dN: np.ndarray
    dt: np.ndarray
    step_cell: np.ndarray


def cell_statistics(ensemble, grid, n_cells: int) -> CellStats:
    K = grid.n_steps
    if n_cells < 1 or n_cells > K:
        raise ValueError("need 1 <= n_cells <= n_steps")
    cell = np.minimum((np.arange(K) * n_cells) // K, n_cells - 1)
    noise = ensemble.noise
    n = noise.n_paths
    dW = np.zeros((n, n_cells, noise.dW1.shape[2]))
    dN = np.zeros((n, n_cells, noise.counts1.shape[2]))
    dt = np.zeros(n_cells)
    for c in range(n_cells):
        sel = cell == c
        dW[:, c] = noise.dW1[:, sel].sum(axis=1)
        dN[:, c] = noise.counts1[:, sel].sum(axis=1)
        dt[c] = grid.dt * sel.sum()
    return CellStats(dW, dN, dt, cell)


def piecewise_log_weight(stats: CellStats, beta, gamma, intensities):
    """Terminal ``log E_T`` for cell-constant ``beta (C, d)`` and ``gamma (C, m1)``."""
    beta = np.asarray(beta, float)
    gamma = np.asarray(gamma, float)
    lam = np.asarray(intensities, float)
    if gamma.size and np.any(gamma <= 0):
        raise MeasureChangeError("jump multiplier Gamma <= 0")
    lw = np.einsum("ncd,cd->n", stats.dW, beta) - 0.5 * np.sum(np.sum(beta ** 2, axis=1) * stats.dt)
    if lam.size:
        lw += np.sum(np.sum((1.0 - gamma) * lam, axis=1) * stats.dt)
        lw += np.einsum("ncm,cm->n", stats.dN, np.log(gamma))
    return lw
