"""Experiments tying the layers together: the epsilon sweep, the value
function identity, the Fenchel dual of ``lambda`` and the reduced control
representation, plus dyadic discretization diagnostics.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import rng
from .bsde import RegressionBasis, solve_full_bsde, solve_reduced_bsde
from .ergodic import LambdaMap
from .forward import GridSpec, simulate
from .girsanov import (ESSWarning, cell_statistics, constant_policy, control_measure, doleans_dade,
                       effective_sample_size, piecewise_log_weight)
from .hamiltonian import DriverInput, build_driver
from .model import FunctionSpec, ModelSpec

log = logging.getLogger(__name__)

DEFAULT_EPSILONS = (1.0, 0.5, 0.25, 0.1, 0.05)
PASS, INCONCLUSIVE, FAIL = "pass", "inconclusive", "fail"
# relative slack for comparisons whose SE collapses to roundoff
ROUNDOFF = 1e-10


class WidenBoxError(ValueError):
    """The conjugate infimum sits on the boundary of the cached (z, u) box."""


def exact_lambda_map(spec: ModelSpec, driver=None) -> LambdaMap:
    """``lambda = psi(x, ., z, 0, u, 0)`` for drivers that ignore ``(q, zeta, theta)``."""
    drv = build_driver(spec) if driver is None else driver
    if any(drv.depends_on(a) for a in ("q", "zeta", "theta")):
        raise ValueError("driver depends on the fast variables; lambda is not psi")

    def fn(x, z, u):
        return drv(DriverInput.build(spec, n=x.shape[0], x=x, z=z, u=u))

    return LambdaMap.pointwise(spec.dx, spec.nu1.n_marks, fn, spec.nu1.intensities)


# ---------------------------------------------------------------------------
# Epsilon sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    epsilons: list
    Y0_eps: list
    se_eps: list
    Y0_bar: tuple
    se_bar: float
    gaps: list
    combined_se: list
    partition_N: int = None
    verdict: str = INCONCLUSIVE
    trend_violations: list = field(default_factory=list)
    tol: float = 1e-2
    notes: list = field(default_factory=list)

    def rows(self):
        """``(epsilon, Y0_eps, ci_lo, ci_hi, se, Y0_bar, gap, combined_se)`` per epsilon."""
        return [[e, y, ci[0], ci[1], s, self.Y0_bar[0], g, c]
                for e, (y, ci), s, g, c in zip(self.epsilons, self.Y0_eps, self.se_eps, self.gaps, self.combined_se)]

    def to_dict(self):
        return {"epsilons": self.epsilons, "Y0_eps": [[y, list(ci)] for y, ci in self.Y0_eps],
                "se_eps": self.se_eps, "Y0_bar": [self.Y0_bar[0], list(self.Y0_bar[1])], "se_bar": self.se_bar,
                "gaps": self.gaps, "combined_se": self.combined_se, "partition_N": self.partition_N,
                "verdict": self.verdict, "trend_violations": self.trend_violations, "tol": self.tol,
                "notes": self.notes}


def sweep_verdict(gaps, cse, tol):
    """Trend violations, then the verdict.

    A violation is a gap that grows beyond three combined SEs of the two
    neighbours; the last gap must be within ``max(3 cSE, tol)``.
    """
    viol = []
    for i in range(len(gaps) - 1):
        slack = 3.0 * math.hypot(cse[i], cse[i + 1])
        if gaps[i + 1] > gaps[i] + slack:
            viol.append(i + 1)
    if viol:
        return FAIL, viol
    if gaps[-1] <= max(3.0 * cse[-1], tol):
        return PASS, viol
    return INCONCLUSIVE, viol


def epsilon_sweep(spec: ModelSpec, epsilons=DEFAULT_EPSILONS, grid: GridSpec = None, n_paths: int = 10000,
                  lambda_map=None, basis: RegressionBasis = None, seed: int = 0, tol: float = 1e-2,
                  driver=None, partition_N: int = None, threads: int = 1) -> SweepResult:
    """``Y^eps_0`` per epsilon against ``Ybar_0``, with common slow noise.

    ``lambda_map`` defaults to the exact map when the driver ignores the fast
    variables.  The combined SE of a gap is ``sqrt(se_eps^2 + se_bar^2)``.
    """
    eps = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be strictly decreasing")
    grid = grid or GridSpec(200, spec.horizon)
    drv = build_driver(spec) if driver is None else driver
    lm = exact_lambda_map(spec, drv) if lambda_map is None else lambda_map
    slow = simulate(spec, grid, n_paths, seed, fast=False, threads=threads)
    red = solve_reduced_bsde(spec, grid, slow, lm, basis=basis, seed=seed)
    notes = list(red.notes)
    ys, ses, gaps, cse = [], [], [], []
    for e in eps:
        ens = simulate(spec, grid, n_paths, seed, epsilon=e, threads=threads)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sol = solve_full_bsde(spec, grid, ens, driver=drv, basis=basis, store_fields=False,
                                  keep_slices={0}, seed=seed)
        notes.extend(f"eps={e:g}: {w.message}" for w in caught)
        ys.append((sol.Y0, sol.ci))
        ses.append(sol.se)
        gaps.append(abs(sol.Y0 - red.Y0))
        cse.append(math.hypot(sol.se, red.se))
        log.info("sweep eps=%g Y0=%.6g gap=%.3g cSE=%.3g", e, sol.Y0, gaps[-1], cse[-1])
    verdict, viol = sweep_verdict(gaps, cse, tol)
    return SweepResult(eps, ys, ses, (red.Y0, red.ci), red.se, gaps, cse, partition_N, verdict, viol, tol, notes)


# ---------------------------------------------------------------------------
# Value function
# ---------------------------------------------------------------------------

def default_policies(spec: ModelSpec):
    """Constant policies for every control, then sign feedbacks on ``x_1`` and ``q_1``.

    Feedbacks switch between the first and last control.
    """
    n_ctrl = spec.coeffs.control_set.shape[0]
    pols = [(f"const{j}", constant_policy(j)) for j in range(n_ctrl)]
    if n_ctrl > 1:
        last = n_ctrl - 1
        pols.append(("x_pos_last", lambda t, x, q: np.where(x[:, 0] > 0, last, 0)))
        pols.append(("x_pos_first", lambda t, x, q: np.where(x[:, 0] > 0, 0, last)))
        if spec.dq:
            pols.append(("q_pos_last", lambda t, x, q: np.where(q[:, 0] > 0, last, 0)))
    return pols


@dataclass
class PolicyValue:
    name: str
    value: float
    se: float
    ess: float


@dataclass
class ValueResult:
    bsde: float
    bsde_se: float
    bsde_ci: tuple
    policies: list
    epsilon: float

    @property
    def best(self) -> PolicyValue:
        return min(self.policies, key=lambda p: p.value)

    @property
    def ordering_ok(self):
        """BSDE value below every policy cost up to three combined SEs."""
        return all(self.bsde <= p.value + 3 * math.hypot(p.se, self.bsde_se) + ROUNDOFF * (1.0 + abs(p.value))
                   for p in self.policies)

    def to_dict(self):
        return {"bsde": self.bsde, "bsde_se": self.bsde_se, "bsde_ci": list(self.bsde_ci),
                "epsilon": self.epsilon, "ordering_ok": self.ordering_ok,
                "policies": [p.__dict__ for p in self.policies], "best": self.best.name}


def _cv_mean(values, controls):
    """Mean of ``values`` with zero-mean ``controls (n, c)`` regressed out."""
    y = np.asarray(values, float)
    n = y.size
    C = np.asarray(controls, float).reshape(n, -1)
    keep = np.std(C, axis=0) > 0
    C = C[:, keep]
    if C.shape[1]:
        Cc = C - C.mean(axis=0)
        beta, *_ = np.linalg.lstsq(Cc, y - y.mean(), rcond=None)
        y = y - C @ beta
    return float(y.mean()), float(y.std(ddof=1) / math.sqrt(n))


def policy_cost(spec: ModelSpec, grid: GridSpec, ensemble, policy, epsilon=None, sol=None):
    """``E^{eps,a}[sum l dt + h(X_T)]`` by reweighting reference paths.

    Running costs at ``t_k`` use ``E_{t_k}``; ``E_T - 1`` is a control
    variate, and so is the tilted martingale of ``sol``'s fields when given.
    """
    eps = ensemble.noise.epsilon if epsilon is None else epsilon
    g = control_measure(spec, policy, eps)
    wp = doleans_dade(g, ensemble, grid, spec)
    W = np.exp(wp.log_weight)
    X, Q = ensemble.X, ensemble.Q
    cs = spec.coeffs.control_set
    l = spec.funcs.l
    cost = W[:, -1] * spec.funcs.h(X[:, -1])
    for k in range(grid.n_steps):
        idx = np.asarray(policy(grid.times[k], X[:, k], Q[:, k]), int)
        lk = np.empty(X.shape[0])
        for j in np.unique(idx):
            sel = idx == j
            lk[sel] = l(X[sel, k], Q[sel, k], cs[j])
        cost += W[:, k] * lk * grid.dt
    controls = [W[:, -1] - 1.0]
    if sol is not None and sol.Z is not None:
        controls.append(W[:, -1] * tilted_martingale(g, ensemble, grid, spec, sol))
    ess = effective_sample_size(W[:, -1])
    if ess < 0.1 * W.shape[0]:
        warnings.warn(f"policy reweighting ESS {ess:.0f} below 0.1 n", ESSWarning, stacklevel=2)
    est, se = _cv_mean(cost, np.column_stack(controls))
    return est, se, ess


def tilted_martingale(gspec, ensemble, grid, spec: ModelSpec, sol):
    """``sum_k fields_k . (dM_k - compensator drift under the tilt)``; zero mean under the tilt."""
    noise = ensemble.noise
    n, dt = noise.n_paths, grid.dt
    lam1 = spec.nu1.intensities
    lam2 = spec.nu2.intensities / gspec.epsilon
    out = np.zeros(n)
    dW2, c2 = noise.dW2, noise.counts2
    for k in range(grid.n_steps):
        b1, b2, g1, g2 = gspec.integrands(grid.times[k], ensemble.X[:, k], ensemble.Q[:, k])
        out += np.sum(sol.Z[k] * (noise.dW1[:, k] - b1 * dt), axis=1)
        if sol.Xi is not None and sol.Xi.shape[2]:
            out += np.sum(sol.Xi[k] * (dW2[:, k] - b2 * dt), axis=1)
        if sol.U is not None and sol.U.shape[2]:
            out += np.sum(sol.U[k] * (noise.counts1[:, k] - g1 * lam1 * dt), axis=1)
        if sol.Theta is not None and sol.Theta.shape[2]:
            out += np.sum(sol.Theta[k] * (c2[:, k] - g2 * lam2 * dt), axis=1)
    return out


def value_function(spec: ModelSpec, grid: GridSpec = None, n_paths: int = 10000, basis: RegressionBasis = None,
                   seed: int = 0, policies=None, epsilon: float = None, threads: int = 1) -> ValueResult:
    """Hamiltonian-driver BSDE value against brute-force policy costs on the same paths."""
    grid = grid or GridSpec(100, spec.horizon)
    eps = spec.epsilon if epsilon is None else float(epsilon)
    ens = simulate(spec, grid, n_paths, seed, epsilon=eps, threads=threads)
    drv = build_driver(spec, [FunctionSpec("hamiltonian")])
    sol = solve_full_bsde(spec, grid, ens, driver=drv, basis=basis, seed=seed)
    pols = default_policies(spec) if policies is None else policies
    rows = []
    for name, pol in pols:
        est, se, ess = policy_cost(spec, grid, ens, pol, eps, sol)
        rows.append(PolicyValue(name, est, se, ess))
    return ValueResult(sol.Y0, sol.se, sol.ci, rows, eps)


# ---------------------------------------------------------------------------
# Fenchel conjugate
# ---------------------------------------------------------------------------

@dataclass
class DualSpec:
    """Dual grid: covectors ``p_grid (P, dx)``, mark vectors ``v_grid (V, m1)``.

    Every point must satisfy ``|p| <= L_z`` and ``||1 - v||_{L2(nu1)} <= L_u``.
    """

    p_grid: np.ndarray
    v_grid: np.ndarray
    L_z: float
    L_u: float
    intensities: np.ndarray
    n_cells: int = 4

    def __post_init__(self):
        self.p_grid = np.atleast_2d(np.asarray(self.p_grid, float))
        self.intensities = np.asarray(self.intensities, float).reshape(-1)
        m1 = self.intensities.size
        v = np.asarray(self.v_grid, float)
        self.v_grid = v.reshape(-1, m1) if m1 else np.zeros((1, 0))
        if self.p_grid.shape[0] == 0 or self.v_grid.shape[0] == 0:
            raise ValueError("empty dual grid")
        slack = 1e-9
        if np.any(np.linalg.norm(self.p_grid, axis=1) > self.L_z + slack):
            raise ValueError("p_grid point exceeds |p| <= L_z")
        if np.any(self.v_norm() > self.L_u + slack):
            raise ValueError("v_grid point exceeds ||1 - v|| <= L_u")
        if self.n_cells < 1:
            raise ValueError("n_cells must be positive")

    def v_norm(self):
        return np.sqrt(np.sum((1.0 - self.v_grid) ** 2 * self.intensities, axis=1))

    @classmethod
    def regular(cls, dx, intensities, L_z, L_u, n_p=5, n_v=3, n_cells=4):
        """Axis-aligned ``p`` in ``[-L_z, L_z]`` per coordinate (clipped to the ball) and ``v`` on a segment."""
        lam = np.asarray(intensities, float).reshape(-1)
        ps = np.linspace(-L_z, L_z, n_p) if L_z > 0 else np.zeros(1)
        P = np.array(list(itertools.product(ps, repeat=dx))).reshape(-1, dx)
        P = P[np.linalg.norm(P, axis=1) <= L_z + 1e-12]
        if lam.size:
            radius = L_u / math.sqrt(lam.sum()) if L_u > 0 else 0.0
            dv = np.linspace(-radius, radius, n_v) if radius > 0 else np.zeros(1)
            V = np.array([1.0 - d for d in dv])[:, None] * np.ones(lam.size)
            V = V[np.all(V > 0, axis=1)]
        else:
            V = np.zeros((1, 0))
        return cls(P, V, L_z, L_u, lam, n_cells)

    def pairs(self):
        return list(itertools.product(range(self.p_grid.shape[0]), range(self.v_grid.shape[0])))


@dataclass
class ConjugateTable:
    """``lambda*`` on x-nodes times the dual grid; ``-inf`` outside the bounds."""

    x_axes: list
    dual: DualSpec
    values: np.ndarray
    argmin_on_boundary: np.ndarray

    def at(self, x, pair):
        """``lambda*(x, p_i, v_j)`` for ``x (n, dx)``, linear in x with clamping."""
        i, j = pair
        sub = self.values[..., i, j]
        x = np.atleast_2d(np.asarray(x, float))
        live = [d for d, a in enumerate(self.x_axes) if a.size > 1]
        if not live:
            return np.full(x.shape[0], float(sub.reshape(-1)[0]))
        lo = np.array([self.x_axes[d][0] for d in live])
        hi = np.array([self.x_axes[d][-1] for d in live])
        interp = RegularGridInterpolator([self.x_axes[d] for d in live], sub.reshape([self.x_axes[d].size for d in live]))
        return interp(np.clip(x[:, live], lo, hi))

    def rows(self):
        """``(x.., p.., v.., lambda*)`` in C order."""
        out = []
        for xi in itertools.product(*[range(a.size) for a in self.x_axes]):
            x = [float(self.x_axes[d][k]) for d, k in enumerate(xi)]
            for i, j in self.dual.pairs():
                out.append(x + self.dual.p_grid[i].tolist() + self.dual.v_grid[j].tolist()
                           + [float(self.values[xi + (i, j)])])
        return out


def _zu_grid(lambda_map: LambdaMap):
    dx = lambda_map.dx
    axes = lambda_map.axes[dx:]
    pts = np.array(list(itertools.product(*axes)), float).reshape(-1, len(axes))
    on_bd = np.zeros(pts.shape[0], bool)
    for d, a in enumerate(axes):
        if a.size > 2:
            on_bd |= (pts[:, d] <= a[0]) | (pts[:, d] >= a[-1])
    return pts[:, :dx], pts[:, dx:], on_bd


def conjugate_at(lambda_map: LambdaMap, x, dual: DualSpec, on_boundary="raise", rel_tol=1e-9):
    """``lambda*(x, p, v)`` over the dual grid, shape ``(P, V)``.

    The infimum runs over the map's cached ``(z, u)`` nodes.  When the
    minimum is attained only on the box boundary (strictly below every
    interior node), the box is too small or the true value is ``-inf``:
    ``on_boundary="raise"`` raises :class:`WidenBoxError`, ``"neg_inf"``
    records ``-inf``.
    """
    if lambda_map.mode != "cached-grid":
        raise ValueError("conjugate needs a cached-grid lambda map")
    dx = lambda_map.dx
    Z, U, bd = _zu_grid(lambda_map)
    x = np.asarray(x, float).reshape(1, dx)
    lam = lambda_map(np.repeat(x, Z.shape[0], axis=0), Z, U)
    ip = (1.0 - dual.v_grid) * dual.intensities
    obj = -(Z @ dual.p_grid.T)[:, :, None] - (U @ ip.T)[:, None, :] - lam[:, None, None]
    out = np.empty(obj.shape[1:])
    flag = np.zeros(obj.shape[1:], bool)
    for i, j in dual.pairs():
        col = obj[:, i, j]
        best = float(col.min())
        if np.any(bd) and np.any(~bd):
            inner = float(col[~bd].min())
            if best < inner - rel_tol * (1.0 + abs(inner)):
                flag[i, j] = True
                if on_boundary == "raise":
                    raise WidenBoxError(
                        f"conjugate infimum at p={dual.p_grid[i].tolist()}, v={dual.v_grid[j].tolist()} "
                        f"attained on the (z, u) box boundary; widen the cached box")
                best = -math.inf
        out[i, j] = best
    return out, flag


def fenchel_conjugate(lambda_map: LambdaMap, x, dual: DualSpec, on_boundary="raise"):
    """One table row ``lambda*(x, ., .)``; see :func:`conjugate_at`."""
    return conjugate_at(lambda_map, x, dual, on_boundary)[0]


def conjugate_table(lambda_map: LambdaMap, dual: DualSpec, on_boundary="raise") -> ConjugateTable:
    dx = lambda_map.dx
    x_axes = [np.asarray(a, float) for a in lambda_map.axes[:dx]]
    P, V = dual.p_grid.shape[0], dual.v_grid.shape[0]
    vals = np.empty([a.size for a in x_axes] + [P, V])
    bd = np.zeros_like(vals, bool)
    for xi in itertools.product(*[range(a.size) for a in x_axes]):
        x = np.array([x_axes[d][k] for d, k in enumerate(xi)])
        vals[xi], bd[xi] = conjugate_at(lambda_map, x, dual, on_boundary)
    return ConjugateTable(x_axes, dual, vals, bd)


def biconjugate_error(lambda_map: LambdaMap, table: ConjugateTable):
    """Max over cache nodes of ``|lambda** - lambda|`` with the inf over the dual grid."""
    dx = lambda_map.dx
    Z, U, _ = _zu_grid(lambda_map)
    dual = table.dual
    ip = (1.0 - dual.v_grid) * dual.intensities
    worst = 0.0
    for xi in itertools.product(*[range(a.size) for a in table.x_axes]):
        x = np.array([table.x_axes[d][k] for d, k in enumerate(xi)]).reshape(1, dx)
        lam = lambda_map(np.repeat(x, Z.shape[0], axis=0), Z, U)
        ls = table.values[xi]
        obj = -(Z @ dual.p_grid.T)[:, :, None] - (U @ ip.T)[:, None, :] - ls[None]
        bic = obj.reshape(Z.shape[0], -1).min(axis=1)
        worst = max(worst, float(np.max(np.abs(bic - lam))))
    return worst


def conjugate_upper_bound_ok(lambda_map: LambdaMap, table: ConjugateTable, tol=1e-12):
    """``lambda*(x, p, v) <= -lambda(x, 0, 0)`` on every table entry."""
    dx, m1 = lambda_map.dx, lambda_map.m1
    for xi in itertools.product(*[range(a.size) for a in table.x_axes]):
        x = np.array([table.x_axes[d][k] for d, k in enumerate(xi)]).reshape(1, dx)
        l0 = float(lambda_map(x, np.zeros((1, dx)), np.zeros((1, m1)))[0])
        if np.any(table.values[xi] > -l0 + tol):
            return False
    return True


# ---------------------------------------------------------------------------
# Reduced control problem
# ---------------------------------------------------------------------------

@dataclass
class ScheduleValue:
    schedule: tuple
    value: float
    se: float
    ess: float
    weak_ok: bool


@dataclass
class DualResult:
    y_bar: float
    y_bar_se: float
    schedules: list
    best: ScheduleValue
    gap: float
    tol: float
    enumerated: bool
    biconjugate_error: float = math.nan
    notes: list = field(default_factory=list)

    @property
    def weak_fraction(self):
        return sum(s.weak_ok for s in self.schedules) / len(self.schedules)

    @property
    def verdict(self):
        if self.weak_fraction < 1.0:
            return FAIL
        return PASS if abs(self.gap) <= self.tol else INCONCLUSIVE

    def schedule_label(self, dual: DualSpec, s: ScheduleValue):
        return ";".join(f"p={dual.p_grid[i].tolist()},v={dual.v_grid[j].tolist()}" for i, j in s.schedule)

    def to_dict(self, dual: DualSpec = None):
        best = self.best
        d = {"y_bar": self.y_bar, "y_bar_se": self.y_bar_se, "best_value": best.value, "best_se": best.se,
             "gap": self.gap, "tol": self.tol, "weak_duality_fraction": self.weak_fraction,
             "n_schedules": len(self.schedules), "enumerated": self.enumerated,
             "biconjugate_error": self.biconjugate_error, "verdict": self.verdict, "notes": self.notes}
        if dual is not None:
            d["best_schedule"] = [{"p": dual.p_grid[i].tolist(), "v": dual.v_grid[j].tolist()} for i, j in best.schedule]
        return d


def _schedules(n_pairs, n_cells, max_schedules, seed):
    total = n_pairs ** n_cells
    if total <= max_schedules:
        return list(itertools.product(range(n_pairs), repeat=n_cells)), True
    const = [(j,) * n_cells for j in range(n_pairs)]
    gen = rng.generator(seed, "schedules")
    extra = {tuple(int(v) for v in gen.integers(0, n_pairs, n_cells)) for _ in range(max_schedules - len(const))}
    return const + sorted(extra - set(const)), False


def reduced_control_value(spec: ModelSpec, lambda_map: LambdaMap, dual: DualSpec, grid: GridSpec = None,
                          n_paths: int = 10000, seed: int = 0, table: ConjugateTable = None, tol: float = 2e-2,
                          basis: RegressionBasis = None, max_schedules: int = 4096,
                          on_boundary="raise", threads: int = 1) -> DualResult:
    """Grid infimum of ``E^{p,v}[h(X_1) - int lambda*(X, p, v) ds]`` over cell-constant schedules.

    Each schedule reweights one reference slow ensemble.  The reduced
    solution's ``Zbar, Ubar`` give the control variate
    ``sum Zbar (dW + p dt) + sum Ubar (dN - v lambda dt)``, whose tilted mean
    is zero for any schedule; ``E_T - 1`` is a second control variate.
    """
    grid = grid or GridSpec(100, spec.horizon)
    table = conjugate_table(lambda_map, dual, on_boundary) if table is None else table
    ens = simulate(spec, grid, n_paths, seed, fast=False, threads=threads)
    red = solve_reduced_bsde(spec, grid, ens, lambda_map, basis=basis, seed=seed)
    C = dual.n_cells
    stats = cell_statistics(ens, grid, C)
    pairs = dual.pairs()
    X = ens.X
    n, K, dt = X.shape[0], grid.n_steps, grid.dt
    cell = stats.step_cell
    lam1 = dual.intensities
    # per-cell integrals of lambda* along the paths, per dual pair
    Ls = np.zeros((n, C, len(pairs)))
    for pi, pr in enumerate(pairs):
        for k in range(K):
            Ls[:, cell[k], pi] += table.at(X[:, k], pr) * dt
    finite = np.all(np.isfinite(Ls), axis=(0, 1))
    # control-variate pieces per cell
    ZdW = np.zeros((n, C))
    Zdt = np.zeros((n, C, spec.dx))
    UdN = np.zeros((n, C))
    Udt = np.zeros((n, C, lam1.size))
    for k in range(K):
        c = cell[k]
        ZdW[:, c] += np.sum(red.Z[k] * ens.noise.dW1[:, k], axis=1)
        Zdt[:, c] += red.Z[k] * dt
        if lam1.size:
            UdN[:, c] += np.sum(red.U[k] * ens.noise.counts1[:, k], axis=1)
            Udt[:, c] += red.U[k] * lam1 * dt
    hX = spec.funcs.h(X[:, -1])
    # pairs where lambda* is -inf give value +inf: schedule over the rest only
    live = np.flatnonzero(finite)
    if live.size == 0:
        raise ValueError("no dual pair with a finite conjugate")
    scheds, enumerated = _schedules(live.size, C, max_schedules, seed)
    rows = []
    for s in scheds:
        s = tuple(int(live[i]) for i in s)
        P = np.array([dual.p_grid[pairs[pi][0]] for pi in s])
        V = np.array([dual.v_grid[pairs[pi][1]] for pi in s])
        lw = piecewise_log_weight(stats, -P, V, lam1)
        w = np.exp(lw)
        f = hX - sum(Ls[:, c, pi] for c, pi in enumerate(s))
        mart = ZdW.sum(axis=1) + np.einsum("ncd,cd->n", Zdt, P) + UdN.sum(axis=1) - np.einsum("ncm,cm->n", Udt, V)
        est, se = _cv_mean(w * f, np.column_stack([w - 1.0, w * mart]))
        weak = est >= red.Y0 - 3.0 * math.hypot(se, red.se) - ROUNDOFF * (1.0 + abs(red.Y0))
        rows.append(ScheduleValue(tuple((pairs[pi]) for pi in s), est, se, effective_sample_size(w), bool(weak)))
    best = min(rows, key=lambda r: r.value)
    notes = list(red.notes)
    if not enumerated:
        notes.append(f"schedules sampled: {len(rows)} of {live.size ** C}")
    if live.size < len(pairs):
        notes.append(f"{len(pairs) - live.size} dual pairs with infinite conjugate skipped")
    gap = best.value - red.Y0
    if gap > tol:
        notes.append(f"best schedule exceeds Ybar_0 by {gap:.3g}: dual grid likely too coarse")
    return DualResult(red.Y0, red.se, rows, best, gap, tol, enumerated, notes=notes)


# ---------------------------------------------------------------------------
# Dyadic diagnostics
# ---------------------------------------------------------------------------

@dataclass
class DyadicRow:
    N: int
    delta_x: float
    delta_z: float
    delta_u: float
    delta_z_cell0: float
    delta_u_cell0: float

    def envelope(self, epsilon, C=1.0):
        return C * (epsilon * (2 ** self.N + 2 ** (1.5 * self.N)) + self.delta_z + self.delta_u + self.delta_x)


def step_average(field_arr, grid: GridSpec, N: int):
    """Previous-cell average on the dyadic partition, zero on the first cell.

    ``field_arr (K, n, c)`` is left-point on the simulation grid; returns the
    step process on the same grid.
    """
    K = field_arr.shape[0]
    cells = 2 ** N
    if K % cells:
        raise ValueError(f"n_steps={K} is not a multiple of 2^N={cells}")
    per = K // cells
    cell_mean = field_arr.reshape(cells, per, *field_arr.shape[1:]).mean(axis=1)
    out = np.zeros_like(field_arr)
    for c in range(1, cells):
        out[c * per:(c + 1) * per] = cell_mean[c - 1]
    return out


def dyadic_diagnostics(spec: ModelSpec, N_list=(2, 3, 4, 5, 6), grid: GridSpec = None, n_paths: int = 10000,
                       lambda_map=None, seed: int = 0, basis: RegressionBasis = None, ensemble=None,
                       reduced=None, threads: int = 1):
    """Residuals ``E[D_X^4]^(1/4)``, ``E[D_Z]^(1/2)``, ``E[D_U]^(1/2)`` for each ``N``.

    ``D_X = max_t |X_t - X^N_t|`` on the simulation grid,
    ``D_Z = int |Zbar - Ztilde^N|^2 dt``, ``D_U`` likewise with the
    ``L2(nu1)`` norm.  Cell-0 contributions (where the step process is 0)
    are also reported on their own.
    """
    grid = grid or GridSpec(256, spec.horizon)
    if ensemble is None:
        ensemble = simulate(spec, grid, n_paths, seed, fast=False, threads=threads)
    if reduced is None:
        lm = lambda_map if lambda_map is not None else exact_lambda_map(spec)
        reduced = solve_reduced_bsde(spec, grid, ensemble, lm, basis=basis, seed=seed)
    X = ensemble.X
    K, dt = grid.n_steps, grid.dt
    lam1 = spec.nu1.intensities
    rows = []
    for N in N_list:
        cells = 2 ** N
        if K % cells:
            raise ValueError(f"n_steps={K} is not a multiple of 2^N={cells}")
        per = K // cells
        left = np.repeat(np.arange(0, K, per), per)
        left = np.append(left, K)
        dX = np.max(np.linalg.norm(X - X[:, left], axis=2), axis=1)
        Zt = step_average(reduced.Z, grid, N)
        dz2 = np.sum((reduced.Z - Zt) ** 2, axis=2) * dt
        DZ = dz2.sum(axis=0)
        DZ0 = dz2[:per].sum(axis=0)
        if lam1.size:
            Ut = step_average(reduced.U, grid, N)
            du2 = np.sum((reduced.U - Ut) ** 2 * lam1, axis=2) * dt
            DU, DU0 = du2.sum(axis=0), du2[:per].sum(axis=0)
        else:
            DU = DU0 = np.zeros(X.shape[0])
        rows.append(DyadicRow(N, float(np.mean(dX ** 4) ** 0.25), float(np.sqrt(np.mean(DZ))),
                              float(np.sqrt(np.mean(DU))), float(np.sqrt(np.mean(DZ0))), float(np.sqrt(np.mean(DU0)))))
    return rows


def strictly_decreasing(values):
    return all(b < a for a, b in zip(values, values[1:]))
