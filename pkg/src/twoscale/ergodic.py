"""Averaged driver ``lambda(x, z, u)`` by vanishing discount, a time-average
oracle, and the tabulated :class:`LambdaMap` used by the reduced equation.

For a frozen query ``(x, z, u)`` the discounted equation

    -dY = [psi(x, Qhat, z, Xi, u, Theta) - alpha Y] dt - Xi dW - Theta dN~

is solved backward on the fast process run on its own clock; ``alpha Y``
tends to ``lambda`` as ``alpha -> 0``.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import rng
from .bsde import Increment, RegressionBasis, backward_induction, eval_fields, jump_shifts
from .forward import GridSpec, simulate_frozen_fast
from .hamiltonian import DriverInput, build_driver
from .model import ModelSpec, check_dissipativity

log = logging.getLogger(__name__)


class NonDissipativeError(ValueError):
    pass


class HorizonWarning(RuntimeWarning):
    pass


class CertificationError(ValueError):
    pass


@dataclass
class LambdaQuery:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray

    @classmethod
    def build(cls, spec, x=None, z=None, u=None):
        def vec(v, d):
            return np.zeros(d) if v is None else np.broadcast_to(np.asarray(v, float).reshape(-1), (d,)).copy()
        return cls(vec(x, spec.dx), vec(z, spec.dx), vec(u, spec.nu1.n_marks))


@dataclass
class OracleResult:
    value: float
    se: float
    n_paths: int = 0

    def __float__(self):
        return float(self.value)


@dataclass
class ErgodicSolution:
    lambda_value: float
    se: float
    lambda_alpha: float
    lambda_half: float
    alpha: float
    q_ref: np.ndarray
    exact: bool = False
    mu_hat: float = math.nan
    horizon: float = math.nan
    t_star: float = 0.0
    vbar: object = None
    zetabar: object = None
    thetabar: object = None
    query: LambdaQuery = None
    raw_alpha: float = math.nan
    raw_half: float = math.nan
    q_range: tuple = None
    notes: list = field(default_factory=list)

    @property
    def richardson_gap(self):
        return abs(self.lambda_alpha - self.lambda_half)


def _mu(spec, mu, seed):
    if mu is None:
        mu = check_dissipativity(spec, rng_seed=seed).mu_hat
    if not mu > 0:
        raise NonDissipativeError(f"fast dynamics not dissipative (mu_hat = {mu:.3g})")
    return mu


def _frozen_input(spec, query, q, zeta=None, theta=None):
    n = q.shape[0]
    return DriverInput(x=np.broadcast_to(query.x, (n, spec.dx)), q=q,
                       z=np.broadcast_to(query.z, (n, spec.dx)),
                       zeta=np.zeros((n, spec.dw)) if zeta is None else zeta,
                       u=np.broadcast_to(query.u, (n, spec.nu1.n_marks)),
                       theta=np.zeros((n, spec.nu2.n_marks)) if theta is None else theta)


def _slow_only(driver):
    return not any(driver.depends_on(a) for a in ("q", "zeta", "theta"))


def lambda_pointwise(spec: ModelSpec, query: LambdaQuery, alpha: float = 0.1, grid: GridSpec = None,
                     n_paths: int = 2000, seed: int = 0, driver=None, q0=None, q_ref=None, mu=None,
                     dt: float = 0.1, basis: RegressionBasis = None) -> ErgodicSolution:
    """Vanishing-discount estimate of ``lambda`` at one query.

    The discounted equation is solved for ``alpha`` and ``alpha/2`` on the
    same frozen fast paths started at ``q0``.  By ``t* = 10/mu`` the paths
    have forgotten ``q0``, and under the invariant law the discrete scheme
    gives ``alpha E[Y_{t*}] = lambda (1 - d^{N-k*})`` with ``d = 1/(1+alpha dt)``,
    so that ratio is the reported estimate (from ``alpha/2``) with no
    first-order discount bias.  The raw ``alpha Y_0`` values are kept as
    ``raw_alpha``/``raw_half``.  ``v-bar``, ``zeta-bar`` and ``theta-bar``
    are read at ``t*`` with ``v-bar(q_ref) = 0``.  The default horizon is
    ``t* + 20/alpha``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    drv = build_driver(spec) if driver is None else driver
    mu = _mu(spec, mu, seed)
    q_ref = np.zeros(spec.dq) if q_ref is None else np.asarray(q_ref, float).reshape(spec.dq)
    if _slow_only(drv):
        lam = float(drv(_frozen_input(spec, query, q_ref[None, :]))[0])
        zero = lambda q: np.zeros(np.atleast_2d(q).shape[0])
        return ErgodicSolution(
            lambda_value=lam, se=0.0, lambda_alpha=lam, lambda_half=lam, alpha=alpha, q_ref=q_ref,
            exact=True, mu_hat=mu, vbar=zero, raw_alpha=lam, raw_half=lam,
            zetabar=lambda q: np.zeros((np.atleast_2d(q).shape[0], spec.dw)),
            thetabar=lambda q: np.zeros((np.atleast_2d(q).shape[0], spec.nu2.n_marks)),
            query=query, notes=["driver independent of (q, zeta, theta): lambda = psi exactly"])
    t_star = 10.0 / mu
    if grid is None:
        T = t_star + 20.0 / alpha
        grid = GridSpec(max(2, int(round(T / dt))), T)
    notes = []
    if math.exp(-mu * grid.horizon) > 1e-3:
        msg = f"ergodic horizon {grid.horizon:.3g} short for mu_hat {mu:.3g}"
        warnings.warn(msg, HorizonWarning, stacklevel=2)
        notes.append(msg)
    basis = basis or RegressionBasis()
    Q, noise = simulate_frozen_fast(spec, query.x, grid, seed, n_paths=n_paths, q0=q0)
    dt_ = grid.dt
    incs = [Increment("W2", noise.dW2, np.full(spec.dw, math.sqrt(dt_)))]
    if spec.nu2.n_marks:
        lam2 = spec.nu2.intensities
        sh = jump_shifts(spec.ops.B, spec.nu2.marks, dt_ / noise.substeps, noise.substeps, 0, spec.dq)
        incs.append(Increment("N2", noise.counts2 - lam2 * dt_, np.sqrt(lam2 * dt_), sparse=True, shifts=sh))

    def driver_at(k, S, fields):
        th = fields.get("N2", np.zeros((S.shape[0], spec.nu2.n_marks)))
        return drv(_frozen_input(spec, query, S, fields["W2"], th))

    k_star = min(grid.n_steps - 1, int(math.ceil(t_star / grid.dt)))
    runs = {}
    for a in (alpha, alpha / 2):
        Y, _, fits, Y0, _, _, _, G = backward_induction(
            grid.times, Q, np.zeros(n_paths), incs, driver_at, basis, discount=a,
            store_fields=False, keep_slices={0, k_star}, n_boot=0, pathwise_from=k_star,
            terminal_fn=lambda S: np.zeros(S.shape[0]))
        d = 1.0 / (1.0 + a * dt_)
        scale = a / (1.0 - d ** (grid.n_steps - k_star))
        runs[a] = (scale * float(np.mean(G)), scale * G, a * Y0, fits)
    lam_a, Ga, raw_a, _ = runs[alpha]
    lam_h, Gh, raw_h, fits_h = runs[alpha / 2]
    se = float(np.std(Gh, ddof=1) / math.sqrt(n_paths))
    fit = fits_h[k_star]
    d = 1.0 / (1.0 + alpha / 2 * dt_)

    def y_star(q):
        q = np.atleast_2d(np.asarray(q, float))
        cond, fields = eval_fields(fit, basis, q)
        return d * (cond + driver_at(k_star, q, fields) * dt_)

    y_ref = float(y_star(q_ref[None, :])[0])

    def vbar(q):
        return y_star(q) - y_ref

    def zetabar(q):
        return eval_fields(fit, basis, np.atleast_2d(np.asarray(q, float)))[1]["W2"]

    def thetabar(q):
        f = eval_fields(fit, basis, np.atleast_2d(np.asarray(q, float)))[1]
        return f.get("N2", np.zeros((np.atleast_2d(q).shape[0], 0)))

    qs = Q[:, k_star]
    return ErgodicSolution(
        lambda_value=float(lam_h), se=se, lambda_alpha=float(lam_a), lambda_half=float(lam_h), alpha=alpha,
        q_ref=q_ref, exact=False, mu_hat=mu, horizon=grid.horizon, t_star=float(grid.times[k_star]),
        vbar=vbar, zetabar=zetabar, thetabar=thetabar, query=query, raw_alpha=float(raw_a),
        raw_half=float(raw_h), q_range=(qs.min(axis=0), qs.max(axis=0)), notes=notes)


def lambda_oracle_timeavg(spec: ModelSpec, query: LambdaQuery, grid: GridSpec = None, n_paths: int = 2000,
                          seed: int = 0, driver=None, mu=None, q0=None, horizon: float = 200.0,
                          dt: float = 0.1) -> OracleResult:
    """Long-run average of ``psi(x, Qhat_s, z, 0, u, 0)`` after burn-in ``5/mu``.

    Only valid for drivers that ignore ``zeta`` and ``theta``.
    ``grid`` (if given) covers the averaging window; the burn-in is added
    in front of it on the same step.
    """
    drv = build_driver(spec) if driver is None else driver
    if drv.depends_on("zeta") or drv.depends_on("theta"):
        raise ValueError("time-average oracle refuses drivers that depend on zeta or theta")
    mu = _mu(spec, mu, seed)
    if grid is None:
        grid = GridSpec(max(1, int(round(horizon / dt))), horizon)
    burn_steps = int(math.ceil(5.0 / mu / grid.dt))
    full = GridSpec(grid.n_steps + burn_steps, grid.dt * (grid.n_steps + burn_steps))
    Q, _ = simulate_frozen_fast(spec, query.x, full, rng.derive_seed(seed, "timeavg"), n_paths=n_paths, q0=q0)
    acc = np.zeros(n_paths)
    for k in range(burn_steps, full.n_steps):
        acc += drv(_frozen_input(spec, query, Q[:, k]))
    avg = acc / grid.n_steps
    return OracleResult(float(avg.mean()), float(avg.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else math.nan,
                        n_paths)


def certify_vbar(sol: ErgodicSolution, n_pairs: int = 500, seed: int = 0, spec: ModelSpec = None):
    """Growth ratio ``|v(q)| / ((1+|z|+||u||)|q - q_ref|)`` and Lipschitz quotient in ``q``.

    Samples are drawn uniformly over the range visited at ``t*``.
    """
    gen = rng.generator(seed, "certify_vbar")
    dq = sol.q_ref.size
    if sol.q_range is None:
        lo, hi = sol.q_ref - 3.0, sol.q_ref + 3.0
    else:
        lo, hi = sol.q_range
    q = gen.uniform(lo, hi, size=(n_pairs, dq))
    qp = gen.uniform(lo, hi, size=(n_pairs, dq))
    v, vp = sol.vbar(q), sol.vbar(qp)
    u = sol.query.u if sol.query is not None else np.zeros(0)
    lam1 = spec.nu1.intensities if spec is not None else np.ones(u.size)
    w = 1.0 + (np.linalg.norm(sol.query.z) if sol.query is not None else 0.0) + math.sqrt(float(np.sum(u ** 2 * lam1)))
    dist = np.linalg.norm(q - sol.q_ref, axis=1)
    growth = np.abs(v) / (w * np.where(dist > 0, dist, np.inf))
    dd = np.linalg.norm(q - qp, axis=1)
    lip = np.abs(v - vp) / np.where(dd > 0, dd, np.inf)
    return {"max_growth_ratio": float(np.max(growth)), "max_lipschitz_quotient": float(np.max(lip)),
            "vbar_at_ref": float(sol.vbar(sol.q_ref[None, :])[0]), "n_pairs": n_pairs}


# ---------------------------------------------------------------------------
# LambdaMap
# ---------------------------------------------------------------------------

def _axis_names(dx, m1):
    return [f"x{i + 1}" for i in range(dx)] + [f"z{i + 1}" for i in range(dx)] + [f"u{i + 1}" for i in range(m1)]


class LambdaMap:
    """``lambda(x, z, u)`` either wrapped pointwise or tabulated on a box.

    Cached mode interpolates multilinearly; points outside the box are
    clamped to it and counted in ``last_outside``.
    """

    def __init__(self, dx, m1, mode="cached-grid", axes=None, values=None, fn=None, alpha=math.nan,
                 erg_horizon=math.nan, intensities=None, tol=0.0):
        self.dx, self.m1 = dx, m1
        self.mode = mode
        self.fn = fn
        self.alpha, self.erg_horizon = alpha, erg_horizon
        self.intensities = np.ones(m1) if intensities is None else np.asarray(intensities, float)
        self.tol = tol
        self.certificates = {"L_x": math.nan, "L_z": math.nan, "L_u": math.nan}
        self.last_outside = 0
        self.holdout = None
        if mode == "cached-grid":
            self.axes = [np.asarray(a, float) for a in axes]
            self.values = np.asarray(values, float)
            if len(self.axes) != 2 * dx + m1 or self.values.shape != tuple(a.size for a in self.axes):
                raise ValueError("LambdaMap axes/value shape mismatch")
            # singleton axes are constant directions, never out of range
            self._live = [i for i, a in enumerate(self.axes) if a.size > 1]
            if self._live:
                sub = self.values.reshape([a.size for a in self.axes if a.size > 1])
                self._interp = RegularGridInterpolator([self.axes[i] for i in self._live], sub, method="linear")
            self.certificates = self._certify()
        elif mode != "pointwise":
            raise ValueError(f"unknown LambdaMap mode {mode!r}")

    @classmethod
    def pointwise(cls, dx, m1, fn, intensities=None):
        return cls(dx, m1, mode="pointwise", fn=fn, intensities=intensities)

    @classmethod
    def constant(cls, dx, m1, value, intensities=None):
        axes = [np.zeros(1)] * (2 * dx + m1)
        return cls(dx, m1, axes=axes, values=np.full([1] * (2 * dx + m1), float(value)), intensities=intensities)

    @classmethod
    def from_function(cls, dx, m1, fn, axes, intensities=None, **kw):
        """Tabulate a batched ``fn(x, z, u)`` on the tensor grid ``axes``."""
        pts = np.array(list(itertools.product(*axes)), float).reshape(-1, len(axes))
        vals = fn(pts[:, :dx], pts[:, dx:2 * dx], pts[:, 2 * dx:])
        shape = [len(a) for a in axes]
        return cls(dx, m1, axes=axes, values=np.asarray(vals, float).reshape(shape), intensities=intensities, **kw)

    @property
    def box(self):
        return [(float(a[0]), float(a[-1])) for a in self.axes]

    def __call__(self, x, z, u):
        x, z = np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(z, float))
        n = max(x.shape[0], z.shape[0])
        u = np.asarray(u, float).reshape(n, -1) if np.size(u) else np.zeros((n, self.m1))
        if self.mode == "pointwise":
            self.last_outside = 0
            return np.asarray(self.fn(np.broadcast_to(x, (n, self.dx)), np.broadcast_to(z, (n, self.dx)), u), float)
        P = np.concatenate([np.broadcast_to(x, (n, self.dx)), np.broadcast_to(z, (n, self.dx)), u], axis=1)
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        out = ((P < lo - 1e-12) | (P > hi + 1e-12))[:, self._live]
        self.last_outside = int(np.sum(np.any(out, axis=1)))
        P = np.clip(P, lo, hi)
        if not self._live:
            return np.full(n, float(self.values.reshape(-1)[0]))
        return self._interp(P[:, self._live])

    # finite-difference certificates
    def _certify(self):
        V = self.values
        dx, m1 = self.dx, self.m1
        grids = np.meshgrid(*self.axes, indexing="ij")
        zn = np.sqrt(sum(grids[dx + i] ** 2 for i in range(dx)))
        un = np.sqrt(sum(grids[2 * dx + i] ** 2 * self.intensities[i] for i in range(m1))) if m1 else 0.0
        weight = 1.0 + zn + un
        L = {"L_x": 0.0, "L_z": 0.0, "L_u": 0.0}
        for ax, a in enumerate(self.axes):
            if a.size < 2:
                continue
            dv = np.abs(np.diff(V, axis=ax))
            h = np.diff(a).reshape([-1 if i == ax else 1 for i in range(V.ndim)])
            if ax < dx:
                wmid = np.minimum(np.take(weight, range(a.size - 1), axis=ax), np.take(weight, range(1, a.size), axis=ax))
                q = dv / (h * wmid)
                key = "L_x"
            elif ax < 2 * dx:
                q = dv / h
                key = "L_z"
            else:
                q = dv / (h * math.sqrt(self.intensities[ax - 2 * dx]))
                key = "L_u"
            L[key] = max(L[key], float(np.max(q)))
        return L

    def concavity_report(self, tol=1e-9):
        """Count second differences along z/u axes that break concavity."""
        V, dx = self.values, self.dx
        viol, worst = 0, 0.0
        for ax in range(dx, V.ndim):
            a = self.axes[ax]
            if a.size < 3:
                continue
            h = np.diff(a)
            s = np.diff(V, axis=ax) / h.reshape([-1 if i == ax else 1 for i in range(V.ndim)])
            d2 = np.diff(s, axis=ax)
            viol += int(np.sum(d2 > tol))
            worst = max(worst, float(np.max(d2, initial=0.0)))
        return {"violations": viol, "max_second_difference": worst}

    def to_json(self):
        return {"mode": self.mode, "dx": self.dx, "m1": self.m1, "axes": _axis_names(self.dx, self.m1),
                "box": self.box, "resolution": [int(a.size) for a in self.axes],
                "alpha": self.alpha, "erg_horizon": self.erg_horizon, "tol": self.tol,
                "intensities": self.intensities.tolist(), "certificates": self.certificates,
                "holdout": self.holdout}

    def table(self):
        """Rows ``(x.., z.., u.., lambda)`` over the grid, C order."""
        pts = np.array(list(itertools.product(*self.axes)), float)
        return np.column_stack([pts, self.values.reshape(-1)])

    @classmethod
    def from_table(cls, header, rows):
        dx, m1 = header["dx"], header["m1"]
        rows = np.asarray(rows, float)
        axes = [np.unique(rows[:, i]) for i in range(2 * dx + m1)]
        vals = rows[:, -1].reshape([a.size for a in axes])
        lm = cls(dx, m1, axes=axes, values=vals, alpha=header.get("alpha", math.nan),
                 erg_horizon=header.get("erg_horizon", math.nan), intensities=header.get("intensities"),
                 tol=header.get("tol", 0.0))
        lm.holdout = header.get("holdout")
        return lm

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


def build_lambda_map(spec: ModelSpec, box, resolutions, alpha: float = 0.1, grid: GridSpec = None,
                     n_paths: int = 2000, seed: int = 0, driver=None, n_holdout: int = 4, tol: float = 0.02,
                     mu=None, **kw) -> LambdaMap:
    """Tabulate ``lambda`` on a tensor grid over ``box`` and certify it.

    ``box`` lists ``(lo, hi)`` per axis in the order ``x.., z.., u..``;
    ``resolutions`` gives the node count per axis.  Held-out random points
    are re-solved pointwise; the map is refused when an interpolation error
    exceeds ``tol + 3 SE``.
    """
    drv = build_driver(spec) if driver is None else driver
    dx, m1 = spec.dx, spec.nu1.n_marks
    if len(box) != 2 * dx + m1 or len(resolutions) != len(box):
        raise ValueError("box/resolutions must have one entry per (x, z, u) axis")
    axes = [np.linspace(lo, hi, int(r)) if int(r) > 1 else np.array([0.5 * (lo + hi)])
            for (lo, hi), r in zip(box, resolutions)]
    mu = _mu(spec, mu, seed)

    def solve(point, label):
        q = LambdaQuery.build(spec, x=point[:dx], z=point[dx:2 * dx], u=point[2 * dx:])
        return lambda_pointwise(spec, q, alpha, grid, n_paths, rng.derive_seed(seed, label), driver=drv,
                                mu=mu, **kw)

    nodes = list(itertools.product(*axes))
    vals, ses = [], []
    for i, p in enumerate(nodes):
        sol = solve(np.array(p), f"node{i}")
        vals.append(sol.lambda_value)
        ses.append(sol.se)
    values = np.array(vals).reshape([a.size for a in axes])
    lm = LambdaMap(dx, m1, axes=axes, values=values, alpha=alpha,
                   erg_horizon=(grid.horizon if grid is not None else 20.0 / alpha),
                   intensities=spec.nu1.intensities, tol=tol)
    gen = rng.generator(seed, "holdout")
    worst, rows = 0.0, []
    for j in range(n_holdout):
        p = np.array([gen.uniform(lo, hi) for lo, hi in box])
        sol = solve(p, f"holdout{j}")
        approx = float(lm(p[None, :dx], p[None, dx:2 * dx], p[None, 2 * dx:])[0])
        err = abs(approx - sol.lambda_value)
        allowed = tol + 3 * math.sqrt(sol.se ** 2 + max(ses) ** 2)
        rows.append({"point": p.tolist(), "error": err, "allowed": allowed})
        worst = max(worst, err - allowed)
    lm.holdout = rows
    if worst > 0:
        raise CertificationError(f"held-out interpolation error exceeds tolerance by {worst:.3g}")
    return lm
