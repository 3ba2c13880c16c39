"""Regression-based backward induction for the full and reduced BSDEs.

At each slice the next value ``Y_{k+1}`` is regressed jointly on the state
features ``phi(S_k)`` and on the products ``phi(S_k) * dM_k`` for every
martingale increment ``dM`` (Brownian increments and compensated jump
counts per mark).  The first block is the conditional mean, the others are
the integrands ``Z, Xi, U, Theta`` as functions of the state.  Then

    Y_k = (E[Y_{k+1} | S_k] + psi_k dt) / (1 + alpha dt)

with ``alpha = 0`` except for the discounted equations of the ergodic module.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, expm

from . import rng
from .hamiltonian import DriverInput, build_driver
from .model import ModelSpec

log = logging.getLogger(__name__)

COND_LIMIT = 1e8
# grid-basis cells with fewer fitting paths are merged into a neighbour
MIN_CELL_PATHS = 30


class SingularRegressionError(np.linalg.LinAlgError):
    pass


class PicardWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Regression basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionBasis:
    """``polynomial`` (total degree ``degree``) or ``grid`` (cell indicators).

    Inputs are standardised per slice; coordinates that are constant on the
    ensemble are dropped, so a deterministic slice gets the constant basis.
    """

    kind: str = "polynomial"
    degree: int = 2
    resolution: int = 16

    def __post_init__(self):
        if self.kind not in ("polynomial", "grid"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.resolution < 1:
            raise ValueError("degree must be >= 0 and resolution >= 1")

    def fit(self, S):
        mean = S.mean(axis=0)
        std = S.std(axis=0)
        active = np.flatnonzero(std > 1e-12 * (1.0 + np.abs(mean)))
        meta = {"mean": mean, "std": np.where(std > 0, std, 1.0), "active": active,
                "lo": S.min(axis=0), "hi": S.max(axis=0)}
        if self.kind == "polynomial":
            terms = [()]
            for deg in range(1, self.degree + 1):
                terms += list(itertools.combinations_with_replacement(range(active.size), deg))
            meta["terms"] = terms
        else:
            if active.size > 2:
                raise ValueError("grid basis supports at most 2 active coordinates")
            edges = [np.linspace(S[:, j].min(), S[:, j].max(), self.resolution + 1) for j in active]
            meta["edges"] = edges
            if active.size == 0:
                return meta
            ids, counts = np.unique(self._cells(S, meta), return_counts=True)
            dense = ids[counts >= MIN_CELL_PATHS]
            if dense.size == 0:
                dense = ids[[np.argmax(counts)]]
            # sparse cells borrow the nearest dense cell so every indicator has support
            r, d = self.resolution, active.size
            grid_pos = np.array(np.unravel_index(np.arange(r ** d), (r,) * d)).T
            dist = np.linalg.norm(grid_pos[:, None, :] - grid_pos[dense][None, :, :], axis=2)
            meta["cell_map"] = np.argmin(dist, axis=1)
            meta["cells"] = dense
        return meta

    def _cells(self, S, meta):
        idx = np.zeros(S.shape[0], dtype=int)
        for j, e in zip(meta["active"], meta["edges"]):
            b = np.clip(np.searchsorted(e, S[:, j], side="right") - 1, 0, self.resolution - 1)
            idx = idx * self.resolution + b
        return idx

    def transform(self, S, meta):
        S = np.atleast_2d(S)
        if self.kind == "polynomial":
            Zs = (S[:, meta["active"]] - meta["mean"][meta["active"]]) / meta["std"][meta["active"]]
            cols = [np.prod(Zs[:, list(t)], axis=1) if t else np.ones(S.shape[0]) for t in meta["terms"]]
            return np.column_stack(cols)
        if meta["active"].size == 0:
            return np.ones((S.shape[0], 1))
        col = meta["cell_map"][self._cells(S, meta)]
        return (col[:, None] == np.arange(meta["cells"].size)[None, :]).astype(float)

    def outside(self, S, meta, slack=0.0):
        """True for rows outside the per-coordinate ensemble range."""
        S = np.atleast_2d(S)
        span = meta["hi"] - meta["lo"]
        return np.any((S < meta["lo"] - slack * span - 1e-12) | (S > meta["hi"] + slack * span + 1e-12), axis=1)


@dataclass
class Increment:
    """Martingale increments ``values (n, K, c)`` with per-column scale ``(c,)``.

    ``sparse`` marks jump increments, whose product block falls back to a
    constant coefficient when a slice holds too few events.  ``shifts``
    (one ``(n_quad, d)`` array of state displacements per column) switches a
    jump increment to the shift estimator, see :func:`backward_induction`.
    """

    name: str
    values: np.ndarray
    scale: np.ndarray
    sparse: bool = False
    shifts: list = None


@dataclass
class SliceFit:
    meta: dict
    cond: np.ndarray
    fields: dict
    full_blocks: dict


@dataclass
class BsdeSolution:
    times: np.ndarray
    Y: np.ndarray
    Z: np.ndarray = None
    Xi: np.ndarray = None
    U: np.ndarray = None
    Theta: np.ndarray = None
    Y0: float = math.nan
    se: float = math.nan
    ci: tuple = (math.nan, math.nan)
    Y0_spread: float = 0.0
    pathwise: np.ndarray = None
    fits: list = None
    basis: RegressionBasis = None
    driver_at: object = None
    terminal: object = None
    discount: float = 0.0
    epsilon: float = 1.0
    picard_bound: float = 0.0
    states: np.ndarray = None
    notes: list = field(default_factory=list)

    @property
    def n_steps(self):
        return self.times.size - 1


# ---------------------------------------------------------------------------
# Core induction
# ---------------------------------------------------------------------------

def _lstsq(A, y):
    """Least squares via equilibrated normal equations plus one refinement step.

    The condition number of ``A`` is read off the Gram matrix spectrum.
    """
    gram = A.T @ A
    norms = np.sqrt(np.diag(gram))
    norms[norms == 0] = 1.0
    gs = gram / np.outer(norms, norms)
    ev = np.linalg.eigvalsh(gs)
    cond = math.sqrt(ev[-1] / ev[0]) if ev[0] > 0 else math.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularRegressionError(f"singular regression: condition number {cond:.3g} > {COND_LIMIT:g}")
    cf = cho_factor(gs)
    x = cho_solve(cf, (A.T @ y) / norms)
    x = x + cho_solve(cf, (A.T @ (y - A @ (x / norms))) / norms)
    return x / norms


def _fit_slice(basis, S, y, inc_vals, min_events, known=None):
    """Joint regression of ``y`` on ``phi(S)`` and ``phi(S) * dM``; returns a :class:`SliceFit`.

    ``known`` maps increment names to per-path jump effects ``(n, c)``; those
    fields are regressed on ``phi(S)`` directly and their martingale part is
    removed from ``y`` before the joint fit.
    """
    meta = basis.fit(S)
    phi = basis.transform(S, meta)
    p = phi.shape[1]
    blocks, layout = [phi], []
    known = known or {}
    pre = {}
    y = np.array(y, dtype=float)
    for name, values, scale, sparse in inc_vals:
        if name in known:
            pre[name] = []
            for c in range(values.shape[1]):
                b = _lstsq(phi, known[name][:, c])
                y -= (phi @ b) * values[:, c]
                pre[name].append(b)
            continue
        v = values / scale
        for c in range(v.shape[1]):
            col = v[:, c]
            if sparse:
                events = np.count_nonzero(col != col.min())
                if events == 0:
                    layout.append((name, c, None, scale[c]))
                    continue
                full = events >= min_events * p
            else:
                full = True
            blocks.append(phi * col[:, None] if full else col[:, None])
            layout.append((name, c, full, scale[c]))
    coef = _lstsq(np.concatenate(blocks, axis=1), y)
    full_blocks = {name: [None] * values.shape[1] for name, values, _, _ in inc_vals}
    full_blocks.update(pre)
    pos = p
    for name, c, full, sc in layout:
        if full is None:
            full_blocks[name][c] = np.zeros(1)
            continue
        width = p if full else 1
        full_blocks[name][c] = coef[pos:pos + width] / sc
        pos += width
    return SliceFit(meta, coef[:p], None, full_blocks)


def _eval_one(fit: SliceFit, basis, S):
    phi = basis.transform(S, fit.meta)
    out = {}
    for name, cols in fit.full_blocks.items():
        vals = np.zeros((phi.shape[0], len(cols)))
        for c, b in enumerate(cols):
            vals[:, c] = phi @ b if b.size == phi.shape[1] and b.size > 1 else b[0]
        out[name] = vals
    return phi @ fit.cond, out


def eval_fields(fit, basis: RegressionBasis, S):
    """Conditional mean and integrand fields at states ``S``.

    ``fit`` is a :class:`SliceFit` or a list of fold fits, which are averaged.
    """
    S = np.atleast_2d(S)
    if isinstance(fit, SliceFit):
        return _eval_one(fit, basis, S)
    parts = [_eval_one(f, basis, S) for f in fit]
    cond = sum(p[0] for p in parts) / len(parts)
    fields = {k: sum(p[1][k] for p in parts) / len(parts) for k in parts[0][1]}
    return cond, fields


def fit_meta(fit):
    """Basis metadata of a fit; fold fits are merged into their joint range."""
    if isinstance(fit, SliceFit):
        return fit.meta
    meta = dict(fit[0].meta)
    meta["lo"] = np.min([f.meta["lo"] for f in fit], axis=0)
    meta["hi"] = np.max([f.meta["hi"] for f in fit], axis=0)
    return meta


def backward_induction(times, states, terminal_values, increments, driver_at, basis: RegressionBasis,
                       discount=0.0, store_fields=True, keep_slices=None, min_events=5, n_boot=200,
                       boot_seed=0, pathwise_from=0, cross_fit=True, terminal_fn=None):
    """Generic backward sweep.

    ``states (n, K+1, d)``, ``terminal_values (n,)``; ``driver_at(k, S_k,
    fields)`` returns the driver per path given the fitted integrands.
    ``keep_slices`` restricts which ``Y`` rows are stored (a dict then).

    With ``cross_fit`` the paths are split into even/odd folds and every
    path is evaluated with coefficients fitted on the other fold, so the
    fitted martingale parts are independent of the increments they
    multiply.  The pathwise estimator ``G`` (from slice ``pathwise_from``)
    sums the discounted driver and terminal value minus those martingale
    parts; its mean is the reported ``Y0``.  In-sample fitting would bias
    this mean by ``O(1/n)``.

    Jump increments carrying ``shifts`` use the shift estimator: the jump
    effect ``Yhat_{k+1}(S_{k+1} + shift) - Yhat_{k+1}(S_{k+1})`` is computed
    on every path from the next slice's fitted solution (``terminal_fn`` at
    the last slice) and regressed on ``phi(S_k)``.  Regressing on the sparse
    jump counts instead lets the few event paths tilt the conditional mean,
    an ``O(K/n)`` bias once slices hold only a handful of events.
    """
    n, K1, _ = states.shape
    K = K1 - 1
    # time-major copies keep every slice contiguous
    states = np.ascontiguousarray(states.transpose(1, 0, 2))
    increments = [Increment(i.name, np.ascontiguousarray(i.values.transpose(1, 0, 2)), i.scale, i.sparse,
                            i.shifts if terminal_fn is not None else None)
                  for i in increments]
    shifted = [i for i in increments if i.shifts is not None]
    dt = np.diff(times)
    Y = np.full((K + 1, n), np.nan) if keep_slices is None else {}
    fields_store = {inc.name: np.zeros((K, n, inc.values.shape[2])) for inc in increments} if store_fields else None
    y_next = np.asarray(terminal_values, float).copy()
    folds = [np.arange(0, n, 2), np.arange(1, n, 2)] if cross_fit and n >= 2 else [np.arange(n)]

    def keep(k, v):
        if keep_slices is None:
            Y[k] = v
        elif k in keep_slices:
            Y[k] = v.copy()

    keep(K, y_next)
    fits = [None] * K
    d = 1.0 / (1.0 + discount * dt)
    G = np.zeros(n)
    disc_acc = np.ones(K + 1)
    for k in range(pathwise_from, K):
        disc_acc[k + 1] = disc_acc[k] * d[k]
    G += disc_acc[K] * y_next
    prev_fits = None

    def y_at(k1, S1, src):
        if k1 == K:
            return np.asarray(terminal_fn(S1), float)
        c, f = _eval_one(src, basis, S1)
        return d[k1] * (c + driver_at(k1, S1, f) * dt[k1])

    for k in range(K - 1, -1, -1):
        S = states[k]
        slice_fits = []
        for j, idx in enumerate(folds):
            inc_vals = [(i.name, i.values[k][idx], i.scale, i.sparse) for i in increments]
            known = {}
            if shifted:
                S1 = states[k + 1][idx]
                src = None if prev_fits is None else prev_fits[(j + 1) % len(prev_fits)]
                for inc in shifted:
                    eff = np.empty((idx.size, len(inc.shifts)))
                    for c, disp in enumerate(inc.shifts):
                        eff[:, c] = np.mean([y_at(k + 1, S1 + sh, src) for sh in disp], axis=0) - y_next[idx]
                    known[inc.name] = eff
            slice_fits.append(_fit_slice(basis, S[idx], y_next[idx], inc_vals, min_events, known))
        prev_fits = slice_fits
        cond = np.empty(n)
        fields = {inc.name: np.empty((n, inc.values.shape[2])) for inc in increments}
        for j, idx in enumerate(folds):
            src = slice_fits[(j + 1) % len(folds)]
            c, f = _eval_one(src, basis, S[idx])
            cond[idx] = c
            for name in fields:
                fields[name][idx] = f[name]
        fits[k] = slice_fits if len(slice_fits) > 1 else slice_fits[0]
        psi = driver_at(k, S, fields)
        y = d[k] * (cond + psi * dt[k])
        mart = np.zeros(n)
        for inc in increments:
            mart += np.sum(fields[inc.name] * inc.values[k], axis=1)
            if store_fields:
                fields_store[inc.name][k] = fields[inc.name]
        if k >= pathwise_from:
            G += disc_acc[k + 1] * (psi * dt[k] - mart)
        keep(k, y)
        y_next = y
    Y0 = float(np.mean(G)) if pathwise_from == 0 else float(np.mean(y_next))
    se = float(np.std(G, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    gen = rng.generator(boot_seed, "bootstrap")
    if n > 1 and n_boot > 0 and n * n_boot <= 5e7:
        boot = G[gen.integers(0, n, size=(n_boot, n))].mean(axis=1) - G.mean() + Y0
        ci = (float(np.quantile(boot, 0.025)), float(np.quantile(boot, 0.975)))
    elif n > 1:
        ci = (Y0 - 1.96 * se, Y0 + 1.96 * se)
    else:
        ci = (Y0, Y0)
    return Y, fields_store, fits, Y0, se, ci, float(np.std(y_next)), G


def _jump_increment(name, counts, nu, rate_scale, dt, shifts=None):
    lam = nu.intensities * rate_scale
    return Increment(name, counts - lam * dt, np.sqrt(lam * dt), sparse=True, shifts=shifts)


MAX_SHIFT_QUAD = 8


def jump_shifts(generator, marks, h, substeps, offset, dim):
    """State displacements of one jump per mark under the exponential scheme.

    A jump at sub-step ``i`` of ``m`` moves the state at the next slow node
    by ``e^{(m-1-i) h L} e^{h L/2} w`` (``L`` the linear drift); positions
    are averaged over at most ``MAX_SHIFT_QUAD`` evenly spaced sub-steps.
    The displacement sits in coordinates ``offset:offset+len(w)`` of a
    ``dim``-dimensional state.
    """
    E, Eh = expm(generator * h), expm(generator * h / 2)
    m = int(substeps)
    pos = sorted({int((j + 0.5) * m / min(m, MAX_SHIFT_QUAD)) for j in range(min(m, MAX_SHIFT_QUAD))})
    out = []
    for w in np.atleast_2d(marks):
        disp = np.zeros((len(pos), dim))
        for r, i in enumerate(pos):
            disp[r, offset:offset + w.size] = np.linalg.matrix_power(E, m - 1 - i) @ Eh @ w
        out.append(disp)
    return out


def _picard_bound(driver, epsilon, dt):
    L = driver.lipschitz()
    return (L["z"] + L["zeta"] / math.sqrt(epsilon) + L["u"] + L["theta"] / epsilon) * dt


def solve_full_bsde(spec: ModelSpec, grid, ensemble, driver=None, basis: RegressionBasis = None,
                    picard_iters: int = 3, discount: float = 0.0, store_fields=True, keep_slices=None,
                    seed: int = 0) -> BsdeSolution:
    """Backward equation driven by ``psi(X, Q, Z, Xi/sqrt(eps), U, Theta/eps)``.

    The built-in drivers do not depend on ``Y``, so the fields at a slice are
    determined by ``Y_{k+1}`` and one sweep is already the fixed point;
    ``picard_iters`` is kept for the contraction report only.
    """
    drv = build_driver(spec) if driver is None else driver
    basis = basis or RegressionBasis()
    eps = ensemble.noise.epsilon
    dt = grid.dt
    X, Q = ensemble.X, ensemble.Q
    states = np.concatenate([X, Q], axis=2)
    noise = ensemble.noise
    incs = [Increment("W1", noise.dW1, np.full(spec.dx, math.sqrt(dt))),
            Increment("W2", noise.dW2, np.full(spec.dw, math.sqrt(dt)))]
    dim = spec.dx + spec.dq
    if spec.nu1.n_marks:
        sh = jump_shifts(spec.ops.A, spec.nu1.marks, dt, 1, 0, dim)
        incs.append(_jump_increment("N1", noise.counts1, spec.nu1, 1.0, dt, sh))
    if spec.nu2.n_marks:
        m = noise.substeps
        sh = jump_shifts(spec.ops.B, spec.nu2.marks, dt / (eps * m), m, spec.dx, dim)
        incs.append(_jump_increment("N2", noise.counts2, spec.nu2, 1.0 / eps, dt, sh))
    dx = spec.dx
    m1, m2 = spec.nu1.n_marks, spec.nu2.n_marks
    sq = math.sqrt(eps)

    def driver_at(k, S, fields):
        n = S.shape[0]
        inp = DriverInput(x=S[:, :dx], q=S[:, dx:], z=fields["W1"], zeta=fields["W2"] / sq,
                          u=fields.get("N1", np.zeros((n, m1))), theta=fields.get("N2", np.zeros((n, m2))) / eps)
        return drv(inp)

    bound = _picard_bound(drv, eps, dt)
    notes = []
    if bound >= 1:
        msg = f"Picard contraction bound (L_z + L_zeta/sqrt(eps) + L_u + L_theta/eps) dt = {bound:.3g} >= 1"
        warnings.warn(msg, PicardWarning, stacklevel=2)
        notes.append(msg)
    h = spec.funcs.h
    Y, fs, fits, Y0, se, ci, spread, G = backward_induction(
        grid.times, states, h(X[:, -1]), incs, driver_at, basis, discount=discount,
        store_fields=store_fields, keep_slices=keep_slices, boot_seed=seed,
        terminal_fn=lambda S: h(S[:, :dx]))
    fs = fs or {}
    return BsdeSolution(
        times=grid.times, Y=Y, Z=fs.get("W1"), Xi=fs.get("W2"), U=fs.get("N1", np.zeros((grid.n_steps, X.shape[0], 0)) if fs else None),
        Theta=fs.get("N2", np.zeros((grid.n_steps, X.shape[0], 0)) if fs else None),
        Y0=Y0, se=se, ci=ci, Y0_spread=spread, pathwise=G, fits=fits, basis=basis, driver_at=driver_at,
        terminal=lambda S: h(S[:, :dx]), discount=discount, epsilon=eps, picard_bound=bound,
        states=states if store_fields else None, notes=notes)


def solve_reduced_bsde(spec: ModelSpec, grid, slow_ensemble, lambda_fn, basis: RegressionBasis = None,
                       seed: int = 0) -> BsdeSolution:
    """Backward equation on the slow space with driver ``lambda(X, Zbar, Ubar)``.

    ``slow_ensemble`` is a :class:`~twoscale.forward.ForwardEnsemble` (its
    fast component is ignored).  Points outside a cached map's box are
    counted in ``notes``.
    """
    basis = basis or RegressionBasis()
    dt = grid.dt
    X = slow_ensemble.X
    noise = slow_ensemble.noise
    incs = [Increment("W1", noise.dW1, np.full(spec.dx, math.sqrt(dt)))]
    if spec.nu1.n_marks:
        sh = jump_shifts(spec.ops.A, spec.nu1.marks, dt, 1, 0, spec.dx)
        incs.append(_jump_increment("N1", noise.counts1, spec.nu1, 1.0, dt, sh))
    m1 = spec.nu1.n_marks
    outside = [0]

    def driver_at(k, S, fields):
        u = fields.get("N1", np.zeros((S.shape[0], m1)))
        val = lambda_fn(S, fields["W1"], u)
        if hasattr(lambda_fn, "last_outside"):
            outside[0] += int(lambda_fn.last_outside)
        return val

    h = spec.funcs.h
    Y, fs, fits, Y0, se, ci, spread, G = backward_induction(
        grid.times, X, h(X[:, -1]), incs, driver_at, basis, boot_seed=seed, terminal_fn=h)
    notes = []
    if outside[0]:
        notes.append(f"{outside[0]} lambda evaluations outside the cached box (clamped)")
    return BsdeSolution(times=grid.times, Y=Y, Z=fs["W1"], U=fs.get("N1", np.zeros((grid.n_steps, X.shape[0], 0))),
                        Y0=Y0, se=se, ci=ci, Y0_spread=spread, pathwise=G, fits=fits, basis=basis,
                        driver_at=driver_at, terminal=lambda S: h(S), states=X, notes=notes)


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

class MarkovDecoder:
    """State-feedback functions ``y(k, S)``, ``fields(k, S)`` from a solution."""

    def __init__(self, sol: BsdeSolution, basis: RegressionBasis = None):
        if sol.fits is None:
            raise ValueError("solution carries no fitted coefficients")
        self.sol = sol
        self.basis = basis or sol.basis
        self.last_outside = 0

    def _flag(self, k, S):
        meta = fit_meta(self.sol.fits[min(k, self.sol.n_steps - 1)])
        self.last_outside = int(np.sum(self.basis.outside(S, meta)))
        if self.last_outside:
            log.info("decoder: %d points outside the ensemble hull at slice %d", self.last_outside, k)

    def y(self, k, S):
        S = np.atleast_2d(np.asarray(S, float))
        if k == self.sol.n_steps:
            return self.sol.terminal(S)
        self._flag(k, S)
        fit = self.sol.fits[k]
        cond, fields = eval_fields(fit, self.basis, S)
        dt = self.sol.times[k + 1] - self.sol.times[k]
        psi = self.sol.driver_at(k, S, fields)
        return (cond + psi * dt) / (1.0 + self.sol.discount * dt)

    def fields(self, k, S):
        S = np.atleast_2d(np.asarray(S, float))
        self._flag(k, S)
        return eval_fields(self.sol.fits[k], self.basis, S)[1]

    def coefficients(self):
        """JSON-ready fitted coefficients per slice."""
        out = []
        for k, fit in enumerate(self.sol.fits):
            folds = fit if isinstance(fit, list) else [fit]
            out.append({"t": float(self.sol.times[k]), "folds": [
                {"cond": f.cond.tolist(), "fields": {n: [b.tolist() for b in bl] for n, bl in f.full_blocks.items()},
                 "mean": f.meta["mean"].tolist(), "std": f.meta["std"].tolist()} for f in folds]})
        return out


def markovian_decoder(solution: BsdeSolution, basis: RegressionBasis = None) -> MarkovDecoder:
    return MarkovDecoder(solution, basis)


def slice_summary(sol: BsdeSolution):
    """Rows ``(t, Y mean, Y sd, |Z|, |Xi|, |U|, |Theta|)`` for the solution dump."""
    rows = []
    for k in range(sol.n_steps + 1):
        y = sol.Y[k] if not isinstance(sol.Y, dict) else sol.Y.get(k)
        if y is None:
            continue
        row = [float(sol.times[k]), float(np.mean(y)), float(np.std(y))]
        for f in (sol.Z, sol.Xi, sol.U, sol.Theta):
            if f is None or k == sol.n_steps or f.shape[2] == 0:
                row.append(0.0)
            else:
                row.append(float(np.sqrt(np.mean(np.sum(f[k] ** 2, axis=1)))))
        rows.append(row)
    return rows
