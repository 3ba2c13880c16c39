"""Drivers: the control Hamiltonian, its selectors and certificates, and a
small library of generic driver terms.

All evaluations are batched: every field of :class:`DriverInput` carries a
leading path axis.  With a finite-support Lévy measure the jump arguments
``u`` and ``theta`` are mark-indexed vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .model import ConfigError, FunctionSpec, ModelSpec

ARGS = ("x", "q", "z", "zeta", "u", "theta")


@dataclass
class DriverInput:
    x: np.ndarray
    q: np.ndarray
    z: np.ndarray
    zeta: np.ndarray
    u: np.ndarray
    theta: np.ndarray

    @classmethod
    def build(cls, spec: ModelSpec, n=None, **kw):
        """Fill missing arguments with zeros and broadcast to ``n`` rows."""
        dims = {"x": spec.dx, "q": spec.dq, "z": spec.dx, "zeta": spec.dw,
                "u": spec.nu1.n_marks, "theta": spec.nu2.n_marks}
        arrs = {k: np.asarray(kw[k], float) if k in kw and kw[k] is not None else None for k in ARGS}
        if n is None:
            n = max([a.shape[0] for a in arrs.values() if a is not None and a.ndim == 2] or [1])
        out = {}
        for k, d in dims.items():
            a = arrs[k]
            if a is None:
                out[k] = np.zeros((n, d))
            else:
                out[k] = np.broadcast_to(a.reshape(-1, d) if a.ndim < 2 else a, (n, d))
        return cls(**out)

    @property
    def n(self):
        return self.x.shape[0]

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in ARGS}
        d.update(kw)
        return DriverInput(**d)


@dataclass
class DriverCertificate:
    M_psi: float
    L_x: float
    L_q: float
    L_z: float
    L_zeta: float
    L_u: float
    L_theta: float
    C1: float
    C2: float
    C1_bar: float
    C2_bar: float
    weighted_form_ok: bool = True
    samples_used: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Control Hamiltonian
# ---------------------------------------------------------------------------

def control_terms(spec: ModelSpec, inp: DriverInput) -> np.ndarray:
    """Bracketed expression for every control, shape ``(n_controls, n)``."""
    f = spec.funcs
    Rinv = spec.ops.R_inv
    lam1, lam2 = spec.nu1.intensities, spec.nu2.intensities
    out = np.empty((spec.coeffs.control_set.shape[0], inp.n))
    for j, a in enumerate(spec.coeffs.control_set):
        v = f.l(inp.x, inp.q, a) + np.sum(inp.z * (f.b(inp.x, inp.q, a) @ Rinv.T), axis=1)
        v = v + inp.zeta @ f.rho(a)
        for i, w in enumerate(spec.nu1.marks):
            v = v + inp.u[:, i] * (f.r(inp.x, inp.q, a, w) - 1.0) * lam1[i]
        for i, w in enumerate(spec.nu2.marks):
            v = v + inp.theta[:, i] * (f.gamma(a, w) - 1.0) * lam2[i]
        out[j] = v
    return out


def eval_control_hamiltonian(spec: ModelSpec, inp: DriverInput):
    """Minimum over the control set and the lowest minimising control index."""
    vals = control_terms(spec, inp)
    idx = np.argmin(vals, axis=0)
    return vals[idx, np.arange(inp.n)], idx


def _r_table(spec, inp):
    f = spec.funcs
    cs = spec.coeffs.control_set
    r = np.empty((cs.shape[0], inp.n, spec.nu1.n_marks))
    g = np.empty((cs.shape[0], spec.nu2.n_marks))
    for j, a in enumerate(cs):
        for i, w in enumerate(spec.nu1.marks):
            r[j, :, i] = f.r(inp.x, inp.q, a, w)
        for i, w in enumerate(spec.nu2.marks):
            g[j, i] = f.gamma(a, w)
    return r - 1.0, g - 1.0


def gamma_selectors(spec: ModelSpec, inp: DriverInput, u_prime, theta_prime):
    """Selectors ``gamma1 (n, m1)`` and ``gamma2 (n, m2)``.

    Where ``u >= u'`` the selector takes ``sup_a (r - 1)``, elsewhere
    ``inf_a (r - 1)``; ``gamma2`` does the same with ``gamma(a, w) - 1``.
    """
    r1, g1 = _r_table(spec, inp)
    up = np.broadcast_to(np.asarray(u_prime, float), inp.u.shape)
    tp = np.broadcast_to(np.asarray(theta_prime, float), inp.theta.shape)
    gamma1 = np.where(inp.u - up >= 0, r1.max(axis=0), r1.min(axis=0))
    gamma2 = np.where(inp.theta - tp >= 0, g1.max(axis=0)[None, :], g1.min(axis=0)[None, :])
    return gamma1, gamma2


def selector_slack(spec: ModelSpec, inp: DriverInput, u_prime, theta_prime):
    """``sum (u-u')gamma1 lambda + sum (theta-theta')gamma2 lambda - [psi(u,theta) - psi(u',theta')]``.

    Nonnegative wherever the selector inequality holds.
    """
    g1, g2 = gamma_selectors(spec, inp, u_prime, theta_prime)
    up = np.broadcast_to(np.asarray(u_prime, float), inp.u.shape)
    tp = np.broadcast_to(np.asarray(theta_prime, float), inp.theta.shape)
    lhs = eval_control_hamiltonian(spec, inp)[0] - eval_control_hamiltonian(spec, inp.replace(u=up, theta=tp))[0]
    rhs = np.sum((inp.u - up) * g1 * spec.nu1.intensities, axis=1)
    rhs = rhs + np.sum((inp.theta - tp) * g2 * spec.nu2.intensities, axis=1)
    return rhs - lhs


# ---------------------------------------------------------------------------
# Generic driver terms
# ---------------------------------------------------------------------------

class Term:
    deps = frozenset()

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    def __call__(self, inp):
        raise NotImplementedError

    def lipschitz(self):
        """Upper bounds on the Lipschitz constants in ``z, zeta, u, theta``."""
        return {}


def _weight(params, key, dim):
    w = np.asarray(params.get(key, 0.0), float)
    return np.full(dim, float(w)) if w.ndim == 0 else w.reshape(dim)


class HamiltonianTerm(Term):
    def __init__(self, spec, params):
        super().__init__(spec, params)
        deps = _control_sensitive(spec)
        if spec.coeffs.b.name != "zero":
            deps.add("z")
        if spec.coeffs.rho.name != "zero":
            deps.add("zeta")
        if spec.nu1.n_marks and not _is_one(spec.coeffs.r):
            deps.add("u")
        if spec.nu2.n_marks and not _is_one(spec.coeffs.gamma):
            deps.add("theta")
        self.deps = frozenset(deps)

    def __call__(self, inp):
        return eval_control_hamiltonian(self.spec, inp)[0]

    def lipschitz(self):
        spec = self.spec
        gen = rng.generator(0, "hamiltonian-lipschitz")
        x = 3 * gen.standard_normal((256, spec.dx))
        q = 3 * gen.standard_normal((256, spec.dq))
        inp = DriverInput.build(spec, n=256, x=x, q=q)
        f = spec.funcs
        Lz = Lzeta = 0.0
        for a in spec.coeffs.control_set:
            Lz = max(Lz, float(np.max(np.linalg.norm(f.b(x, q, a) @ spec.ops.R_inv.T, axis=1))))
            Lzeta = max(Lzeta, float(np.linalg.norm(f.rho(a))))
        r1, g1 = _r_table(spec, inp)
        Lu = float(np.sum(np.max(np.abs(r1), axis=(0, 1)) * spec.nu1.intensities)) if spec.nu1.n_marks else 0.0
        Lt = float(np.sum(np.max(np.abs(g1), axis=0) * spec.nu2.intensities)) if spec.nu2.n_marks else 0.0
        return {"z": Lz, "zeta": Lzeta, "u": Lu, "theta": Lt}


def _is_one(fs: FunctionSpec):
    return fs.name == "constant" and np.all(np.asarray(fs.params.get("value", 0.0)) == 1.0)


def _control_sensitive(spec):
    f = spec.funcs
    out = set()
    for arg in ("x", "q"):
        if f.l.depends_on(arg) or f.b.depends_on(arg) or f.r.depends_on(arg):
            out.add(arg)
    return out


class ConstantTerm(Term):
    def __call__(self, inp):
        return np.full(inp.n, float(self.params.get("value", 0.0)))


class LinearTerm(Term):
    """``sum_k <w_k, arg_k> + offset`` over the driver arguments."""

    def __init__(self, spec, params):
        super().__init__(spec, params)
        unknown = set(params) - set(ARGS) - {"offset"}
        if unknown:
            raise ConfigError(f"driver linear term: unknown parameters {sorted(unknown)}")
        dims = {"x": spec.dx, "q": spec.dq, "z": spec.dx, "zeta": spec.dw,
                "u": spec.nu1.n_marks, "theta": spec.nu2.n_marks}
        try:
            self.w = {k: _weight(params, k, dims[k]) for k in ARGS if k in params}
        except ValueError:
            raise ConfigError("driver linear term: dimension mismatch") from None
        self.deps = frozenset(k for k, v in self.w.items() if np.any(v != 0))

    def __call__(self, inp):
        out = np.full(inp.n, float(self.params.get("offset", 0.0)))
        for k, w in self.w.items():
            out = out + getattr(inp, k) @ w
        return out

    def lipschitz(self):
        return {k: float(np.linalg.norm(self.w[k])) if k in self.w else 0.0 for k in ("z", "zeta", "u", "theta")}


class SquareQTerm(Term):
    deps = frozenset({"q"})

    def __call__(self, inp):
        return float(self.params.get("coef", 1.0)) * np.sum(inp.q ** 2, axis=1)


class AbsZTerm(Term):
    deps = frozenset({"z"})

    def __call__(self, inp):
        return float(self.params.get("coef", 1.0)) * np.linalg.norm(inp.z, axis=1)

    def lipschitz(self):
        return {"z": abs(float(self.params.get("coef", 1.0)))}


class SinTerm(Term):
    """``amplitude * sum_i sin(frequency * arg_i + phase)`` for ``arg`` in ``x`` or ``q``."""

    def __init__(self, spec, params, arg):
        super().__init__(spec, params)
        self.arg = arg
        self.deps = frozenset({arg})

    def __call__(self, inp):
        p = self.params
        v = getattr(inp, self.arg)
        return float(p.get("amplitude", 1.0)) * np.sum(
            np.sin(float(p.get("frequency", 1.0)) * v + float(p.get("phase", 0.0))), axis=1)


TERMS = {
    "hamiltonian": HamiltonianTerm,
    "constant": ConstantTerm,
    "linear": LinearTerm,
    "square_q": SquareQTerm,
    "abs_z": AbsZTerm,
    "sin_q": lambda spec, p: SinTerm(spec, p, "q"),
    "sin_x": lambda spec, p: SinTerm(spec, p, "x"),
}


class Driver:
    """Sum of registered driver terms, evaluated on a :class:`DriverInput`."""

    def __init__(self, spec: ModelSpec, terms=None):
        self.spec = spec
        terms = spec.driver if terms is None else terms
        self.terms = []
        for t in terms:
            t = t if isinstance(t, FunctionSpec) else FunctionSpec.parse(t, "driver.terms")
            if t.name not in TERMS:
                raise ConfigError(f"unknown driver term '{t.name}' (known: {', '.join(TERMS)})")
            self.terms.append(TERMS[t.name](spec, dict(t.params)))
        self.specs = tuple(terms)

    def __call__(self, inp: DriverInput) -> np.ndarray:
        out = np.zeros(inp.n)
        for t in self.terms:
            out = out + t(inp)
        return out

    def depends_on(self, arg) -> bool:
        return any(arg in t.deps for t in self.terms)

    @property
    def is_hamiltonian(self):
        return len(self.terms) == 1 and isinstance(self.terms[0], HamiltonianTerm)

    def lipschitz(self):
        out = {"z": 0.0, "zeta": 0.0, "u": 0.0, "theta": 0.0}
        for t in self.terms:
            for k, v in t.lipschitz().items():
                out[k] += v
        return out


def build_driver(spec: ModelSpec, terms=None) -> Driver:
    return Driver(spec, terms)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

def _sample_inputs(spec, gen, n, scale=2.0):
    return DriverInput(
        x=scale * gen.standard_normal((n, spec.dx)), q=scale * gen.standard_normal((n, spec.dq)),
        z=scale * gen.standard_normal((n, spec.dx)), zeta=scale * gen.standard_normal((n, spec.dw)),
        u=scale * gen.standard_normal((n, spec.nu1.n_marks)),
        theta=scale * gen.standard_normal((n, spec.nu2.n_marks)))


def _quotients(driver, spec, inp, other, weights):
    out = {}
    base = driver(inp)
    for arg in ARGS:
        moved = inp.replace(**{arg: getattr(other, arg)})
        d = np.linalg.norm(getattr(inp, arg) - getattr(other, arg), axis=1)
        if getattr(inp, arg).shape[1] == 0:
            out[arg] = np.zeros(inp.n)
            continue
        if arg in ("u", "theta"):
            lam = spec.nu1.intensities if arg == "u" else spec.nu2.intensities
            d = np.sqrt(np.sum((getattr(inp, arg) - getattr(other, arg)) ** 2 * lam, axis=1))
        q = np.abs(driver(moved) - base) / np.where(d > 0, d, np.inf)
        if arg in ("x", "q"):
            q = q / weights
        out[arg] = q
    return out


def certify_driver(spec: ModelSpec, n_samples: int = 1000, seed: int = 0, driver=None) -> DriverCertificate:
    """Empirical ``M_psi``, Lipschitz constants and selector bands.

    Quotients in ``x`` and ``q`` are divided by ``1 + |z| + ||u||``.  A second
    batch at four times the scale re-checks that weighted form and sets
    ``weighted_form_ok`` to False when its quotients exceed the first batch's
    by more than 5 percent.  ``u`` and ``theta`` distances use the
    ``L2(nu)`` norm.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    drv = build_driver(spec) if driver is None else driver
    gen = rng.generator(seed, "certify_driver")
    inp = _sample_inputs(spec, gen, n_samples)
    other = _sample_inputs(spec, gen, n_samples)

    def weight(i):
        return 1.0 + np.linalg.norm(i.z, axis=1) + spec.nu1.l2_norm(i.u)

    quo = _quotients(drv, spec, inp, other, weight(inp))
    L = {k: float(np.max(v)) for k, v in quo.items()}
    zero = DriverInput.build(spec, n=n_samples, x=inp.x, q=inp.q)
    M_psi = float(np.max(np.abs(drv(zero))))
    big = _sample_inputs(spec, gen, n_samples, scale=8.0)
    big2 = _sample_inputs(spec, gen, n_samples, scale=8.0)
    quo_big = _quotients(drv, spec, big, big2, weight(big))
    ok = all(float(np.max(quo_big[k])) <= 1.05 * L[k] + 1e-12 for k in ("x", "q"))
    r1, g1 = _r_table(spec, inp)
    C1 = min(float(r1.min(initial=0.0)), 0.0)
    C2 = max(float(r1.max(initial=0.0)), 0.0)
    C1b = min(float(g1.min(initial=0.0)), 0.0)
    C2b = max(float(g1.max(initial=0.0)), 0.0)
    notes = [] if ok else ["x/q quotients grow faster than (1+|z|+||u||)"]
    return DriverCertificate(M_psi=M_psi, L_x=L["x"], L_q=L["q"], L_z=L["z"], L_zeta=L["zeta"],
                             L_u=L["u"], L_theta=L["theta"], C1=C1, C2=C2, C1_bar=C1b, C2_bar=C2b,
                             weighted_form_ok=ok, samples_used=n_samples, notes=notes)
