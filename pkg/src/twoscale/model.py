"""Problem description: operators, coefficient library, Lévy measures, config I/O.

A model is read from TOML text with sections ``[operators]``,
``[coefficients]``, ``[levy1]``, ``[levy2]``, ``[initial]``, ``[scales]``
and an optional ``[driver]``.  Coefficients are never user code; they are
``{name, params}`` references into a small registered library.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from functools import cached_property
from types import SimpleNamespace
from typing import Any

import numpy as np
import tomli
import tomli_w

from . import rng


class ConfigError(ValueError):
    """Raised for malformed or inconsistent model configurations."""


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Coefficient library
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionSpec:
    name: str
    params: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"name": self.name}
        if self.params:
            d["params"] = copy.deepcopy(self.params)
        return d

    @classmethod
    def parse(cls, obj, where):
        if isinstance(obj, str):
            return cls(obj, {})
        if not isinstance(obj, dict) or "name" not in obj:
            raise ConfigError(f"{where}: expected {{name, params}} table")
        extra = set(obj) - {"name", "params"}
        if extra:
            raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
        return cls(str(obj["name"]), dict(obj.get("params", {})))


def _matrix(value, out_dim, in_dim, where):
    m = np.asarray(value, dtype=float)
    if m.ndim == 0:
        if out_dim == in_dim:
            return float(m) * np.eye(in_dim)
        if out_dim == 1:
            return float(m) * np.ones((1, in_dim))
        raise ConfigError(f"{where}: scalar weight needs matching dimensions")
    if m.ndim == 1:
        if out_dim == 1 and m.size == in_dim:
            m = m.reshape(1, in_dim)
        elif in_dim == 1 and m.size == out_dim:
            m = m.reshape(out_dim, 1)
    if m.shape != (out_dim, in_dim):
        raise ConfigError(f"{where}: dimension mismatch, expected {out_dim}x{in_dim}, got {m.shape}")
    return m


def _vector(value, dim, where):
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        return np.full(dim, float(v))
    if v.shape != (dim,):
        raise ConfigError(f"{where}: dimension mismatch, expected length {dim}, got {v.shape}")
    return v


class Coefficient:
    """A vectorised library function with a fixed argument list.

    Arguments are arrays whose last axis is the argument dimension; leading
    axes broadcast.  Scalar-valued coefficients drop the output axis.
    """

    KINDS = ("zero", "constant", "linear", "affine", "sinusoidal", "quadratic")

    def __init__(self, fspec: FunctionSpec, arg_dims: dict, out_dim: int, scalar: bool, where: str):
        self.spec = fspec
        self.args = tuple(arg_dims)
        self.arg_dims = dict(arg_dims)
        self.out_dim = out_dim
        self.scalar = scalar
        name, p = fspec.name, fspec.params
        if name not in self.KINDS:
            raise ConfigError(f"{where}: unknown function '{name}' (known: {', '.join(self.KINDS)})")
        allowed = set(self.args) | {"value", "offset", "amplitude", "frequency", "phase", "on"}
        unknown = set(p) - allowed
        if unknown:
            raise ConfigError(f"{where}: unknown parameters {sorted(unknown)}")
        self.weights = {}
        self.quad = {}
        self.offset = np.zeros(out_dim)
        if name == "constant":
            self.offset = _vector(p.get("value", 0.0), out_dim, where)
        elif name in ("linear", "affine", "sinusoidal"):
            for a in self.args:
                if a in p:
                    self.weights[a] = _matrix(p[a], out_dim, self.arg_dims[a], f"{where}.{a}")
            if name == "sinusoidal" and not self.weights:
                on = p.get("on")
                if on not in self.arg_dims:
                    raise ConfigError(f"{where}: sinusoidal needs an argument weight or 'on'")
                self.weights[on] = _matrix(1.0, out_dim, self.arg_dims[on], where)
            if name != "linear":
                self.offset = _vector(p.get("offset", 0.0), out_dim, where)
            self.amplitude = _vector(p.get("amplitude", 1.0), out_dim, where)
            self.frequency = float(p.get("frequency", 1.0))
            self.phase = float(p.get("phase", 0.0))
        elif name == "quadratic":
            if out_dim != 1:
                raise ConfigError(f"{where}: quadratic is scalar-valued only")
            for a in self.args:
                if a in p:
                    self.quad[a] = float(p[a])
            self.offset = _vector(p.get("offset", 0.0), 1, where)

    def depends_on(self, arg):
        if arg in self.weights:
            return bool(np.any(self.weights[arg] != 0))
        return self.quad.get(arg, 0.0) != 0.0

    def __call__(self, *arrays):
        if len(arrays) != len(self.args):
            raise TypeError(f"{self.spec.name} expects {len(self.args)} arguments")
        vals = {a: np.asarray(v, dtype=float) for a, v in zip(self.args, arrays)}
        batch = np.broadcast_shapes(*(v.shape[:-1] for v in vals.values()))
        out = np.zeros(batch + (self.out_dim,))
        name = self.spec.name
        if name in ("linear", "affine", "sinusoidal"):
            inner = np.zeros_like(out)
            for a, m in self.weights.items():
                inner = inner + vals[a] @ m.T
            if name == "sinusoidal":
                inner = self.amplitude * np.sin(self.frequency * inner + self.phase)
            out = out + inner + self.offset
        elif name == "quadratic":
            for a, c in self.quad.items():
                out = out + c * np.sum(vals[a] ** 2, axis=-1, keepdims=True)
            out = out + self.offset
        else:
            out = out + self.offset
        return out[..., 0] if self.scalar else out


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevyMeasure:
    """Finite-support Lévy measure: jump ``marks[i]`` arrives at rate ``intensities[i]``."""

    marks: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.intensities, dtype=float).reshape(-1)
        marks = np.asarray(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks.reshape(-1, 1) if lam.size else marks.reshape(0, max(marks.size, 1))
        if marks.shape[0] != lam.size:
            raise ConfigError("dimension mismatch: marks and intensities differ in length")
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise ConfigError("nonpositive intensity in Lévy measure")
        if lam.size and np.any(np.all(marks == 0, axis=1)):
            raise ConfigError("zero jump mark in Lévy measure")
        object.__setattr__(self, "marks", _frozen(marks))
        object.__setattr__(self, "intensities", _frozen(lam))

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def n_marks(self):
        return self.intensities.size

    @property
    def dim(self):
        return self.marks.shape[1]

    @property
    def total_rate(self):
        return float(self.intensities.sum())

    @property
    def compensator(self):
        """Drift ``sum_i lambda_i w_i`` removed by compensation."""
        return self.intensities @ self.marks if self.n_marks else np.zeros(self.dim)

    @property
    def second_moment(self):
        return float(self.intensities @ np.sum(self.marks ** 2, axis=1)) if self.n_marks else 0.0

    def l2_norm(self, u):
        """``(sum_i lambda_i u_i^2)^(1/2)`` along the last axis."""
        return np.sqrt(np.sum(np.asarray(u) ** 2 * self.intensities, axis=-1))


@dataclass(frozen=True)
class OperatorSpec:
    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    G: np.ndarray
    R_inv: np.ndarray = None

    def __post_init__(self):
        A, B, R, G = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.A, self.B, self.R, self.G))
        dx, dq = A.shape[0], B.shape[0]
        if A.shape != (dx, dx) or B.shape != (dq, dq):
            raise ConfigError("dimension mismatch: A and B must be square")
        if R.shape != (dx, dx):
            raise ConfigError(f"dimension mismatch: R must be {dx}x{dx}")
        if G.shape[0] != dq:
            raise ConfigError(f"dimension mismatch: G must have {dq} rows")
        if self.R_inv is None:
            if np.linalg.matrix_rank(R) < dx:
                raise ConfigError("R not invertible")
            R_inv = np.linalg.inv(R)
        else:
            R_inv = np.atleast_2d(np.asarray(self.R_inv, dtype=float))
            if R_inv.shape != (dx, dx):
                raise ConfigError("dimension mismatch: R_inv")
        if not np.allclose(R @ R_inv, np.eye(dx), atol=1e-10, rtol=0):
            raise ConfigError("R not invertible (R·R_inv differs from identity)")
        for name, m in zip("ABRG", (A, B, R, G)):
            object.__setattr__(self, name, _frozen(m))
        object.__setattr__(self, "R_inv", _frozen(R_inv))

    @property
    def dx(self):
        return self.A.shape[0]

    @property
    def dq(self):
        return self.B.shape[0]

    @property
    def dw(self):
        return self.G.shape[1]


COEFFICIENTS = ("F", "b", "rho", "r", "gamma", "l", "h")
CONSTANTS = ("L_F", "L_b", "L_r", "L_l", "L_h", "M_prime", "M_l", "M_h", "C_r", "eta", "C_gamma", "eta_prime")


@dataclass(frozen=True)
class CoefficientSpec:
    F: FunctionSpec = FunctionSpec("zero")
    b: FunctionSpec = FunctionSpec("zero")
    rho: FunctionSpec = FunctionSpec("zero")
    r: FunctionSpec = FunctionSpec("constant", {"value": 1.0})
    gamma: FunctionSpec = FunctionSpec("constant", {"value": 1.0})
    l: FunctionSpec = FunctionSpec("zero")
    h: FunctionSpec = FunctionSpec("zero")
    control_set: np.ndarray = None
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        cs = np.array([[0.0]]) if self.control_set is None else np.asarray(self.control_set, dtype=float)
        if cs.ndim == 1:
            cs = cs.reshape(-1, 1)
        if cs.ndim != 2 or cs.shape[0] == 0:
            raise ConfigError("control_set must be a nonempty list of control points")
        object.__setattr__(self, "control_set", _frozen(cs))
        bad = set(self.constants) - set(CONSTANTS)
        if bad:
            raise ConfigError(f"unknown constants {sorted(bad)}")


@dataclass(frozen=True)
class ModelSpec:
    ops: OperatorSpec
    coeffs: CoefficientSpec
    nu1: LevyMeasure
    nu2: LevyMeasure
    x0: np.ndarray
    q0: np.ndarray
    epsilon: float = 1.0
    horizon: float = 1.0
    fast_step_ratio: float = 0.1
    max_stiffness: float = 1.0
    driver: tuple = (FunctionSpec("hamiltonian"),)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        ops = self.ops
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        q0 = np.asarray(self.q0, dtype=float).reshape(-1)
        if x0.size != ops.dx or q0.size != ops.dq:
            raise ConfigError("dimension mismatch: initial state")
        if self.nu1.dim != ops.dx or self.nu2.dim != ops.dq:
            raise ConfigError("dimension mismatch: Lévy marks must live in the slow/fast state spaces")
        if not (0 < self.epsilon <= 1):
            raise ConfigError("epsilon must lie in (0, 1]")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        object.__setattr__(self, "x0", _frozen(x0))
        object.__setattr__(self, "q0", _frozen(q0))
        object.__setattr__(self, "driver", tuple(self.driver))
        self.funcs  # builds every coefficient, surfacing dimension errors at load time

    @property
    def dx(self):
        return self.ops.dx

    @property
    def dq(self):
        return self.ops.dq

    @property
    def dw(self):
        return self.ops.dw

    @property
    def da(self):
        return self.coeffs.control_set.shape[1]

    @cached_property
    def funcs(self):
        dx, dq, dw, da = self.dx, self.dq, self.dw, self.da
        c = self.coeffs
        table = {
            "F": ({"x": dx, "q": dq}, dq, False),
            "b": ({"x": dx, "q": dq, "a": da}, dx, False),
            "rho": ({"a": da}, dw, False),
            "r": ({"x": dx, "q": dq, "a": da, "w": dx}, 1, True),
            "gamma": ({"a": da, "w": dq}, 1, True),
            "l": ({"x": dx, "q": dq, "a": da}, 1, True),
            "h": ({"x": dx}, 1, True),
        }
        built = {}
        for name, (args, out, scalar) in table.items():
            built[name] = Coefficient(getattr(c, name), args, out, scalar, f"coefficients.{name}")
        return SimpleNamespace(**built)

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ModelSpec(**fields)


@dataclass
class AssumptionReport:
    mu_hat: float
    lipschitz_violations: int
    bound_violations: int
    samples_used: int
    details: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.lipschitz_violations == 0 and self.bound_violations == 0 and not (self.mu_hat <= 0)


# ---------------------------------------------------------------------------
# Config I/O
# ---------------------------------------------------------------------------

_SECTIONS = ("operators", "coefficients", "levy1", "levy2", "initial", "scales", "driver")


def _levy(section, dim, where):
    marks = section.get("marks", [])
    lam = section.get("intensities", [])
    if len(marks) == 0:
        if len(lam):
            raise ConfigError(f"{where}: intensities without marks")
        return LevyMeasure.empty(dim)
    marks = np.asarray(marks, dtype=float)
    if marks.ndim == 1:
        marks = marks.reshape(-1, 1)
    if marks.shape[1] != dim:
        raise ConfigError(f"{where}: dimension mismatch, marks must have dimension {dim}")
    return LevyMeasure(marks, lam)


def model_from_dict(cfg: dict) -> ModelSpec:
    try:
        op = cfg["operators"]
        ops = OperatorSpec(op["A"], op["B"], op["R"], op.get("G", np.zeros((len(op["B"]), 1))),
                           op.get("R_inv"))
    except KeyError as exc:
        raise ConfigError(f"operators: missing {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"operators: {exc}") from None
    co = dict(cfg.get("coefficients", {}))
    kw = {}
    for name in COEFFICIENTS:
        if name in co:
            kw[name] = FunctionSpec.parse(co.pop(name), f"coefficients.{name}")
    if "control_set" in co:
        kw["control_set"] = co.pop("control_set")
    kw["constants"] = {k: float(v) for k, v in co.pop("constants", {}).items()}
    if co:
        raise ConfigError(f"coefficients: unknown keys {sorted(co)}")
    coeffs = CoefficientSpec(**kw)
    nu1 = _levy(cfg.get("levy1", {}), ops.dx, "levy1")
    nu2 = _levy(cfg.get("levy2", {}), ops.dq, "levy2")
    init = cfg.get("initial", {})
    sc = cfg.get("scales", {})
    terms = cfg.get("driver", {}).get("terms", [{"name": "hamiltonian"}])
    driver = tuple(FunctionSpec.parse(t, "driver.terms") for t in terms)
    extras = {k: copy.deepcopy(v) for k, v in cfg.items() if k not in _SECTIONS}
    return ModelSpec(
        ops=ops, coeffs=coeffs, nu1=nu1, nu2=nu2,
        x0=init.get("x0", np.zeros(ops.dx)), q0=init.get("q0", np.zeros(ops.dq)),
        epsilon=float(sc.get("epsilon", 1.0)), horizon=float(sc.get("horizon", 1.0)),
        fast_step_ratio=float(sc.get("fast_step_ratio", 0.1)),
        max_stiffness=float(sc.get("max_stiffness", 1.0)),
        driver=driver, extras=extras,
    )


def load_model(config_text: str) -> ModelSpec:
    """Parse TOML config text into a validated :class:`ModelSpec`."""
    try:
        cfg = tomli.loads(config_text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"parse failure: {exc}") from None
    return model_from_dict(cfg)


def load_model_file(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return load_model(fh.read())


def _lists(a):
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(spec: ModelSpec) -> dict:
    c = spec.coeffs
    coeffs = {name: getattr(c, name).to_dict() for name in COEFFICIENTS}
    coeffs["control_set"] = _lists(c.control_set)
    if c.constants:
        coeffs["constants"] = dict(c.constants)
    out = {
        "operators": {"A": _lists(spec.ops.A), "B": _lists(spec.ops.B), "R": _lists(spec.ops.R),
                      "G": _lists(spec.ops.G), "R_inv": _lists(spec.ops.R_inv)},
        "coefficients": coeffs,
        "levy1": {"marks": _lists(spec.nu1.marks), "intensities": _lists(spec.nu1.intensities)},
        "levy2": {"marks": _lists(spec.nu2.marks), "intensities": _lists(spec.nu2.intensities)},
        "initial": {"x0": _lists(spec.x0), "q0": _lists(spec.q0)},
        "scales": {"epsilon": spec.epsilon, "horizon": spec.horizon,
                   "fast_step_ratio": spec.fast_step_ratio, "max_stiffness": spec.max_stiffness},
        "driver": {"terms": [t.to_dict() for t in spec.driver]},
    }
    out.update(copy.deepcopy(spec.extras))
    return out


def serialize_model(spec: ModelSpec) -> str:
    """TOML text that :func:`load_model` maps back to an identical spec.

    Floats are written with ``repr``, the shortest string that round-trips
    the IEEE double exactly (never more than 17 significant digits).
    """
    return tomli_w.dumps(model_to_dict(spec))


# ---------------------------------------------------------------------------
# Empirical assumption checks
# ---------------------------------------------------------------------------

def _normal(gen, n, d, scale):
    return scale * gen.standard_normal((n, d))


def dissipativity_ratio(spec: ModelSpec, x, q, qp):
    """``-<drift(q) - drift(q'), q - q'> / |q - q'|^2`` for frozen ``x``."""
    F, B = spec.funcs.F, spec.ops.B
    dq = q - qp
    ddrift = q @ B.T + F(x, q) - qp @ B.T - F(x, qp)
    return -np.sum(ddrift * dq, axis=-1) / np.sum(dq * dq, axis=-1)


def check_dissipativity(spec: ModelSpec, n_samples: int = 2000, rng_seed: int = 0,
                        scale: float = 3.0) -> AssumptionReport:
    """Sampled one-sided Lipschitz constant of ``q -> Bq + F(x, q)``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gen = rng.generator(rng_seed, "dissipativity")
    x = _normal(gen, n_samples, spec.dx, scale)
    q = _normal(gen, n_samples, spec.dq, scale)
    qp = _normal(gen, n_samples, spec.dq, scale)
    ratio = dissipativity_ratio(spec, x, q, qp)
    mu_hat = float(np.min(ratio))
    return AssumptionReport(mu_hat=mu_hat, lipschitz_violations=int(np.sum(ratio <= 0)),
                            bound_violations=0, samples_used=n_samples,
                            details={"ratio_max": float(np.max(ratio))})


def _exceeds(value, bound):
    return value > bound * (1 + 1e-12) + 1e-12


def check_lipschitz_bounds(spec: ModelSpec, n_samples: int = 2000, rng_seed: int = 0,
                           scale: float = 3.0) -> AssumptionReport:
    """Count sampled pairs that break each declared Lipschitz constant or bound.

    Undeclared constants are skipped and listed under ``details['skipped']``.
    """
    K = spec.coeffs.constants
    f = spec.funcs
    gen = rng.generator(rng_seed, "lipschitz")
    n = n_samples
    x, xp = _normal(gen, n, spec.dx, scale), _normal(gen, n, spec.dx, scale)
    q, qp = _normal(gen, n, spec.dq, scale), _normal(gen, n, spec.dq, scale)
    dist = np.linalg.norm(x - xp, axis=1) + np.linalg.norm(q - qp, axis=1)
    controls = spec.coeffs.control_set
    lip, bnd = {}, {}

    def norm(v):
        return np.abs(v) if v.ndim == 1 else np.linalg.norm(v, axis=-1)

    if "L_F" in K:
        lip["L_F"] = int(np.sum(_exceeds(norm(f.F(x, q) - f.F(xp, qp)), K["L_F"] * dist)))
    if "L_b" in K:
        lip["L_b"] = sum(int(np.sum(_exceeds(norm(f.b(x, q, a) - f.b(xp, qp, a)), K["L_b"] * dist)))
                         for a in controls)
    if "L_r" in K:
        lip["L_r"] = sum(int(np.sum(_exceeds(np.abs(f.r(x, q, a, w) - f.r(xp, qp, a, w)), K["L_r"] * dist)))
                         for a in controls for w in spec.nu1.marks)
    if "L_l" in K:
        lip["L_l"] = sum(int(np.sum(_exceeds(np.abs(f.l(x, q, a) - f.l(xp, qp, a)), K["L_l"] * dist)))
                         for a in controls)
    if "L_h" in K:
        lip["L_h"] = int(np.sum(_exceeds(np.abs(f.h(x) - f.h(xp)), K["L_h"] * np.linalg.norm(x - xp, axis=1))))
    if "M_prime" in K:
        bnd["M_prime"] = sum(int(np.sum(_exceeds(norm(f.b(x, q, a)) + np.linalg.norm(f.rho(a)), K["M_prime"])))
                             for a in controls)
    if "M_l" in K:
        bnd["M_l"] = sum(int(np.sum(_exceeds(np.abs(f.l(x, q, a)), K["M_l"]))) for a in controls)
    if "M_h" in K:
        bnd["M_h"] = int(np.sum(_exceeds(np.abs(f.h(x)), K["M_h"])))
    if "C_r" in K or "eta" in K:
        vals = [f.r(x, q, a, w) for a in controls for w in spec.nu1.marks]
        vals = np.concatenate(vals) if vals else np.zeros(0)
        if "C_r" in K:
            bnd["C_r"] = int(np.sum(_exceeds(vals, K["C_r"])))
        if "eta" in K:
            bnd["eta"] = int(np.sum(_exceeds(-vals, -K["eta"])))
    if "C_gamma" in K or "eta_prime" in K:
        vals = np.array([f.gamma(a, w) for a in controls for w in spec.nu2.marks], dtype=float)
        if "C_gamma" in K:
            bnd["C_gamma"] = int(np.sum(_exceeds(vals, K["C_gamma"])))
        if "eta_prime" in K:
            bnd["eta_prime"] = int(np.sum(_exceeds(-vals, -K["eta_prime"])))
    skipped = [c for c in CONSTANTS if c not in K]
    return AssumptionReport(
        mu_hat=math.nan, lipschitz_violations=sum(lip.values()), bound_violations=sum(bnd.values()),
        samples_used=n, details={"lipschitz": lip, "bounds": bnd, "skipped": skipped},
    )


def parse_spec(obj: Any) -> ModelSpec:
    """Accept a ModelSpec, a config dict or TOML text."""
    if isinstance(obj, ModelSpec):
        return obj
    if isinstance(obj, dict):
        return model_from_dict(obj)
    return load_model(obj)
