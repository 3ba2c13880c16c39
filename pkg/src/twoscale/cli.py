"""Batch command line: ``twoscale <subcommand> --config F [--out DIR] ...``.

Every run writes its CSV/JSON results into ``--out`` and finishes with
``manifest.json``; a directory without a manifest holds an incomplete run.

Exit codes: 0 pass, 2 inconclusive, 1 numerical failure, 64 usage error,
65 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, io, rng
from .bsde import RegressionBasis, SingularRegressionError, markovian_decoder, slice_summary, solve_full_bsde
from .ergodic import (CertificationError, LambdaMap, LambdaQuery, NonDissipativeError, build_lambda_map,
                      lambda_oracle_timeavg, lambda_pointwise)
from .forward import GridSpec, StiffnessError, simulate
from .girsanov import (GirsanovSpec, MeasureChangeError, check_spec_integrability, constant_policy,
                       control_measure, doleans_dade, effective_sample_size)
from .hamiltonian import build_driver, certify_driver
from .model import ConfigError, check_dissipativity, check_lipschitz_bounds, load_model
from .reduction import (FAIL, INCONCLUSIVE, PASS, DualSpec, WidenBoxError, biconjugate_error, conjugate_table,
                        conjugate_upper_bound_ok, dyadic_diagnostics, epsilon_sweep, exact_lambda_map,
                        reduced_control_value, strictly_decreasing, value_function)

log = logging.getLogger("twoscale")

EXIT_OK, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 64, 65
VERDICT_EXIT = {PASS: EXIT_OK, INCONCLUSIVE: EXIT_INCONCLUSIVE, FAIL: EXIT_FAIL}
NUMERICAL_ERRORS = (StiffnessError, SingularRegressionError, CertificationError, NonDissipativeError,
                    WidenBoxError, MeasureChangeError, FloatingPointError, np.linalg.LinAlgError)

# (paths, steps) when neither the flags nor [run] give them
DEFAULTS = {
    "check": (2000, 1), "simulate": (1000, 100), "bsde": (10000, 100), "lambda": (2000, 1),
    "sweep": (10000, 200), "value": (10000, 100), "dual": (10000, 100), "diagnostics": (10000, 256),
    "girsanov-check": (100000, 50),
}

COLUMNS = {
    "check": "check.json: mu_hat, lipschitz/bound violation counts, driver certificate.",
    "simulate": "trajectory_NNNN.csv: t, X_1..X_dx, Q_1..Q_dq\n"
                "jumps_NNNN.csv: t, measure_id, mark_index\n"
                "moments.csv: t, mean_X_i, var_X_i, mean_Q_j, var_Q_j",
    "bsde": "solution.csv: " + ", ".join(io.SOLUTION_HEADER) + "\nsolution_decoder.json: fitted coefficients",
    "lambda": "lambda_map.json: header (box, resolution, alpha, certificates)\n"
              "lambda_map.csv: x.., z.., u.., lambda\n"
              "lambda_points.csv: point, lambda, se, oracle, oracle_se",
    "sweep": "sweep.csv: epsilon, Y0_eps, ci_lo, ci_hi, se_eps, Y0_bar, gap, combined_se",
    "value": "value.csv: policy, cost, se, ess, bsde, bsde_se",
    "dual": "dual.csv: schedule, value, se, ess, weak_duality_ok",
    "diagnostics": "diagnostics.csv: N, delta_x, delta_z, delta_u, delta_z_cell0, delta_u_cell0",
    "girsanov-check": "girsanov.csv: tilt, mean_weight, se, ess, ui_exponent, ui_passed, within_3se\n"
                      "counts.csv: tilt, measure_id, mark_index, tilted_count, se, expected\n"
                      "weights_<tilt>.csv: path_id, log_weight_T",
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run context
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, args, spec, config_bytes):
        self.args = args
        self.spec = spec
        self.cfg = spec.extras
        run = self.section("run")
        self.seed = int(args.seed if args.seed is not None else run.get("seed", 0))
        paths, steps = DEFAULTS[args.command]
        self.paths = int(args.paths if args.paths is not None else run.get("paths", paths))
        self.steps = int(args.steps if args.steps is not None else run.get("steps", steps))
        self.threads = int(args.threads if args.threads is not None else run.get("threads", 1))
        if self.paths < 2 or self.steps < 1 or self.threads < 1:
            raise ConfigError("paths must be >= 2, steps and threads >= 1")
        b = run.get("basis", {})
        try:
            self.basis = RegressionBasis(**b) if b else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"run.basis: {exc}") from None
        self.out = Path(args.out)
        self.config_bytes = config_bytes
        self.files = []
        self.summary = {}

    def section(self, name):
        s = self.cfg.get(name, {})
        if not isinstance(s, dict):
            raise ConfigError(f"[{name}] must be a table")
        return s

    @property
    def grid(self):
        return GridSpec(self.steps, self.spec.horizon)

    def csv(self, name, header, rows):
        self.files.append(io.write_csv(self.out / name, header, rows))

    def json(self, name, obj):
        self.files.append(io.write_json(self.out / name, obj))

    def plot(self, fn, name, *a):
        if self.args.plot:
            from . import plotting
            self.files.append(getattr(plotting, fn)(*a, self.out / name))


def _axes(box, resolution):
    return [np.linspace(lo, hi, int(r)) if int(r) > 1 else np.array([0.5 * (lo + hi)])
            for (lo, hi), r in zip(box, resolution)]


def _lambda_map(run: Run, cached=False):
    """LambdaMap from ``[lambda]``; ``None`` lets the sweep use the exact map."""
    spec = run.spec
    sec = run.section("lambda")
    mode = sec.get("mode")
    dx, m1 = spec.dx, spec.nu1.n_marks
    lam1 = spec.nu1.intensities
    if mode is None and not cached:
        return None
    mode = mode or "exact"
    if mode == "constant":
        if "value" not in sec:
            raise ConfigError("[lambda] mode=constant needs value")
        return LambdaMap.constant(dx, m1, float(sec["value"]), lam1)
    if mode == "table":
        path = Path(sec.get("file", ""))
        if not path.is_absolute():
            path = Path(run.args.config).parent / path
        if not path.exists():
            raise ConfigError(f"[lambda] table file {path} not found")
        return io.load_lambda_map(path)
    box, res = sec.get("box"), sec.get("resolution")
    if mode == "exact":
        try:
            lm = exact_lambda_map(spec)
        except ValueError as exc:
            raise ConfigError(f"[lambda] mode=exact: {exc}") from None
        if not cached and box is None:
            return lm
        if box is None or res is None:
            raise ConfigError("[lambda] needs box and resolution for a cached map")
        _check_box(box, res, dx, m1)
        return LambdaMap.from_function(dx, m1, lm.fn, _axes(box, res), intensities=lam1)
    if mode == "ergodic":
        if box is None or res is None:
            raise ConfigError("[lambda] mode=ergodic needs box and resolution")
        _check_box(box, res, dx, m1)
        return build_lambda_map(spec, box, res, alpha=float(sec.get("alpha", 0.1)),
                                n_paths=int(sec.get("paths", 2000)), seed=rng.derive_seed(run.seed, "lambda"),
                                tol=float(sec.get("tol", 0.02)), n_holdout=int(sec.get("holdout", 4)))
    raise ConfigError(f"[lambda] unknown mode {mode!r} (exact, constant, ergodic, table)")


def _check_box(box, res, dx, m1):
    if len(box) != 2 * dx + m1 or len(res) != len(box):
        raise ConfigError(f"[lambda] box/resolution need {2 * dx + m1} entries (x.., z.., u..)")
    if any(len(b) != 2 or b[0] > b[1] for b in box):
        raise ConfigError("[lambda] box entries must be [lo, hi] with lo <= hi")


# ---------------------------------------------------------------------------
# Subcommands; each returns a verdict string
# ---------------------------------------------------------------------------

def cmd_check(run: Run):
    spec = run.spec
    sec = run.section("check")
    n = int(sec.get("samples", run.paths))
    rep = {"dx": spec.dx, "dq": spec.dq, "dw": spec.dw, "m1": spec.nu1.n_marks, "m2": spec.nu2.n_marks}
    ok = True
    if spec.dq:
        d = check_dissipativity(spec, n_samples=n, rng_seed=run.seed)
        rep["mu_hat"] = d.mu_hat
        rep["dissipativity_violations"] = d.lipschitz_violations
        ok &= d.ok
    lip = check_lipschitz_bounds(spec, n_samples=n, rng_seed=run.seed)
    rep["lipschitz_violations"] = lip.lipschitz_violations
    rep["bound_violations"] = lip.bound_violations
    rep["constants"] = lip.details
    ok &= lip.ok
    rep["driver"] = certify_driver(spec, n_samples=min(n, 1000), seed=run.seed).to_dict()
    rep["verdict"] = PASS if ok else FAIL
    run.json("check.json", rep)
    run.summary = {"mu_hat": rep.get("mu_hat", math.nan), "verdict": rep["verdict"]}
    return rep["verdict"]


def cmd_simulate(run: Run):
    sec = run.section("simulate")
    eps = sec.get("epsilon")
    ens = simulate(run.spec, run.grid, run.paths, run.seed, epsilon=eps, fast=run.spec.dq > 0, threads=run.threads)
    run.files += io.dump_trajectories(run.out, ens, run.grid, int(sec.get("max_paths", 10)))
    XT = ens.X[:, -1]
    run.summary = {"n_paths": run.paths, "n_steps": run.steps, "epsilon": ens.noise.epsilon,
                   "substeps": ens.noise.substeps, "mean_X_T": XT.mean(axis=0), "var_X_T": XT.var(axis=0, ddof=1),
                   "n_jumps1": int(ens.noise.counts1.sum()), "n_jumps2": int(ens.noise.counts2_sub.sum()),
                   "verdict": PASS}
    run.json("simulate.json", run.summary)
    run.plot("plot_trajectories", "trajectories.png", ens, run.grid)
    return PASS


def cmd_bsde(run: Run):
    spec = run.spec
    sec = run.section("bsde")
    eps = float(sec.get("epsilon", spec.epsilon))
    ens = simulate(spec, run.grid, run.paths, run.seed, epsilon=eps, threads=run.threads)
    sol = solve_full_bsde(spec, run.grid, ens, basis=run.basis, seed=run.seed)
    run.files += io.dump_solution(run.out, sol, markovian_decoder(sol))
    run.summary = {"Y0": sol.Y0, "se": sol.se, "ci": list(sol.ci), "epsilon": eps, "picard_bound": sol.picard_bound,
                   "notes": sol.notes, "verdict": PASS}
    if "expected" in sec:
        tol = max(3 * sol.se, float(sec.get("tol", 5e-3)))
        run.summary["expected"] = float(sec["expected"])
        run.summary["verdict"] = PASS if abs(sol.Y0 - float(sec["expected"])) <= tol else FAIL
    run.json("bsde.json", run.summary)
    run.plot("plot_solution", "solution.png", slice_summary(sol))
    return run.summary["verdict"]


def cmd_lambda(run: Run):
    spec = run.spec
    sec = run.section("lambda")
    verdict = PASS
    if sec.get("mode") is not None or "box" in sec:
        lm = _lambda_map(run, cached=True)
        run.files += io.dump_lambda_map(run.out, lm)
        run.plot("plot_lambda", "lambda_map.png", lm)
    rows = []
    drv = build_driver(spec)
    for i, pt in enumerate(sec.get("points", [])):
        q = LambdaQuery.build(spec, x=pt.get("x"), z=pt.get("z"), u=pt.get("u"))
        seed = rng.derive_seed(run.seed, "point", i)
        sol = lambda_pointwise(spec, q, alpha=float(sec.get("alpha", 0.1)), n_paths=run.paths, seed=seed, driver=drv)
        orc, ose = math.nan, math.nan
        if not (drv.depends_on("zeta") or drv.depends_on("theta")):
            o = lambda_oracle_timeavg(spec, q, n_paths=run.paths, seed=seed, driver=drv)
            orc, ose = o.value, o.se
            if abs(sol.lambda_value - orc) > 3 * math.hypot(sol.se, ose) + float(sec.get("tol", 0.0)):
                verdict = FAIL
        rows.append([i, sol.lambda_value, sol.se, orc, ose])
    if rows:
        run.csv("lambda_points.csv", ["point", "lambda", "se", "oracle", "oracle_se"], rows)
    run.summary = {"n_points": len(rows), "verdict": verdict}
    run.json("lambda.json", run.summary)
    return verdict


def cmd_sweep(run: Run):
    sec = run.section("sweep")
    kw = {}
    if "epsilons" in sec:
        kw["epsilons"] = sec["epsilons"]
    try:
        res = epsilon_sweep(run.spec, grid=run.grid, n_paths=run.paths, lambda_map=_lambda_map(run),
                            basis=run.basis, seed=run.seed, tol=float(sec.get("tol", 1e-2)),
                            partition_N=sec.get("partition_N"), threads=run.threads, **kw)
    except ValueError as exc:
        if isinstance(exc, NUMERICAL_ERRORS):
            raise
        raise ConfigError(f"[sweep]: {exc}") from None
    run.csv("sweep.csv", ["epsilon", "Y0_eps", "ci_lo", "ci_hi", "se_eps", "Y0_bar", "gap", "combined_se"],
            res.rows())
    run.summary = res.to_dict()
    run.json("sweep.json", run.summary)
    run.plot("plot_sweep", "sweep.png", res)
    return res.verdict


def cmd_value(run: Run):
    sec = run.section("value")
    res = value_function(run.spec, grid=run.grid, n_paths=run.paths, basis=run.basis, seed=run.seed,
                         epsilon=sec.get("epsilon"), threads=run.threads)
    run.csv("value.csv", ["policy", "cost", "se", "ess", "bsde", "bsde_se"],
            [[p.name, p.value, p.se, p.ess, res.bsde, res.bsde_se] for p in res.policies])
    verdict = PASS if res.ordering_ok else FAIL
    run.summary = dict(res.to_dict(), verdict=verdict)
    if sec.get("expect_equal"):
        # singleton control set: the BSDE value is the policy cost
        p = res.policies[0]
        tol = 3 * math.hypot(p.se, res.bsde_se) + float(sec.get("tol", 0.0))
        run.summary["equality_gap"] = res.bsde - p.value
        if abs(res.bsde - p.value) > tol:
            verdict = run.summary["verdict"] = FAIL
    run.json("value.json", run.summary)
    run.plot("plot_values", "value.png", res)
    return verdict


def _dual_spec(run: Run, lm: LambdaMap):
    spec = run.spec
    sec = run.section("dual")
    lam1 = spec.nu1.intensities
    L_z = float(sec.get("L_z", lm.certificates.get("L_z", 1.0)))
    L_u = float(sec.get("L_u", lm.certificates.get("L_u", 0.0) if lam1.size else 0.0))
    n_cells = int(sec.get("n_cells", 4))
    try:
        if "p_grid" in sec:
            p = np.asarray(sec["p_grid"], float).reshape(-1, spec.dx)
            v = np.asarray(sec.get("v_grid", [[1.0] * lam1.size]), float)
            return DualSpec(p, v, L_z, L_u, lam1, n_cells)
        return DualSpec.regular(spec.dx, lam1, L_z, L_u, int(sec.get("n_p", 5)), int(sec.get("n_v", 3)), n_cells)
    except ValueError as exc:
        raise ConfigError(f"[dual]: {exc}") from None


def cmd_dual(run: Run):
    sec = run.section("dual")
    lm = _lambda_map(run, cached=True)
    dual = _dual_spec(run, lm)
    on_bd = sec.get("on_boundary", "raise")
    table = conjugate_table(lm, dual, on_bd)
    res = reduced_control_value(run.spec, lm, dual, grid=run.grid, n_paths=run.paths, seed=run.seed, table=table,
                                tol=float(sec.get("tol", 2e-2)), basis=run.basis,
                                max_schedules=int(sec.get("max_schedules", 4096)), on_boundary=on_bd,
                                threads=run.threads)
    res.biconjugate_error = biconjugate_error(lm, table)
    run.csv("dual.csv", ["schedule", "value", "se", "ess", "weak_duality_ok"],
            [[res.schedule_label(dual, s), s.value, s.se, s.ess, s.weak_ok] for s in res.schedules])
    run.summary = res.to_dict(dual)
    run.summary["conjugate_upper_bound_ok"] = conjugate_upper_bound_ok(lm, table)
    run.json("dual.json", run.summary)
    run.plot("plot_dual", "dual.png", res)
    return res.verdict


def cmd_diagnostics(run: Run):
    sec = run.section("diagnostics")
    N_list = [int(n) for n in sec.get("N_list", [2, 3, 4, 5, 6])]
    if run.steps % 2 ** max(N_list):
        raise ConfigError(f"steps={run.steps} must be a multiple of 2^{max(N_list)}")
    rows = dyadic_diagnostics(run.spec, N_list, grid=run.grid, n_paths=run.paths, lambda_map=_lambda_map(run),
                              seed=run.seed, basis=run.basis, threads=run.threads)
    run.csv("diagnostics.csv", ["N", "delta_x", "delta_z", "delta_u", "delta_z_cell0", "delta_u_cell0"],
            [[r.N, r.delta_x, r.delta_z, r.delta_u, r.delta_z_cell0, r.delta_u_cell0] for r in rows])
    dec = {k: strictly_decreasing([getattr(r, k) for r in rows]) for k in ("delta_x", "delta_z", "delta_u")}
    if not run.spec.nu1.n_marks:
        dec["delta_u"] = True  # identically zero without slow jumps
    verdict = PASS if all(dec.values()) else FAIL
    run.summary = {"N_list": N_list, "strictly_decreasing": dec, "rows": [r.__dict__ for r in rows],
                   "verdict": verdict}
    run.json("diagnostics.json", run.summary)
    run.plot("plot_dyadic", "diagnostics.png", rows)
    return verdict


def _default_tilts(spec):
    m1, m2 = spec.nu1.n_marks, spec.nu2.n_marks
    tilts = [{"label": "wiener", "beta1": 0.5, "beta2": 0.3 if spec.dw else 0.0}]
    if m1:
        tilts.append({"label": "jump1_up", "gamma1": 1.5})
    if m2:
        tilts.append({"label": "jump2_down", "gamma2": 0.5})
    if m1 or m2:
        tilts.append({"label": "combined", "beta1": -0.4, "gamma1": 0.7 if m1 else None,
                      "gamma2": 1.3 if m2 else None})
    if spec.coeffs.control_set.shape[0]:
        tilts.append({"label": "control", "policy": 0})
    tilts.append({"label": "dual", "beta1": -1.0, "gamma1": 0.8 if m1 else None})
    return tilts


def _gspec(spec, t):
    if "policy" in t:
        idx = int(t["policy"])
        if not 0 <= idx < spec.coeffs.control_set.shape[0]:
            raise ConfigError(f"[girsanov] tilt {t.get('label')}: policy index out of range")
        g = control_measure(spec, constant_policy(idx))
        g.label = t.get("label", f"policy{idx}")
        return g
    kw = {}
    for key, dim in (("beta1", spec.dx), ("beta2", spec.dw), ("gamma1", spec.nu1.n_marks),
                     ("gamma2", spec.nu2.n_marks)):
        val = t.get(key)
        if val is None:
            continue
        arr = np.broadcast_to(np.asarray(val, float).reshape(-1), (dim,)).copy()
        kw[key] = arr
    beta = [np.linalg.norm(kw[k]) for k in ("beta1", "beta2") if k in kw]
    gam = [kw[k] for k in ("gamma1", "gamma2") if k in kw and kw[k].size]
    gcat = np.concatenate(gam) if gam else np.ones(1)
    return GirsanovSpec.for_model(spec, epsilon=spec.epsilon, beta_bound=math.hypot(*beta) if beta else 0.0,
                                  gamma_min=float(gcat.min()), gamma_max=float(gcat.max()),
                                  label=t.get("label", "tilt"), **kw)


def cmd_girsanov(run: Run):
    spec = run.spec
    sec = run.section("girsanov")
    tilts = sec.get("tilts") or _default_tilts(spec)
    ens = simulate(spec, run.grid, run.paths, run.seed, fast=spec.dq > 0, threads=run.threads)
    T = spec.horizon
    rows, counts, logw = [], [], {}
    ok = True
    for t in tilts:
        g = _gspec(spec, t)
        lw = doleans_dade(g, ens, run.grid, spec).log_weight[:, -1]
        w = np.exp(lw)
        mean, se = float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size))
        within = abs(mean - 1.0) <= 3 * se + 1e-12
        ok &= within
        ui = check_spec_integrability(g, spec, T)
        rows.append([g.label, mean, se, effective_sample_size(w), ui.exponent, ui.passed, within])
        logw[g.label] = lw
        run.files.append(io.dump_weights(run.out / f"weights_{g.label}.csv", lw))
        # tilted jump counts against Gamma lambda T for constant multipliers
        for mid, key, cnt, lam in ((1, "gamma1", ens.noise.counts1.sum(axis=1), spec.nu1.intensities),
                                   (2, "gamma2", ens.noise.counts2.sum(axis=1), spec.nu2.intensities / ens.noise.epsilon)):
            gam = getattr(g, key)
            if gam is None or g.joint is not None or not lam.size:
                continue
            for j in range(lam.size):
                v = w * cnt[:, j]
                est, s = float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
                expect = float(gam[j] * lam[j] * T)
                hit = abs(est - expect) <= 3 * s + 1e-12
                ok &= hit
                counts.append([g.label, mid, j, est, s, expect, hit])
    run.csv("girsanov.csv", ["tilt", "mean_weight", "se", "ess", "ui_exponent", "ui_passed", "within_3se"], rows)
    if counts:
        run.csv("counts.csv", ["tilt", "measure_id", "mark_index", "tilted_count", "se", "expected", "within_3se"],
                counts)
    verdict = PASS if ok else FAIL
    run.summary = {"tilts": [dict(zip(["label", "mean_weight", "se", "ess", "ui_exponent", "ui_passed",
                                       "within_3se"], r)) for r in rows], "verdict": verdict}
    run.json("girsanov.json", run.summary)
    run.plot("plot_weights", "weights.png", logw)
    return verdict


COMMANDS = {
    "check": (cmd_check, "sampled assumption checks and driver certificate"),
    "simulate": (cmd_simulate, "simulate the slow/fast system and dump trajectories"),
    "bsde": (cmd_bsde, "solve the full backward equation at the configured epsilon"),
    "lambda": (cmd_lambda, "tabulate the ergodic driver and/or evaluate it at points"),
    "sweep": (cmd_sweep, "Y0 against the reduced Ybar0 over an epsilon grid"),
    "value": (cmd_value, "BSDE value against simulated policy costs"),
    "dual": (cmd_dual, "Fenchel dual of lambda and the reduced control infimum"),
    "diagnostics": (cmd_diagnostics, "dyadic step-process residuals"),
    "girsanov-check": (cmd_girsanov, "normalization and tilted intensities of measure changes"),
}


def build_parser():
    p = Parser(prog="twoscale", description="Two-scale jump-diffusion FBSDE experiments.",
               epilog="exit codes: 0 pass, 2 inconclusive, 1 numerical failure, 64 usage, 65 config error; "
                      "TSB_LOG sets the log level")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=Parser)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_, epilog="outputs:\n" + COLUMNS[name],
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        s.add_argument("--config", required=True, help="TOML model/experiment file")
        s.add_argument("--out", default=None, help="output directory (default runs/<subcommand>)")
        s.add_argument("--seed", type=int, default=None, help="master seed (default [run].seed or 0)")
        s.add_argument("--threads", type=int, default=None, help="worker threads for noise sampling")
        s.add_argument("--paths", type=int, default=None, help="Monte Carlo paths")
        s.add_argument("--steps", type=int, default=None, help="time steps on [0, T]")
        s.add_argument("--plot", action="store_true", help="also write PNG figures next to the tables")
    return p


def _setup_logging():
    level = os.environ.get("TSB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv=None) -> int:
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"twoscale: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        print("twoscale: missing subcommand", file=sys.stderr)
        return EXIT_USAGE
    if args.out is None:
        args.out = os.path.join("runs", args.command)
    start, t0 = time.time(), time.perf_counter()
    try:
        config_bytes = Path(args.config).read_bytes()
        spec = load_model(config_bytes.decode("utf-8"))
        run = Run(args, spec, config_bytes)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"twoscale: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"twoscale: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run.out.mkdir(parents=True, exist_ok=True)
    stale = run.out / "manifest.json"
    if stale.exists():
        stale.unlink()
    fn = COMMANDS[args.command][0]
    error = None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            verdict = fn(run)
        code = VERDICT_EXIT[verdict]
    except ConfigError as exc:
        print(f"twoscale: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        error, verdict, code = f"{type(exc).__name__}: {exc}", FAIL, EXIT_FAIL
        print(f"twoscale: numerical failure: {error}", file=sys.stderr)
    digest = hashlib.sha256(Path(args.config).read_bytes()).hexdigest()
    if digest != hashlib.sha256(run.config_bytes).hexdigest():
        error, verdict, code = "config changed during the run", FAIL, EXIT_FAIL
    manifest = {
        "config": str(Path(args.config).resolve()), "config_sha256": digest, "subcommand": args.command,
        "seed": run.seed, "paths": run.paths, "steps": run.steps, "threads": run.threads,
        "version": __version__, "argv": argv, "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(start)),
        "wall_clock_s": time.perf_counter() - t0, "verdict": verdict, "exit_code": code, "error": error,
        "files": sorted(os.path.relpath(f, run.out) for f in run.files),
    }
    io.write_json(run.out / "manifest.json", manifest)
    log.info("%s finished: %s (exit %d)", args.command, verdict, code)
    return code


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
