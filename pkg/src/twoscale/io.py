"""Delimited and JSON outputs.

Numbers are written with 17 significant digits so that every float
round-trips exactly through the CSV files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def read_csv(path):
    """Header and a float array of the rows."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body], float).reshape(len(body), len(header))


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Module dumps
# ---------------------------------------------------------------------------

def trajectory_header(dx, dq):
    return ["t"] + [f"X_{i + 1}" for i in range(dx)] + [f"Q_{i + 1}" for i in range(dq)]


def dump_trajectories(out_dir, ensemble, grid, max_paths=10):
    """One ``trajectory_NNNN.csv`` and ``jumps_NNNN.csv`` per path, plus ``moments.csv``."""
    out_dir = Path(out_dir)
    X, Q = ensemble.X, ensemble.Q
    dq = 0 if Q is None else Q.shape[2]
    files = []
    for i in range(min(max_paths, X.shape[0])):
        cols = [grid.times[:, None], X[i]] + ([Q[i]] if dq else [])
        files.append(write_csv(out_dir / f"trajectory_{i:04d}.csv", trajectory_header(X.shape[2], dq),
                               np.concatenate(cols, axis=1).tolist()))
        p = ensemble.noise.path(i)
        jumps = sorted([(j.time, j.measure_id, j.mark_index) for j in p.jumps1 + p.jumps2])
        files.append(write_csv(out_dir / f"jumps_{i:04d}.csv", ["t", "measure_id", "mark_index"], jumps))
    header = ["t"] + [f"mean_X_{i + 1}" for i in range(X.shape[2])] + [f"var_X_{i + 1}" for i in range(X.shape[2])]
    cols = [grid.times[:, None], X.mean(axis=0), X.var(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros_like(X[0])]
    if dq:
        header += [f"mean_Q_{i + 1}" for i in range(dq)] + [f"var_Q_{i + 1}" for i in range(dq)]
        cols += [Q.mean(axis=0), Q.var(axis=0, ddof=1) if Q.shape[0] > 1 else np.zeros_like(Q[0])]
    files.append(write_csv(out_dir / "moments.csv", header, np.concatenate(cols, axis=1).tolist()))
    return files


SOLUTION_HEADER = ["t", "Y_mean", "Y_sd", "Z_norm", "Xi_norm", "U_norm", "Theta_norm"]


def dump_solution(out_dir, sol, decoder=None, stem="solution"):
    from .bsde import slice_summary

    out_dir = Path(out_dir)
    files = [write_csv(out_dir / f"{stem}.csv", SOLUTION_HEADER, slice_summary(sol))]
    if decoder is not None:
        files.append(write_json(out_dir / f"{stem}_decoder.json", {"basis": decoder.basis.__dict__,
                                                                   "slices": decoder.coefficients()}))
    return files


def dump_weights(path, log_weight_T):
    lw = np.asarray(log_weight_T, float)
    return write_csv(path, ["path_id", "log_weight_T"], [[i, v] for i, v in enumerate(lw.tolist())])


def dump_lambda_map(out_dir, lm, stem="lambda_map"):
    """JSON header plus a CSV value block with columns ``x.., z.., u.., lambda``."""
    from .ergodic import _axis_names

    out_dir = Path(out_dir)
    header = lm.to_json()
    header["values_file"] = f"{stem}.csv"
    f1 = write_json(out_dir / f"{stem}.json", header)
    f2 = write_csv(out_dir / f"{stem}.csv", _axis_names(lm.dx, lm.m1) + ["lambda"], lm.table().tolist())
    return [f1, f2]


def load_lambda_map(json_path):
    from .ergodic import LambdaMap

    header = read_json(json_path)
    _, rows = read_csv(Path(json_path).parent / header["values_file"])
    for key in ("alpha", "erg_horizon"):
        if isinstance(header.get(key), str):
            header[key] = float(header[key])
    return LambdaMap.from_table(header, rows)
