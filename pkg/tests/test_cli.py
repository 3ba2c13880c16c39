import hashlib
import json
import os
import subprocess
import sys

import pytest

from twoscale.cli import dispatch


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = dispatch([*argv, "--out", str(out)])
    return code, out


def load(path):
    return json.loads(path.read_text())


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_check_minimal(tmp_path, corpus):
    code, out = run(tmp_path, "check", "check", "--config", str(corpus / "minimal.toml"))
    assert code == 0
    assert load(out / "check.json")["mu_hat"] == 1.0


def test_manifest_written_last_with_hash(tmp_path, corpus):
    cfg = corpus / "minimal.toml"
    code, out = run(tmp_path, "m", "simulate", "--config", str(cfg), "--paths", "20", "--steps", "10", "--seed", "4")
    assert code == 0
    man = load(out / "manifest.json")
    assert man["config_sha256"] == hashlib.sha256(cfg.read_bytes()).hexdigest()
    assert man["subcommand"] == "simulate" and man["seed"] == 4 and man["exit_code"] == 0
    files = [out / f for f in man["files"]]
    assert all(f.exists() for f in files)
    assert all(f.stat().st_mtime_ns <= (out / "manifest.json").stat().st_mtime_ns for f in files)
    header = (out / "trajectory_0000.csv").read_text().splitlines()[0]
    assert header == "t,X_1,Q_1"
    assert (out / "jumps_0000.csv").read_text().splitlines()[0] == "t,measure_id,mark_index"
    assert len((out / "trajectory_0000.csv").read_text().splitlines()) == 12


def test_sweep_is_byte_identical(tmp_path, corpus):
    cfg = str(corpus / "ou-jump.toml")
    c1, a = run(tmp_path, "a", "sweep", "--config", cfg, "--seed", "7")
    c2, b = run(tmp_path, "b", "sweep", "--config", cfg, "--seed", "7")
    assert c1 == c2 == 0
    assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    assert (a / "sweep.json").read_bytes() == (b / "sweep.json").read_bytes()


def test_threads_do_not_change_results(tmp_path, corpus):
    cfg = str(corpus / "decoupled.toml")
    args = ["sweep", "--config", cfg, "--paths", "2500", "--steps", "20"]
    run(tmp_path, "t1", *args, "--threads", "1")
    run(tmp_path, "t3", *args, "--threads", "3")
    assert (tmp_path / "t1" / "sweep.csv").read_bytes() == (tmp_path / "t3" / "sweep.csv").read_bytes()


def test_dual_concave_pass(tmp_path, corpus):
    code, out = run(tmp_path, "d", "dual", "--config", str(corpus / "concave.toml"), "--paths", "2000")
    d = load(out / "dual.json")
    assert code == 0 and d["verdict"] == "pass"
    assert all(c["p"] == [1.0] for c in d["best_schedule"])
    assert abs(d["best_value"] - (0.5 - 1.0)) <= 2e-2


def test_inconclusive_exit(tmp_path, corpus):
    cfg = write(tmp_path, "inc.toml", (corpus / "ou-jump.toml").read_text().replace("tol = 0.01", "tol = 1e-9")
                .replace("epsilons = [1.0, 0.5, 0.25, 0.1, 0.05]", "epsilons = [1.0, 0.5]"))
    code, out = run(tmp_path, "i", "sweep", "--config", str(cfg), "--paths", "2000", "--steps", "50")
    assert code == 2 and load(out / "sweep.json")["verdict"] == "inconclusive"
    assert load(out / "manifest.json")["exit_code"] == 2


def test_numerical_failure_exit(tmp_path, corpus):
    text = (corpus / "ou-jump.toml").read_text().replace("B = [[-1.0]]", "B = [[0.5]]")
    code, out = run(tmp_path, "n", "lambda", "--config", str(write(tmp_path, "nd.toml", text)))
    assert code == 1
    man = load(out / "manifest.json")
    assert man["verdict"] == "fail" and "NonDissipativeError" in man["error"]


def test_usage_and_config_errors(tmp_path, corpus):
    assert dispatch(["bogus", "--config", "x"]) == 64
    assert dispatch(["sweep"]) == 64
    assert dispatch([]) == 64
    assert dispatch(["check", "--config", str(tmp_path / "missing.toml")]) == 65
    assert dispatch(["check", "--config", str(write(tmp_path, "bad.toml", "[operators]\nA = 1\n"))]) == 65
    bad_mode = (corpus / "concave.toml").read_text().replace('mode = "exact"', 'mode = "magic"')
    code, out = run(tmp_path, "bm", "dual", "--config", str(write(tmp_path, "bm.toml", bad_mode)))
    assert code == 65 and not (out / "manifest.json").exists()


def test_girsanov_check_and_plots(tmp_path, corpus):
    code, out = run(tmp_path, "g", "girsanov-check", "--config", str(corpus / "controlled.toml"),
                    "--paths", "5000", "--steps", "20", "--plot")
    assert code == 0
    rows = (out / "girsanov.csv").read_text().splitlines()
    assert rows[0].startswith("tilt,mean_weight") and len(rows) == 7
    assert (out / "weights.png").stat().st_size > 0
    assert (out / "weights_wiener.csv").read_text().splitlines()[0] == "path_id,log_weight_T"


def test_help_documents_columns():
    r = subprocess.run([sys.executable, "-m", "twoscale.cli", "dual", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "dual.csv: schedule, value" in r.stdout


def test_log_level_from_environment(tmp_path, corpus):
    env = dict(os.environ, TSB_LOG="INFO")
    r = subprocess.run([sys.executable, "-m", "twoscale.cli", "check", "--config", str(corpus / "minimal.toml"),
                        "--out", str(tmp_path / "log")], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "check finished: pass" in r.stderr


@pytest.mark.parametrize("cmd,cfg,extra,files", [
    ("bsde", "linear.toml", ["--paths", "2000", "--steps", "20"], ["solution.csv", "solution_decoder.json"]),
    ("value", "controlled.toml", ["--paths", "2000", "--steps", "20"], ["value.csv", "value.json"]),
    ("diagnostics", "ou-slow.toml", ["--paths", "1000", "--steps", "64"], ["diagnostics.csv"]),
])
def test_other_subcommands(tmp_path, corpus, cmd, cfg, extra, files):
    code, out = run(tmp_path, cmd, cmd, "--config", str(corpus / cfg), *extra, "--plot")
    assert code in (0, 2)
    man = load(out / "manifest.json")
    for f in files:
        assert f in man["files"]
    assert any(f.endswith(".png") for f in man["files"])
