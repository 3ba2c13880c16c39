import json
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale import io
from twoscale.ergodic import LambdaMap


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_floats_round_trip_exactly(tmp_path_factory, vals):
    p = tmp_path_factory.mktemp("csv") / "v.csv"
    io.write_csv(p, ["v"], [[v] for v in vals])
    header, arr = io.read_csv(p)
    assert header == ["v"]
    assert arr[:, 0].tolist() == [float(v) for v in vals]


def test_json_sanitizes_numpy_and_nonfinite(tmp_path):
    p = io.write_json(tmp_path / "a.json", {"a": np.float64(1.5), "b": np.array([1, 2]), "c": math.nan,
                                            "d": -math.inf, "e": np.bool_(True), "f": (np.int64(3),)})
    d = json.loads(p.read_text())
    assert d == {"a": 1.5, "b": [1, 2], "c": "nan", "d": "-inf", "e": True, "f": [3]}
    assert not (tmp_path / "a.json.tmp").exists()


def test_lambda_map_round_trip(tmp_path):
    axes = [np.array([0.0, 1.0]), np.linspace(-1, 1, 5), np.array([0.0, 0.5])]
    lm = LambdaMap.from_function(1, 1, lambda x, z, u: x[:, 0] - np.abs(z[:, 0]) + 0.3 * u[:, 0], axes,
                                 intensities=[2.0], alpha=0.1)
    io.dump_lambda_map(tmp_path, lm)
    back = io.load_lambda_map(tmp_path / "lambda_map.json")
    assert np.array_equal(back.values, lm.values)
    assert all(np.array_equal(a, b) for a, b in zip(back.axes, lm.axes))
    assert back.alpha == 0.1 and back.intensities.tolist() == [2.0]
    pts = np.array([[0.3, -0.2, 0.1]])
    assert back(pts[:, :1], pts[:, 1:2], pts[:, 2:]) == lm(pts[:, :1], pts[:, 1:2], pts[:, 2:])
