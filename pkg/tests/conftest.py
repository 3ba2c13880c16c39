import copy
from pathlib import Path

import pytest

from twoscale.model import model_from_dict

CORPUS = Path(__file__).resolve().parents[1] / "src" / "twoscale" / "corpus"

BASE = {
    "operators": {"A": [[0.0]], "B": [[-1.0]], "R": [[1.0]], "G": [[0.4]]},
    "initial": {"x0": [1.0]},
}


def merge(a, b):
    out = copy.deepcopy(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def make_spec(**sections):
    """1-D slow/fast spec from ``BASE`` with per-section overrides."""
    return model_from_dict(merge(BASE, sections))


@pytest.fixture
def corpus():
    return CORPUS
