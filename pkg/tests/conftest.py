from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from schedlang import zoo
from schedlang.ir.serialize import load_model

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def toy_bert():
    return load_model((FIXTURES / "toy_bert.json").read_text())


@pytest.fixture(scope="session")
def small_bert():
    return zoo.toy_bert(num_layers=2)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def rng_inputs(model, seed: int = 0):
    from schedlang.ir.shapes import model_input_specs
    from schedlang.verifier import standard_normal_inputs

    return standard_normal_inputs(seed, model_input_specs(model))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        hi = f(x)
        x[i] = old - h
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-8)
    return float(np.max(np.abs(a - b))) / scale
