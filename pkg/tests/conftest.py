import numpy as np
import pytest

from speclab import tensor as tn
from speclab.engine import InProcessEngine
from speclab.model import DraftConfig, DraftModel, TargetConfig, TargetModel


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3, idx=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (float64 copy), optionally at a few indices."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    it = idx if idx is not None else list(np.ndindex(x.shape))
    for i in it:
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_TARGET = TargetConfig(vocab_size=32, n_layers=3, d_model=16, n_heads=2, d_ff=32, seed=3)


@pytest.fixture(scope="session")
def tiny_target():
    return TargetModel(TINY_TARGET)


@pytest.fixture(scope="session")
def tiny_engine(tiny_target):
    return InProcessEngine(tiny_target)


@pytest.fixture(scope="session")
def tiny_draft():
    cfg = DraftConfig(d_model=16, target_vocab=32, draft_vocab=24, d_ff=32, seed=5)
    return DraftModel(cfg, np.arange(4, 28))


@pytest.fixture
def param():
    def make(arr):
        return tn.Tensor.parameter(np.asarray(arr, dtype=np.float32))

    return make
