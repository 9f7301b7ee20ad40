import numpy as np
import pytest

from sparselab.data import make_synthetic
from sparselab.params import Architecture, Layout, ParamVector


def central_fd(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, one coordinate at a time."""
    out = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    # floor keeps exactly-zero gradients (bias before batch norm) from dividing by ~0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_params(arch: Architecture, seed: int, scale: float = 1.0) -> ParamVector:
    layout = Layout.for_arch(arch)
    rng = np.random.default_rng(seed)
    return ParamVector(scale * rng.standard_normal(layout.size), layout)


@pytest.fixture(scope="session")
def blobs():
    return make_synthetic("blobs", 120, 0.5, seed=0, n_classes=3)


@pytest.fixture(scope="session")
def spirals_small():
    return make_synthetic("spirals", 200, 0.1, seed=0)
