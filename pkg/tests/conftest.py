import numpy as np
import pytest

from mcse.dsp import FrameParams
from mcse.spatial import ArrayGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def paper_frame():
    return FrameParams()


@pytest.fixture
def desk_frame():
    return FrameParams(sample_rate=16000, win_len=256, hop=128, fft_len=256)


@pytest.fixture
def tiny_frame():
    return FrameParams(sample_rate=16000, win_len=32, hop=16, fft_len=32)


@pytest.fixture
def geometry():
    return ArrayGeometry()


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f over every element of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
