import numpy as np
import pytest

from eddylab.spectral import FourierGrid


@pytest.fixture(scope="session")
def grid32():
    return FourierGrid(32)


@pytest.fixture(scope="session")
def grid64():
    return FourierGrid(64)


def smooth_field(grid, seed=0, kmax=4):
    """Random real zero-mean trigonometric polynomial with modes |k|_inf <= kmax."""
    rng = np.random.default_rng(seed)
    fhat = np.zeros(grid.shape, dtype=complex)
    mask = (np.abs(grid.k1) <= kmax) & (grid.k2 <= kmax)
    fhat[mask] = rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())
    return grid.forward(grid.inverse(fhat) - grid.inverse(fhat).mean())
