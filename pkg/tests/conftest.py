import numpy as np
import pytest

from prescurv import GridSpec, ScalarField, bump_field, normalize_critical


@pytest.fixture
def grid16():
    return GridSpec(n=3, points_per_axis=16)


@pytest.fixture
def grid24():
    return GridSpec(n=3, points_per_axis=24)


@pytest.fixture
def grid32():
    return GridSpec(n=3, points_per_axis=32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def k_minus_one(grid24):
    return ScalarField.constant(grid24, -1.0)


def headline_k(grid):
    """Sign-changing K with a small positive cap: -1 + 1.5 * plateau bump,
    plateau radius two cells (so the gradient vanishes at the max by
    construction), max K = 0.5."""
    center = (0.5 * grid.side_length,) * grid.n
    chi = bump_field(grid, center, 2.0 * grid.spacing, 0.15 * grid.side_length)
    return ScalarField(grid, -1.0 + 1.5 * chi.values)


@pytest.fixture
def k_headline32(grid32):
    return headline_k(grid32)


def perturbed_constant(grid, rng, amplitude=0.04):
    """A normalized positive low-mode state near the constant (inside X for
    any K <= 0 on the unit torus at this amplitude)."""
    from prescurv.operators import random_smooth_field

    f = random_smooth_field(grid, rng, decay=2.0, corner_modes=2.0)
    vals = 1.0 + amplitude * f.values / np.abs(f.values).max()
    return normalize_critical(ScalarField(grid, vals))
