import struct

import numpy as np
import pytest

from prescurv import (
    CriticalExponents,
    GridSpec,
    ScalarField,
    TorusError,
    critical_norm,
    integrate,
    lp_norm,
    normalize_critical,
    read_snapshot,
    torus_distance,
    write_snapshot,
)
from prescurv.torus import bump_field


def test_exponents_n3():
    e = CriticalExponents.for_dimension(3)
    assert e.c_n == 8.0
    assert e.two_star == 6.0
    assert e.p == 5.0


@pytest.mark.parametrize("n,c_n,two_star", [(4, 6.0, 4.0), (5, 16.0 / 3.0, 10.0 / 3.0)])
def test_exponents_other_dims(n, c_n, two_star):
    e = CriticalExponents.for_dimension(n)
    assert e.c_n == pytest.approx(c_n, rel=1e-15)
    assert e.two_star == pytest.approx(two_star, rel=1e-15)


def test_grid_validation():
    with pytest.raises(TorusError):
        GridSpec(n=2, points_per_axis=16)
    with pytest.raises(TorusError):
        GridSpec(n=3, points_per_axis=4)
    with pytest.raises(TorusError):
        GridSpec(n=3, points_per_axis=16, side_length=-1.0)
    g = GridSpec(n=3, points_per_axis=16, side_length=2.0)
    assert g.spacing == 0.125
    assert g.total_points == 16 ** 3
    assert g.volume == 8.0


def test_integrate_constants(grid16):
    assert integrate(ScalarField.constant(grid16, 1.0)) == pytest.approx(1.0, abs=1e-14)
    assert integrate(ScalarField.constant(grid16, 0.0)) == 0.0


def test_integrate_sine_mode(grid16):
    f = ScalarField.from_function(grid16, lambda x, y, z: np.sin(2 * np.pi * x))
    assert abs(integrate(f)) < 1e-14


def test_integrate_fourier_modes_vanish(grid16, rng):
    # any resolved nonzero mode integrates to machine zero on the lattice
    for _ in range(5):
        k = rng.integers(-6, 7, size=3)
        if not k.any():
            continue
        f = ScalarField.from_function(
            grid16, lambda x, y, z, k=k: np.cos(2 * np.pi * (k[0] * x + k[1] * y + k[2] * z)))
        assert abs(integrate(f)) < 1e-13


def test_non_finite_rejected(grid16):
    vals = np.ones(grid16.shape)
    vals[0, 0, 0] = np.nan
    with pytest.raises(TorusError, match="non-finite"):
        ScalarField(grid16, vals)


def test_lp_norm_constants(grid16):
    assert lp_norm(ScalarField.constant(grid16, 2.0), 2) == pytest.approx(2.0, rel=1e-14)
    assert lp_norm(ScalarField.constant(grid16, 1.0), 6) == pytest.approx(1.0, rel=1e-14)


def test_lp_norm_homogeneity(grid16, rng):
    g = ScalarField(grid16, rng.standard_normal(grid16.shape))
    c = 2.75
    for p in (1.0, 2.0, 6.0):
        assert lp_norm(g * c, p) == pytest.approx(c * lp_norm(g, p), rel=1e-13)


def test_lp_norm_requires_p_ge_1(grid16):
    with pytest.raises(TorusError):
        lp_norm(ScalarField.constant(grid16, 1.0), 0.5)


def test_hoelder_l2_vs_critical(grid16, rng):
    # ||f||_2 <= vol^(1/n) ||f||_{2n/(n-2)} on the unit torus
    n = grid16.n
    vol = grid16.volume
    for _ in range(10):
        f = ScalarField(grid16, rng.standard_normal(grid16.shape))
        assert lp_norm(f, 2) <= vol ** (1.0 / n) * lp_norm(f, 2 * n / (n - 2)) * (1 + 1e-12)


def test_normalize_constant(grid16):
    u = normalize_critical(ScalarField.constant(grid16, 3.0))
    assert np.allclose(u.values, 1.0, atol=1e-14)


def test_normalize_idempotent_and_homogeneous(grid16, rng):
    u = ScalarField(grid16, 0.5 + rng.random(grid16.shape))
    once = normalize_critical(u)
    assert abs(critical_norm(once) - 1.0) < 1e-13
    twice = normalize_critical(once)
    assert np.abs(twice.values - once.values).max() < 1e-13
    scaled = normalize_critical(u * 7.3)
    assert np.abs(scaled.values - once.values).max() < 1e-13


def test_normalize_zero_rejected(grid16):
    with pytest.raises(TorusError, match="zero field"):
        normalize_critical(ScalarField.constant(grid16, 0.0))


def test_torus_distance_wraps(grid16):
    d = torus_distance(grid16, (0.0, 0.0, 0.0))
    assert d[0, 0, 0] == 0.0
    # the farthest point of the unit 3-torus is at sqrt(3)/2
    assert d.max() == pytest.approx(np.sqrt(3) / 2.0, rel=1e-12)


def test_bump_field_plateau_and_support(grid16):
    b = bump_field(grid16, (0.5, 0.5, 0.5), 0.1, 0.2)
    d = torus_distance(grid16, (0.5, 0.5, 0.5))
    assert np.all(b.values[d <= 0.1] == 1.0)
    assert np.all(b.values[d >= 0.2] == 0.0)
    assert np.all((b.values >= 0) & (b.values <= 1))


def test_snapshot_roundtrip(tmp_path, grid16, rng):
    f = ScalarField(grid16, rng.standard_normal(grid16.shape))
    path = tmp_path / "field.cscf"
    write_snapshot(path, f)
    g = read_snapshot(path)
    assert g.grid == grid16
    assert np.array_equal(g.values, f.values)  # bit-exact


def test_snapshot_binary_layout(tmp_path):
    grid = GridSpec(n=3, points_per_axis=8, side_length=2.0)
    f = ScalarField.constant(grid, 1.5)
    path = tmp_path / "f.cscf"
    write_snapshot(path, f)
    raw = path.read_bytes()
    magic, version, n, points, side = struct.unpack_from("<4sIBQd", raw)
    assert magic == b"CSCF"
    assert version == 1
    assert (n, points, side) == (3, 8, 2.0)
    first = struct.unpack_from("<d", raw, struct.calcsize("<4sIBQd"))[0]
    assert first == 1.5
    assert len(raw) == struct.calcsize("<4sIBQd") + 8 * 8 ** 3


def test_snapshot_bad_magic(tmp_path):
    p = tmp_path / "bad.cscf"
    p.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(TorusError, match="not a CSCF"):
        read_snapshot(p)
