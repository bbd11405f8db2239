import numpy as np
import pytest

from prescurv import (
    FunctionalError,
    ScalarField,
    delta_j_sq,
    el_residual,
    energy_report,
    grad_j,
    integrate,
    k_of,
    normalize_critical,
    r_of,
    scalar_curvature,
    scaled_solution,
)
from prescurv.functionals import dual_defect_estimate, flow_defect, j_value, weighted_defect_sq
from prescurv.operators import random_smooth_field

from conftest import perturbed_constant


def test_r_of_constant(grid16):
    assert r_of(ScalarField.constant(grid16, 1.0)) == pytest.approx(-1.0, rel=1e-13)


def test_r_of_sine_closed_form(grid24):
    # u = 1 + 0.1 sin(2 pi x): r = c_n (2 pi)^2 (0.1^2/2) - (1 + 0.1^2/2)
    u = ScalarField.from_function(grid24, lambda x, y, z: 1.0 + 0.1 * np.sin(2 * np.pi * x))
    expected = 0.16 * np.pi ** 2 - 1.005
    assert r_of(u) == pytest.approx(expected, rel=1e-12)


def test_r_quadratic_homogeneity(grid16, rng):
    u = ScalarField(grid16, 0.5 + rng.random(grid16.shape))
    assert r_of(u * 2.0) == pytest.approx(4.0 * r_of(u), rel=1e-12)


def test_k_of_basics(grid16):
    u = ScalarField.constant(grid16, 1.0)
    K = ScalarField.constant(grid16, -1.0)
    assert k_of(u, K) == pytest.approx(-1.0, rel=1e-14)
    assert k_of(u, K * 3.0) == pytest.approx(3.0 * k_of(u, K), rel=1e-14)


def test_k_of_normalized_is_mean_weighted(grid16, rng):
    # with K = -1 and unit critical norm, k = -1 exactly
    K = ScalarField.constant(grid16, -1.0)
    u = normalize_critical(ScalarField(grid16, 0.5 + rng.random(grid16.shape)))
    assert k_of(u, K) == pytest.approx(-1.0, abs=1e-12)


def test_k_of_rejects_negative_base(grid16):
    u = ScalarField.constant(grid16, 1.0)
    vals = u.values.copy()
    vals[0, 0, 0] = -1e-6
    with pytest.raises(FunctionalError, match="negative base"):
        k_of(ScalarField(grid16, vals), ScalarField.constant(grid16, -1.0))


def test_scalar_curvature_normalized_background(grid16):
    R = scalar_curvature(ScalarField.constant(grid16, 1.0))
    assert np.allclose(R.values, -1.0, atol=1e-12)


def test_scalar_curvature_positivity_floor(grid16):
    vals = np.ones(grid16.shape)
    vals[0, 0, 0] = 1e-12
    with pytest.raises(FunctionalError, match="positivity floor"):
        scalar_curvature(ScalarField(grid16, vals))


def test_energy_report_trivial(grid16):
    u = ScalarField.constant(grid16, 1.0)
    K = ScalarField.constant(grid16, -1.0)
    rep = energy_report(u, K)
    assert rep.in_X and not rep.in_Y
    assert rep.r == pytest.approx(-1.0, rel=1e-13)
    assert rep.k == pytest.approx(-1.0, rel=1e-13)
    assert rep.J == pytest.approx(1.0, rel=1e-12)
    assert rep.I is None


def test_energy_report_mixed_signs(grid16):
    u = ScalarField.constant(grid16, 1.0)
    K = ScalarField.constant(grid16, 1.0)
    rep = energy_report(u, K)
    assert rep.r < 0 < rep.k
    assert not rep.in_X and not rep.in_Y
    assert rep.J is None and rep.I is None


def test_sign_dichotomy(grid24, rng, k_headline32):
    # at most one of in_X / in_Y on any field
    from conftest import headline_k

    K = headline_k(grid24)
    for _ in range(20):
        u = normalize_critical(ScalarField(grid24, 0.3 + rng.random(grid24.shape)))
        rep = energy_report(u, K)
        assert not (rep.in_X and rep.in_Y)


def test_j_scaling_invariance(grid16, rng):
    K = ScalarField.constant(grid16, -1.0)
    u = perturbed_constant(grid16, rng)
    J1 = energy_report(u, K).J
    J2 = energy_report(normalize_critical(u * 3.0), K).J
    assert J1 == pytest.approx(J2, rel=1e-12)


def test_grad_j_vanishes_at_solution(grid16):
    g = grad_j(ScalarField.constant(grid16, 1.0), ScalarField.constant(grid16, -1.0))
    assert np.abs(g.values).max() < 1e-12


def test_grad_j_defined_on_X_only(grid16):
    with pytest.raises(FunctionalError, match="X only"):
        grad_j(ScalarField.constant(grid16, 1.0), ScalarField.constant(grid16, 1.0))


def test_grad_j_finite_difference(grid24, rng):
    # directional derivative of J against the analytic gradient
    K = ScalarField.from_function(grid24, lambda x, y, z: -1.0 - 0.2 * np.sin(2 * np.pi * x))
    u = perturbed_constant(grid24, rng)
    g = grad_j(u, K)
    p = grid24.exponents.p
    raw = random_smooth_field(grid24, rng)
    # project to the tangent of the critical-norm sphere
    coeff = integrate(ScalarField(grid24, u.values ** p * raw.values)) / \
        integrate(ScalarField(grid24, u.values ** (p + 1)))
    phi = ScalarField(grid24, raw.values - coeff * u.values)
    h = 1e-5
    jp = j_value(normalize_critical(u + phi * h), K)
    jm = j_value(normalize_critical(u - phi * h), K)
    fd = (jp - jm) / (2 * h)
    analytic = integrate(ScalarField(grid24, g.values * phi.values))
    assert fd == pytest.approx(analytic, rel=1e-6)


def test_defect_ratio_antisymmetry(grid24, rng):
    # integral ((k/r) R - K) u^{2n/(n-2)} = 0 by the definition of the ratio
    K = ScalarField.from_function(grid24, lambda x, y, z: -1.0 - 0.3 * np.cos(2 * np.pi * y))
    u = perturbed_constant(grid24, rng)
    d = flow_defect(u, K, "J")
    weighted = integrate(ScalarField(grid24, d.values * u.values ** grid24.exponents.two_star))
    assert abs(weighted) < 1e-12


def test_delta_j_sq(grid16, rng):
    K = ScalarField.constant(grid16, -1.0)
    assert delta_j_sq(ScalarField.constant(grid16, 1.0), K) == pytest.approx(0.0, abs=1e-20)
    u = perturbed_constant(grid16, rng)
    val = delta_j_sq(u, K)
    assert val > 0
    # pointwise consistency with the defect quadrature
    d = flow_defect(u, K, "J")
    assert val == pytest.approx(weighted_defect_sq(u, d), rel=1e-12)


def test_el_residual_trivial_and_perturbed(grid16, rng):
    K = ScalarField.constant(grid16, -1.0)
    u = ScalarField.constant(grid16, 1.0)
    assert el_residual(u, K, 1.0) == pytest.approx(0.0, abs=1e-12)
    # first-order Taylor: the residual scales linearly in the perturbation
    noise = random_smooth_field(grid16, rng)
    noise = noise * (1.0 / np.abs(noise.values).max())
    res1 = el_residual(u + noise * 1e-3, K, 1.0)
    res2 = el_residual(u + noise * 5e-4, K, 1.0)
    assert res1 > 0
    assert res1 / res2 == pytest.approx(2.0, rel=0.05)


def test_el_residual_scaling(grid16):
    # if u solves with beta, c u solves with beta c^{4/(n-2)}
    K = ScalarField.constant(grid16, -2.0)
    u = ScalarField.constant(grid16, 2.0 ** -0.25)  # solves L u = K u^5
    assert el_residual(u, K, 1.0) < 1e-12
    c = 1.7
    n = grid16.n
    assert el_residual(u * c, K, c ** (4.0 / (n - 2))) < 1e-10


def test_scaled_solution_trivial(grid16):
    K = ScalarField.constant(grid16, -1.0)
    w, beta = scaled_solution(normalize_critical(ScalarField.constant(grid16, 1.0)), K)
    assert beta == pytest.approx(1.0, rel=1e-12)
    assert np.allclose(w.values, 1.0, atol=1e-10)


def test_scaled_solution_constant_k2(grid16):
    # K = -2: normalized critical point is u = 1, rescaling gives 2^(-1/4),
    # where r(w) = k(w) (both equal -2^(-1/2))
    K = ScalarField.constant(grid16, -2.0)
    u = normalize_critical(ScalarField.constant(grid16, 1.0))
    w, beta = scaled_solution(u, K)
    assert beta == pytest.approx(2.0, rel=1e-12)
    assert np.allclose(w.values, 2.0 ** -0.25, atol=1e-10)
    assert el_residual(w, K, 1.0) < 1e-10
    assert r_of(w) == pytest.approx(k_of(w, K), rel=1e-9)
    assert r_of(w) == pytest.approx(-(2.0 ** -0.5), rel=1e-9)


def test_scaled_solution_rejects_mixed_signs(grid16):
    K = ScalarField.constant(grid16, 1.0)
    u = normalize_critical(ScalarField.constant(grid16, 1.0))
    with pytest.raises(FunctionalError, match="r\\*k"):
        scaled_solution(u, K)


def test_dual_defect_estimate_zero_at_solution(grid16):
    K = ScalarField.constant(grid16, -1.0)
    u = ScalarField.constant(grid16, 1.0)
    d = flow_defect(u, K, "J")
    assert dual_defect_estimate(u, d) < 1e-12
