import numpy as np
import pytest

from prescurv import (
    FlowConfig,
    FlowError,
    FlowTrace,
    ScalarField,
    compactness_monitor,
    delta_j_sq,
    k_of,
    minimize,
    normalize_critical,
    r_of,
    run_flow,
    scaled_solution,
    step_j,
)
from prescurv.functionals import flow_defect, j_value, weighted_defect_sq
from prescurv.torus import critical_norm

from conftest import perturbed_constant


def wavy_k(grid, depth=0.2):
    return ScalarField.from_function(
        grid, lambda x, y, z: -1.0 - depth * np.sin(2 * np.pi * x))


def test_fixed_point_step(grid16):
    u = normalize_critical(ScalarField.constant(grid16, 1.0))
    K = ScalarField.constant(grid16, -1.0)
    out = step_j(u, K, 1e-2)
    assert np.abs(out.values - u.values).max() < 1e-14


def test_step_projects_to_unit_volume(grid16, rng):
    K = wavy_k(grid16)
    u = perturbed_constant(grid16, rng)
    out = step_j(u, K, 1e-3)
    assert critical_norm(out) == pytest.approx(1.0, abs=1e-13)
    assert out.min() > 0


def test_step_decreases_j(grid16, rng):
    K = wavy_k(grid16)
    u = perturbed_constant(grid16, rng)
    j0 = j_value(u, K)
    for dt in (1e-3, 5e-4):  # Richardson-style: acceptance at both steps
        out = step_j(u, K, dt)
        assert j_value(out, K) <= j0 + 1e-10 * (1 + abs(j0))


def test_volume_drift_first_order(grid16, rng):
    # renormalization off: the one-step volume drift is O(dt^2), i.e. the
    # volume derivative itself vanishes to first order
    K = wavy_k(grid16)
    u = perturbed_constant(grid16, rng)
    cfg = FlowConfig(dt_min=1e-12)

    def drift(dt):
        out = step_j(u, K, dt, renormalize=False, cfg=cfg)
        return abs(critical_norm(out) ** 6 - critical_norm(u) ** 6)

    # dt below the acceptance boundary so the requested step is the taken one
    d1, d2, d3 = drift(4e-5), drift(2e-5), drift(1e-5)
    assert np.log2(d1 / d2) >= 1.9
    assert np.log2(d2 / d3) >= 1.9
    # a gentle mode-1 state: per-step drift far below 1e-8 at small dt
    gentle = normalize_critical(ScalarField.from_function(
        grid16, lambda x, y, z: 1.0 + 0.02 * np.sin(2 * np.pi * x)))
    out = step_j(gentle, K, 1e-6, renormalize=False, cfg=cfg)
    assert abs(critical_norm(out) ** 6 - critical_norm(gentle) ** 6) < 1e-8


def test_energy_slope_matches_defect(grid24):
    # dJ/dt -> -2* |delta J|^2 / (-r)^{n/(n-2)}; within 5% at dt = 1e-4 on a
    # smooth state, tighter as dt shrinks
    K = wavy_k(grid24)
    u = normalize_critical(ScalarField.from_function(
        grid24, lambda x, y, z: 1.0 + 0.03 * np.sin(2 * np.pi * y)))
    n = grid24.n
    r = r_of(u)
    dsq = delta_j_sq(u, K)
    expected = -(2 * n / (n - 2)) * dsq / (-r) ** (n / (n - 2))
    cfg = FlowConfig(dt_min=1e-15)

    def slope(dt):
        out = step_j(u, K, dt, cfg=cfg)
        return (j_value(out, K) - j_value(u, K)) / dt

    assert slope(1e-4) == pytest.approx(expected, rel=0.05)
    assert slope(1e-6) == pytest.approx(expected, rel=0.001)


def test_run_flow_immediate_stop_at_solution(grid16):
    u = normalize_critical(ScalarField.constant(grid16, 1.0))
    K = ScalarField.constant(grid16, -1.0)
    final, trace = run_flow(u, K, FlowConfig(), which="J")
    assert len(trace) == 1
    assert trace.column("delta_sq")[0] < 1e-20


def test_run_flow_converges_to_constant(grid16, rng):
    # unique solution for K <= 0: every start relaxes to u = 1
    K = ScalarField.constant(grid16, -1.0)
    u0 = perturbed_constant(grid16, rng, amplitude=0.05)
    cfg = FlowConfig(tol_delta_sq=1e-12, t_max=40.0, precondition=True)
    final, trace = run_flow(u0, K, cfg, which="J")
    assert np.abs(final.values - 1.0).max() < 1e-5
    t = trace.column("t")
    assert np.all(np.diff(t) > 0)
    e = trace.column("energy")
    assert np.all(np.diff(e) <= 1e-10 * (1 + np.abs(e[:-1])))
    assert trace.column("min_u").min() > 0
    vol = trace.column("volume")
    assert np.abs(vol - 1.0).max() < 1e-8


def test_run_flow_rejects_wrong_cone(grid16):
    u = normalize_critical(ScalarField.constant(grid16, 1.0))
    K = ScalarField.constant(grid16, -1.0)
    with pytest.raises(FlowError, match="cone"):
        run_flow(u, K, FlowConfig(), which="I")


def test_stiff_step_error_carries_state(grid16, rng):
    # force rejection until dt underflows: plain scheme, huge fixed dt
    K = wavy_k(grid16)
    u = perturbed_constant(grid16, rng)
    cfg = FlowConfig(dt_initial=0.5, dt_min=0.4, dt_max=0.5, precondition=False)
    with pytest.raises(FlowError, match="stiff step"):
        step_j(u, K, 0.5, cfg=cfg)


def test_minimize_constant_k(grid16):
    K = ScalarField.constant(grid16, -1.0)
    cfg = FlowConfig(tol_delta_sq=1e-13, t_max=40.0, precondition=True)
    res = minimize(K, cfg, which="J", restarts=3, seed=1)
    assert res.report.J == pytest.approx(1.0, abs=1e-9)
    assert np.abs(res.minimizer.values - 1.0).max() < 1e-5


def test_minimize_k_minus_two(grid16):
    # J of the normalized constant candidate is 2; after rescaling r = k
    K = ScalarField.constant(grid16, -2.0)
    cfg = FlowConfig(tol_delta_sq=1e-13, t_max=40.0, precondition=True)
    res = minimize(K, cfg, which="J", restarts=2, seed=1)
    assert res.report.J == pytest.approx(2.0, abs=1e-8)
    w, beta = scaled_solution(res.minimizer, K)
    assert r_of(w) == pytest.approx(k_of(w, K), rel=1e-6)


def test_minimize_empty_cone(grid16):
    # Y is empty for K <= 0
    K = ScalarField.constant(grid16, -1.0)
    with pytest.raises(FlowError, match="empty variational space"):
        minimize(K, FlowConfig(), which="I", restarts=3, seed=0)


def test_uniqueness_from_many_starts(grid16, rng):
    K = ScalarField.constant(grid16, -1.0)
    cfg = FlowConfig(tol_delta_sq=1e-12, t_max=40.0, precondition=True)
    finals = []
    for _ in range(5):
        u0 = perturbed_constant(grid16, rng, amplitude=0.05)
        final, _ = run_flow(u0, K, cfg, which="J")
        finals.append(final.values)
    for vals in finals[1:]:
        assert np.abs(vals - finals[0]).max() < 1e-5


def test_trace_csv_roundtrip():
    trace = FlowTrace()
    trace.append(0.0, -1.0, -1.0, 1.0, 1.0, 0.9, 1.1, 1e-12, 1e-6)
    trace.append(0.1, -1.0 + 1e-17, -1.0, 0.99, 1.0, 0.9, 1.1, 1e-13, 1e-7)
    text = trace.to_csv()
    assert text.splitlines()[0] == "t,r,k,energy,volume,min_u,max_u,delta_sq,lp_defect"
    back = FlowTrace.from_csv(text)
    assert back.rows == trace.rows  # 17 significant digits suffice for doubles
    assert text == back.to_csv()


def test_compactness_monitor_clean_trace(grid16, rng):
    from prescurv import certify_ab, sobolev_constant_estimate

    K = ScalarField.constant(grid16, -1.0)
    cert = certify_ab(K, seed=0)
    sob = sobolev_constant_estimate(grid16, samples=50, seed=0)
    u0 = perturbed_constant(grid16, rng, amplitude=0.05)
    _, trace = run_flow(u0, K, FlowConfig(tol_delta_sq=1e-12, t_max=40.0, precondition=True), "J")
    report = compactness_monitor(trace, cert, K, sob, branch="J")
    assert report.bounds_hold
    assert not report.concentration_flag
    # the certificate-implied floor really sits below the observed -k
    assert report.details["inf_minus_k"] >= report.details["c0"]
