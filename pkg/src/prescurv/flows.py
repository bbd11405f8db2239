"""Time-stepping of the two curvature flows and restart-based minimization.

The flows are, on the respective cones,

    J branch (X):  du/dt = -((-k/-r) R - K) u,
    I branch (Y):  du/dt = -(R - (r/k) K) u.

Both conserve the conformal volume and decrease their energy in the
continuum.  One step multiplies u by exp(-dt * defect), which keeps u
strictly positive by construction, then projects back onto the unit
critical-norm sphere.  A step is rejected (and dt halved) when the energy
increases beyond roundoff tolerance or the state leaves its cone, so the
discrete trace inherits the monotonicity of the continuum flow.

The plain explicit scheme is stability-limited to dt of order spacing^2.
For long runs ``precondition=True`` damps the defect's high Fourier modes
by (1 + theta dt |xi|^2)^(-1) before exponentiating; this leaves the fixed
points untouched, agrees with the plain scheme as dt -> 0, and keeps every
safeguard above, but allows O(1) time steps.  Consistency tests (Richardson
slopes, dJ/dt limits) always use the plain scheme.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .functionals import (
    energy_report,
    flow_defect,
    k_of,
    r_of,
    weighted_defect_sq,
)
from .operators import irfft_field, rfft_field, xi_squared
from .torus import GridSpec, ScalarField, critical_norm, normalize_critical


class FlowError(RuntimeError):
    def __init__(self, message: str, trace: Optional["FlowTrace"] = None,
                 last_state: Optional[ScalarField] = None):
        super().__init__(message)
        self.trace = trace
        self.last_state = last_state


@dataclass(frozen=True)
class FlowConfig:
    dt_initial: float = 1e-2
    dt_min: float = 1e-9
    dt_max: float = 0.5
    t_max: float = 50.0
    tol_delta_sq: float = 1e-10
    renormalize_each_step: bool = True
    safeguard_min_u: float = 1e-10
    monitor_p: Optional[float] = None  # defaults to n/2
    precondition: bool = False
    max_steps: int = 200_000

    def __post_init__(self):
        if not (0 < self.dt_min <= self.dt_initial <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_initial <= dt_max")
        if self.t_max <= 0 or self.tol_delta_sq <= 0 or self.safeguard_min_u <= 0:
            raise ValueError("t_max, tol_delta_sq and safeguard_min_u must be positive")


TRACE_COLUMNS = ("t", "r", "k", "energy", "volume", "min_u", "max_u", "delta_sq", "lp_defect")


@dataclass
class FlowTrace:
    """Time series along one flow line, one row per accepted step."""

    rows: List[tuple] = field(default_factory=list)

    def append(self, *row):
        self.rows.append(tuple(float(x) for x in row))

    def column(self, name: str) -> np.ndarray:
        i = TRACE_COLUMNS.index(name)
        return np.array([row[i] for row in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(TRACE_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(format(x, ".17g") for x in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FlowTrace":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if lines and lines[0].startswith("t,"):
            lines = lines[1:]
        trace = cls()
        for ln in lines:
            trace.append(*[float(tok) for tok in ln.split(",")])
        return trace


def _energy_of(branch: str, r: float, k: float, n: int) -> float:
    if branch == "J":
        return (-k) / (-r) ** (n / (n - 2))
    return r / k ** ((n - 2) / n)


def _in_cone(branch: str, u: ScalarField, r: float, k: float) -> bool:
    if u.min() <= 0:
        return False
    return (r < 0 and k < 0) if branch == "J" else (r > 0 and k > 0)


def _damped_direction(defect: ScalarField, coef: np.ndarray, dt: float) -> np.ndarray:
    """Spectral damping of the defect's stiff modes: multiply the spectrum
    by (1 + theta dt |xi|^2)^(-1), theta the geometric mean of the local
    diffusion coefficient.  Cheap (one transform round trip), consistent as
    dt -> 0, fixed points unchanged."""
    grid = defect.grid
    theta = float(np.exp(np.mean(np.log(coef))))
    sym = 1.0 + theta * dt * xi_squared(grid)
    return irfft_field(rfft_field(defect.values) / sym, grid.shape)


def _apply_step(u: ScalarField, defect: ScalarField, dt: float, renormalize: bool,
                precondition: bool, coef: Optional[np.ndarray]) -> Optional[ScalarField]:
    """Multiply by exp(-dt * direction); with preconditioning the direction
    is the implicitly damped defect.  Returns None when the exponential
    would overflow (caller halves dt)."""
    grid = u.grid
    direction = defect.values
    if precondition:
        direction = _damped_direction(defect, coef, dt)
    arg = -dt * direction
    if not np.all(np.isfinite(arg)) or np.abs(arg).max() > 60.0:
        return None  # exp would overflow the critical power downstream
    new_vals = u.values * np.exp(arg)
    if not np.all(np.isfinite(new_vals)):
        return None
    new = ScalarField(grid, new_vals)
    return normalize_critical(new) if renormalize else new


def _diffusion_coefficient(u: ScalarField, branch: str, r: float, k: float) -> np.ndarray:
    """Pointwise diffusion coefficient of the linearized flow,
    c_n u^(1-p) times the branch ratio."""
    exps = u.grid.exponents
    coef = exps.c_n * u.values ** (1.0 - exps.p)
    if branch == "J":
        coef = (k / r) * coef
    return np.clip(coef, 1e-30, None)


class _FlowState:
    """Current state with its cached scalars and defect."""

    __slots__ = ("u", "r", "k", "defect", "dsq", "energy")

    def __init__(self, u: ScalarField, K: ScalarField, branch: str):
        self.u = u
        self.r = r_of(u)
        self.k = k_of(u, K)
        if not _in_cone(branch, u, self.r, self.k):
            raise FlowError(f"state not in the {branch} cone (r={self.r:.3e}, k={self.k:.3e})")
        self.defect = flow_defect(u, K, branch, self.r, self.k)
        self.dsq = weighted_defect_sq(u, self.defect)
        self.energy = _energy_of(branch, self.r, self.k, u.grid.n)


def _try_advance(state: _FlowState, K: ScalarField, dt: float, branch: str,
                 renormalize: bool, precondition: bool) -> Optional[_FlowState]:
    coef = _diffusion_coefficient(state.u, branch, state.r, state.k) if precondition else None
    trial = _apply_step(state.u, state.defect, dt, renormalize, precondition, coef)
    if trial is None or trial.min() <= 0:
        return None
    r1, k1 = r_of(trial), k_of(trial, K)
    if not _in_cone(branch, trial, r1, k1):
        return None
    e1 = _energy_of(branch, r1, k1, trial.grid.n)
    if e1 > state.energy + 1e-10 * (1.0 + abs(state.energy)):
        return None
    new = _FlowState.__new__(_FlowState)
    new.u, new.r, new.k, new.energy = trial, r1, k1, e1
    new.defect = flow_defect(trial, K, branch, r1, k1)
    new.dsq = weighted_defect_sq(trial, new.defect)
    return new


def step_j(u: ScalarField, K: ScalarField, dt: float, *, renormalize: bool = True,
           cfg: Optional[FlowConfig] = None) -> ScalarField:
    """One accepted step of the J flow; dt is halved internally on rejection
    and the step errors out if dt underflows the configured minimum."""
    return _step_single(u, K, dt, "J", renormalize, cfg or FlowConfig())


def step_i(u: ScalarField, K: ScalarField, dt: float, *, renormalize: bool = True,
           cfg: Optional[FlowConfig] = None) -> ScalarField:
    """One accepted step of the I flow (same acceptance rules as step_j)."""
    return _step_single(u, K, dt, "I", renormalize, cfg or FlowConfig())


def _step_single(u: ScalarField, K: ScalarField, dt: float, branch: str,
                 renormalize: bool, cfg: FlowConfig) -> ScalarField:
    if dt <= 0:
        raise ValueError("dt must be positive")
    state = _FlowState(u, K, branch)
    while True:
        advanced = _try_advance(state, K, dt, branch, renormalize, cfg.precondition)
        if advanced is not None:
            return advanced.u
        dt *= 0.5
        if dt < cfg.dt_min:
            raise FlowError("stiff step: flow left the cone", last_state=u)


def run_flow(u0: ScalarField, K: ScalarField, cfg: FlowConfig, which: str = "J"):
    """Integrate one flow line until t_max, until the delta-square tolerance
    is sustained for five consecutive accepted steps, or until dt underflows.

    Returns (final state, FlowTrace).  The adaptive step doubles after ten
    consecutive accepted steps and halves on every rejection.
    """
    branch = which.upper()
    if branch not in ("J", "I"):
        raise ValueError("which must be 'J' or 'I'")
    grid = u0.grid
    mon_p = cfg.monitor_p if cfg.monitor_p is not None else grid.n / 2.0

    u_start = normalize_critical(u0) if cfg.renormalize_each_step else u0
    try:
        state = _FlowState(u_start, K, branch)
    except FlowError as err:
        raise FlowError(f"initial {err}", trace=FlowTrace(), last_state=u0)

    trace = FlowTrace()
    t = 0.0

    def record(s: _FlowState):
        volume = critical_norm(s.u) ** grid.exponents.two_star
        weight = s.u.values ** grid.exponents.two_star
        lp_defect = float((np.abs(s.defect.values) ** mon_p * weight).sum() * grid.cell_volume)
        trace.append(t, s.r, s.k, s.energy, volume, s.u.min(), s.u.max(), s.dsq, lp_defect)

    record(state)
    if state.dsq < cfg.tol_delta_sq:
        return state.u, trace

    dt = cfg.dt_initial
    accepted_run = 0
    below_tol_run = 0
    steps = 0
    while t < cfg.t_max and steps < cfg.max_steps:
        steps += 1
        advanced = _try_advance(state, K, dt, branch, cfg.renormalize_each_step, cfg.precondition)
        if advanced is None:
            dt *= 0.5
            accepted_run = 0
            if dt < cfg.dt_min:
                raise FlowError("stiff step: flow left the cone", trace=trace, last_state=state.u)
            continue

        state = advanced
        t += dt
        accepted_run += 1
        record(state)

        if state.u.min() < cfg.safeguard_min_u:
            raise FlowError(f"positivity safeguard tripped: min u = {state.u.min():.3e}",
                            trace=trace, last_state=state.u)
        if state.dsq < cfg.tol_delta_sq:
            below_tol_run += 1
            if below_tol_run >= 5:
                break
        else:
            below_tol_run = 0
        if accepted_run >= 10:
            dt = min(2.0 * dt, cfg.dt_max)
            accepted_run = 0
    return state.u, trace


def low_mode_family(grid: GridSpec, count: int, rng: np.random.Generator,
                    amplitude: float = 0.3, K: Optional[ScalarField] = None,
                    branch: str = "J") -> List[ScalarField]:
    """Positive low-frequency perturbations of the constant, normalized.
    When K is given, each amplitude is halved until the state lands in the
    requested cone (the gradient term c_n |xi|^2 is large on small tori, so
    admissible perturbations of the constant are small)."""
    from .operators import random_smooth_field

    out = []
    for _ in range(count):
        f = random_smooth_field(grid, rng, decay=2.0, corner_modes=2.0)
        spread = float(np.abs(f.values).max())
        if spread == 0:
            continue
        amp = amplitude
        candidate = None
        for _ in range(12):
            vals = np.clip(1.0 + amp * f.values / spread, 0.05, None)
            candidate = normalize_critical(ScalarField(grid, vals))
            if K is None or _in_cone(branch, candidate, r_of(candidate), k_of(candidate, K)):
                break
            amp *= 0.5
        else:
            candidate = None
        if candidate is not None:
            out.append(candidate)
    return out


@dataclass
class MinimizeResult:
    minimizer: ScalarField
    report: object
    traces: List[FlowTrace]


def _quasi_newton_descend(u: ScalarField, K: ScalarField, branch: str,
                          maxiter: int = 400) -> ScalarField:
    """L-BFGS descent of the energy in v = ln u (positivity for free; the
    scale invariance makes the radial direction flat and harmless).  Used
    when the explicit flow has transported the state into a basin but
    crawls: quasi-Newton curvature information finishes the descent."""
    from scipy.optimize import minimize as scipy_minimize

    grid = u.grid
    shape = grid.shape
    n = grid.n

    def objective(v_flat):
        vals = np.exp(v_flat.reshape(shape))
        f = ScalarField(grid, vals)
        r = r_of(f)
        k = k_of(f, K)
        if branch == "J":
            if not (r < 0 and k < 0):
                return np.inf, np.zeros_like(v_flat)
            energy = (-k) / (-r) ** (n / (n - 2))
        else:
            if not (r > 0 and k > 0):
                return np.inf, np.zeros_like(v_flat)
            energy = r / k ** ((n - 2) / n)
        from .functionals import _grad_common

        g = _grad_common(f, K, r, k, branch)
        grad_v = g.values * vals * grid.cell_volume
        return energy, grad_v.reshape(-1)

    v0 = np.log(np.clip(u.values, 1e-12, None)).reshape(-1)
    result = scipy_minimize(objective, v0, jac=True, method="L-BFGS-B",
                            options={"maxiter": maxiter, "ftol": 1e-16, "gtol": 1e-14})
    vals = np.exp(result.x.reshape(shape))
    candidate = normalize_critical(ScalarField(grid, vals))
    if _in_cone(branch, candidate, r_of(candidate), k_of(candidate, K)):
        return candidate
    return u


def refine_critical_point(u: ScalarField, K: ScalarField, branch: str) -> ScalarField:
    """Scale to the solution normalization, polish with the Levenberg
    Newton, and return the normalized refined state.  Falls back to the
    input when the polish leaves the branch's cone or raises the energy."""
    from .functionals import newton_polish

    r, k = r_of(u), k_of(u, K)
    if r * k <= 0:
        return u
    n = u.grid.n
    w = ScalarField(u.grid, (r / k) ** ((n - 2) / 4.0) * u.values)
    w = newton_polish(w, K)
    if w.min() <= 0:
        return u
    candidate = normalize_critical(w)
    r1, k1 = r_of(candidate), k_of(candidate, K)
    if not _in_cone(branch, candidate, r1, k1):
        return u
    e0 = _energy_of(branch, r, k, n)
    e1 = _energy_of(branch, r1, k1, n)
    return candidate if e1 <= e0 + 1e-9 * (1 + abs(e0)) else u


def minimize(K: ScalarField, cfg: FlowConfig, which: str = "J", restarts: int = 4,
             seed: int = 0, seeds: Optional[Sequence[ScalarField]] = None,
             polish: bool = True) -> MinimizeResult:
    """Run restart flows from the documented initial family (provided seeds,
    the constant, low-mode perturbations) and return the least-energy
    converged state.  Deterministic for a fixed seed.

    With ``polish`` (default), each flow endpoint that has not reached the
    delta-square tolerance is pushed further by quasi-Newton descent in
    ln u and a Levenberg Newton solve of the critical equation; the flow
    does the global transport, the polish the local convergence."""
    branch = which.upper()
    grid = K.grid
    rng = np.random.default_rng(seed)

    candidates: List[ScalarField] = []
    if seeds:
        candidates.extend(seeds)
    candidates.append(normalize_critical(ScalarField.constant(grid, 1.0)))
    if restarts > len(candidates):
        candidates.extend(low_mode_family(grid, restarts - len(candidates), rng,
                                          K=K, branch=branch))
    candidates = candidates[:max(restarts, 1)]

    admissible = []
    for u0 in candidates:
        u0n = normalize_critical(u0)
        if _in_cone(branch, u0n, r_of(u0n), k_of(u0n, K)):
            admissible.append(u0n)
    if not admissible:
        raise FlowError("empty variational space at this resolution")

    best = None
    traces = []
    for u0 in admissible:
        try:
            u_fin, trace = run_flow(u0, K, cfg, which=branch)
        except FlowError as err:
            if err.trace is not None:
                traces.append(err.trace)
            continue
        traces.append(trace)
        if polish and trace.column("delta_sq")[-1] > cfg.tol_delta_sq:
            u_fin = _quasi_newton_descend(u_fin, K, branch)
            u_fin = refine_critical_point(u_fin, K, branch)
        e = _energy_of(branch, r_of(u_fin), k_of(u_fin, K), grid.n)
        if best is None or e < best[0]:
            best = (e, u_fin)
    if best is None:
        raise FlowError("no flow line converged", trace=traces[-1] if traces else None)
    rep = energy_report(best[1], K)
    return MinimizeResult(minimizer=best[1], report=rep, traces=traces)


@dataclass(frozen=True)
class CompactnessReport:
    branch: str
    bounds_hold: bool
    concentration_flag: bool
    details: dict


def compactness_monitor(trace: FlowTrace, certificate, K: ScalarField,
                        sobolev_bound: float, branch: str = "J",
                        concentration_factor: float = 5.0) -> CompactnessReport:
    """Check the certificate-implied a-priori bounds along a trace and flag
    concentration (growth of max u beyond a configured factor)."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    n = K.grid.n
    r = trace.column("r")
    k = trace.column("k")
    energy = trace.column("energy")
    max_u = trace.column("max_u")

    details = {}
    if branch == "J":
        c0 = (1.0 / (certificate.B * sobolev_bound ** 2)) ** (n / (n - 2))
        L = float(energy.max())
        r_floor = (c0 / L) ** ((n - 2) / n)
        details.update(
            c0=c0, sublevel=L, r_floor=r_floor,
            inf_minus_k=float((-k).min()), sup_minus_k=float((-k).max()),
            inf_minus_r=float((-r).min()), sup_minus_r=float((-r).max()),
            k_sup_bound=float(np.abs(K.values).max()),
            r_sup_bound=K.grid.volume ** (2.0 / n),
        )
        bounds = (
            details["inf_minus_k"] >= c0 - 1e-8
            and details["sup_minus_k"] <= details["k_sup_bound"] + 1e-8
            and details["sup_minus_r"] <= details["r_sup_bound"] + 1e-8
            and details["inf_minus_r"] >= r_floor - 1e-8
        )
    else:
        L = float(energy.max())
        k_sup = float(np.max(K.values))
        details.update(
            sublevel=L, k_sup_bound=k_sup,
            inf_k=float(k.min()), sup_k=float(k.max()),
            inf_r=float(r.min()), sup_r=float(r.max()),
            r_sup_bound=L * k_sup ** ((n - 2) / n),
        )
        # k^((n-2)/n) >= r / L pointwise on the sublevel {I <= L}
        bounds = (
            details["sup_k"] <= k_sup + 1e-8
            and details["inf_r"] > 0
            and details["sup_r"] <= details["r_sup_bound"] + 1e-8
            and float(np.min(k ** ((n - 2) / n) - r / L)) >= -1e-8
        )
    growth = float(max_u[-1] / max_u[0]) if max_u[0] > 0 else float("inf")
    details["max_u_growth"] = growth
    return CompactnessReport(branch=branch, bounds_hold=bool(bounds),
                             concentration_flag=growth > concentration_factor,
                             details=details)
