"""Bubble calculus on the flat torus: profiles, interactions, thresholds,
test functions, and the linear decomposition against a background solution.

A bubble is the cut-off concentration profile

    phi_{a,lam} = eta_a(d) (lam / (1 + lam^2 rho^2))^((n-2)/2),

with d the torus distance from a, eta_a a smooth cutoff (1 inside the
cutoff radius, 0 beyond twice that), and rho = d in fast mode.  In exact
mode rho is read off the discrete Green's function of L, normalized so the
two modes agree to leading order near the pole; that requires G > 0 on the
cutoff ball, which fails on small-volume tori where the negative zero mode
dominates, and is reported as an error.

Quadrature discipline: single-bubble radial integrals are computed by 1D
composite Gauss quadrature (machine accurate at any lam).  Lattice sums of
bubble powers alias badly once lam * spacing grows past about 1/2, so
grid-based interaction integrals enforce a resolvability bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import gamma

from .functionals import FunctionalError, k_of, r_of
from .operators import SpectralOperator, greens_function
from .torus import (
    GridSpec,
    ScalarField,
    TorusError,
    critical_norm,
    integrate,
    normalize_critical,
    smooth_indicator,
    torus_distance,
)


class BubbleError(ValueError):
    pass


# Concentration scale versus lattice spacing: beyond this the spike aliases.
RESOLVABLE_LAMBDA_SPACING = 0.5


@dataclass(frozen=True)
class BubbleParams:
    """Center, concentration, and cutoff radius of one bubble."""

    a: tuple
    lam: float
    cutoff_radius: float

    def __post_init__(self):
        if self.lam <= 0 or self.cutoff_radius <= 0:
            raise BubbleError("lam and cutoff_radius must be positive")

    def validate_on(self, grid: GridSpec) -> None:
        if len(self.a) != grid.n:
            raise BubbleError(f"center needs {grid.n} coordinates")
        if 2.0 * self.cutoff_radius > grid.side_length / 2.0:
            raise BubbleError("cutoff support does not fit in a half period")
        if self.lam * self.cutoff_radius < 2.0:
            raise BubbleError(
                f"bubble not resolved inside cutoff (lam * cutoff = {self.lam * self.cutoff_radius:.2f} < 2)")


def default_params(grid: GridSpec, a, lam: float) -> BubbleParams:
    return BubbleParams(a=tuple(float(x) for x in a), lam=float(lam),
                        cutoff_radius=grid.side_length / 8.0)


# --- universal constants ------------------------------------------------------


@dataclass(frozen=True)
class BubbleConstants:
    n: int
    b: float
    c1: float
    c2: float
    c3: float
    c4: float
    c0: float
    gamma_n: float
    omega_n: float
    closed_form: dict = field(repr=False, default_factory=dict)


def _radial_integral(f, n: int, tail_exponent: float, R: float = 100.0,
                     panels: int = 1000, nodes: int = 100) -> float:
    """omega_n * int_0^R r^(n-1) f(r) dr by composite Gauss-Legendre, plus
    the analytic algebraic tail omega_n R^(n-tail)/ (tail - n) for
    f ~ r^(-tail)."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(0.0, R, panels + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    r = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    omega = surface_area(n)
    body = float((weights * r ** (n - 1) * f(r)).sum()) * omega
    tail = omega * R ** (n - tail_exponent) / (tail_exponent - n)
    return body + tail


def surface_area(n: int) -> float:
    """|S^(n-1)|."""
    return 2.0 * math.pi ** (n / 2.0) / gamma(n / 2.0)


def _beta_radial(a: float, q: float) -> float:
    """int_0^inf r^(a-1) (1+r^2)^(-q) dr in Gamma form."""
    return gamma(a / 2.0) * gamma(q - a / 2.0) / (2.0 * gamma(q))


@lru_cache(maxsize=8)
def bubble_constants(n: int) -> BubbleConstants:
    """The universal bubble integrals, by radial quadrature, cross-checked
    against their Gamma-function closed forms (stored alongside)."""
    if n not in (3, 4, 5):
        raise BubbleError("n must be 3, 4, or 5")
    omega = surface_area(n)

    b = _radial_integral(lambda r: (1.0 + r ** 2) ** (-(n + 2) / 2.0), n, tail_exponent=n + 2)
    c1 = _radial_integral(lambda r: (1.0 + r ** 2) ** (-float(n)), n, tail_exponent=2 * n)
    c2 = (n - 2) ** 2 / 4.0 * _radial_integral(
        lambda r: (r ** 2 - 1.0) ** 2 * (1.0 + r ** 2) ** (-(n + 2.0)), n, tail_exponent=2 * n)
    c3 = (n - 2) ** 2 / n * _radial_integral(
        lambda r: r ** 2 * (1.0 + r ** 2) ** (-(n + 2.0)), n, tail_exponent=2 * n + 2)
    c4 = b
    c0 = 4.0 * n * (n - 1) * c1
    gamma_n = (4.0 * n * (n - 1) * omega) ** (2.0 / (2.0 - n))

    closed = {
        "b": omega * _beta_radial(n, (n + 2) / 2.0),
        "c1": omega * _beta_radial(n, float(n)),
        "c2": (n - 2) ** 2 / 4.0 * omega * (
            _beta_radial(n + 4, n + 2.0) - 2.0 * _beta_radial(n + 2, n + 2.0) + _beta_radial(n, n + 2.0)),
        "c3": (n - 2) ** 2 / n * omega * _beta_radial(n + 2, n + 2.0),
    }
    closed["c4"] = closed["b"]
    closed["c0"] = 4.0 * n * (n - 1) * closed["c1"]
    return BubbleConstants(n=n, b=b, c1=c1, c2=c2, c3=c3, c4=c4, c0=c0,
                           gamma_n=gamma_n, omega_n=omega, closed_form=closed)


def constants_csv(dims: Sequence[int] = (3, 4, 5)) -> str:
    header = "n,quantity,quadrature,closed_form,rel_error\n"
    rows = []
    for n in dims:
        bc = bubble_constants(n)
        for name in ("b", "c1", "c2", "c3", "c4", "c0"):
            quad = getattr(bc, name)
            ref = bc.closed_form[name]
            rows.append(f"{n},{name},{quad:.12e},{ref:.12e},{abs(quad / ref - 1.0):.3e}")
        rows.append(f"{n},gamma_n,{bc.gamma_n:.12e},{bc.gamma_n:.12e},0")
        rows.append(f"{n},omega_n,{bc.omega_n:.12e},{bc.omega_n:.12e},0")
    return header + "\n".join(rows) + "\n"


# --- bubble fields ------------------------------------------------------------


def _exact_mode_rho2(params: BubbleParams, grid: GridSpec) -> np.ndarray:
    """rho^2 from the discrete Green's function of L: the normalization
    4(n-1)|S^(n-1)| G matches the near-pole coefficient of our operator, so
    rho approaches the torus distance at the pole."""
    n = grid.n
    idx = tuple(int(round(c / grid.spacing)) % grid.points_per_axis for c in params.a)
    G = greens_function(grid, idx).values.values
    d = torus_distance(grid, params.a)
    ball = d < 2.0 * params.cutoff_radius
    if np.any(G[ball] <= 0):
        raise BubbleError("Green positivity violated in cutoff region")
    kappa = 4.0 * (n - 1) * surface_area(n)
    rho2 = np.full(grid.shape, np.inf)
    rho2[ball] = (kappa * G[ball]) ** (2.0 / (2.0 - n))
    return rho2


def bubble_field(params: BubbleParams, grid: GridSpec, mode: str = "fast") -> ScalarField:
    """The profile eta_a (lam/(1 + lam^2 rho^2))^((n-2)/2), zero outside the
    cutoff support.  mode='fast' takes rho = torus distance; mode='exact'
    reads rho off the Green's function (needs G > 0 on the cutoff ball)."""
    params.validate_on(grid)
    n = grid.n
    d = torus_distance(grid, params.a)
    eta = smooth_indicator((d - params.cutoff_radius) / params.cutoff_radius)
    if mode == "fast":
        rho2 = d ** 2
    elif mode == "exact":
        rho2 = _exact_mode_rho2(params, grid)
        rho2 = np.where(eta > 0, rho2, 0.0)
    else:
        raise BubbleError(f"unknown mode {mode!r}")
    lam = params.lam
    theta = (lam / (1.0 + lam ** 2 * rho2)) ** ((n - 2) / 2.0)
    return ScalarField(grid, eta * theta)


def bubble_lambda_derivative(params: BubbleParams, grid: GridSpec) -> ScalarField:
    """phi_2 = -lam d/dlam phi = -eta ((n-2)/2) theta (1-lam^2 d^2)/(1+lam^2 d^2)
    (profile derivative times the cutoff, fast mode)."""
    params.validate_on(grid)
    n = grid.n
    d = torus_distance(grid, params.a)
    eta = smooth_indicator((d - params.cutoff_radius) / params.cutoff_radius)
    lam = params.lam
    q = lam ** 2 * d ** 2
    theta = (lam / (1.0 + q)) ** ((n - 2) / 2.0)
    return ScalarField(grid, -eta * (n - 2) / 2.0 * theta * (1.0 - q) / (1.0 + q))


def bubble_center_derivatives(params: BubbleParams, grid: GridSpec) -> List[ScalarField]:
    """phi_3 components: (1/lam) grad_a phi, one field per coordinate axis
    (profile derivative only, times the cutoff)."""
    params.validate_on(grid)
    n = grid.n
    lam = params.lam
    d = torus_distance(grid, params.a)
    eta = smooth_indicator((d - params.cutoff_radius) / params.cutoff_radius)
    q = lam ** 2 * d ** 2
    theta = (lam / (1.0 + q)) ** ((n - 2) / 2.0)
    # d/da_j theta = (n-2) theta lam^2 (x_j - a_j)_per / (1 + q)
    common = eta * (n - 2) * theta * lam / (1.0 + q)
    out = []
    for ax in range(n):
        x = grid.axis_coordinates()
        delta = x - (params.a[ax] % grid.side_length)
        delta = (delta + grid.side_length / 2.0) % grid.side_length - grid.side_length / 2.0
        shape = [1] * n
        shape[ax] = grid.points_per_axis
        out.append(ScalarField(grid, common * delta.reshape(shape)))
    return out


def bubble_radial_integral(params: BubbleParams, power: float, n: int,
                           samples: int = 200_000) -> float:
    """integral of (eta theta)^power over R^n by 1D radial quadrature, exact
    at any lam (the lattice aliases once lam * spacing > ~0.5)."""
    lam = params.lam
    eps = params.cutoff_radius
    omega = surface_area(n)
    r = np.linspace(0.0, 2.0 * eps, samples + 1)
    eta = smooth_indicator((r - eps) / eps)
    prof = eta * (lam / (1.0 + lam ** 2 * r ** 2)) ** ((n - 2) / 2.0)
    return float(np.trapezoid(prof ** power * omega * r ** (n - 1), r))


def bubble_norm_critical(params: BubbleParams, n: int) -> float:
    """integral phi^(2n/(n-2)), radial; approaches c1 from below as lam grows
    at fixed cutoff (the missing tail mass is positive and shrinking)."""
    return bubble_radial_integral(params, 2.0 * n / (n - 2), n)


# --- interactions -------------------------------------------------------------


def interaction_cutoff(dist: float, cutoff_radius: float) -> float:
    """The interaction window: 1 below 4 eps, 0 beyond 6 eps, smooth ramp."""
    s = (dist - 4.0 * cutoff_radius) / (2.0 * cutoff_radius)
    return float(smooth_indicator(np.array([s]))[0])


def epsilon_ij(pi: BubbleParams, pj: BubbleParams, grid: GridSpec, mode: str = "fast") -> float:
    """Pairwise interaction number

        eps_ij = eta(d) (lam_j/lam_i + lam_i/lam_j + lam_i lam_j rho^2)^((2-n)/2)

    with rho^2 = d(a_i, a_j)^2 in fast mode, or the Green's-function radial
    variable in exact mode."""
    n = grid.n
    d = float(torus_distance(grid, pi.a)[tuple(int(round(c / grid.spacing)) % grid.points_per_axis
                                               for c in pj.a)])
    eta = interaction_cutoff(d, max(pi.cutoff_radius, pj.cutoff_radius))
    if eta == 0.0:
        return 0.0
    if mode == "fast":
        rho2 = d ** 2
    elif mode == "exact":
        idx_i = tuple(int(round(c / grid.spacing)) % grid.points_per_axis for c in pi.a)
        idx_j = tuple(int(round(c / grid.spacing)) % grid.points_per_axis for c in pj.a)
        G = greens_function(grid, idx_i).values.values[idx_j]
        if G <= 0:
            raise BubbleError("Green positivity violated between centers")
        rho2 = (4.0 * (n - 1) * surface_area(n) * float(G)) ** (2.0 / (2.0 - n))
    else:
        raise BubbleError(f"unknown mode {mode!r}")
    core = pj.lam / pi.lam + pi.lam / pj.lam + pi.lam * pj.lam * rho2
    return eta * core ** ((2.0 - n) / 2.0)


def interaction_matrix(params: Sequence[BubbleParams], grid: GridSpec, mode: str = "fast") -> np.ndarray:
    q = len(params)
    eps = np.zeros((q, q))
    for i in range(q):
        for j in range(i + 1, q):
            eps[i, j] = eps[j, i] = epsilon_ij(params[i], params[j], grid, mode=mode)
    return eps


def _require_resolved(params: BubbleParams, grid: GridSpec) -> None:
    if params.lam * grid.spacing > RESOLVABLE_LAMBDA_SPACING:
        raise BubbleError(
            f"unresolved bubble: lam * spacing = {params.lam * grid.spacing:.3f} > "
            f"{RESOLVABLE_LAMBDA_SPACING} (lattice quadrature would alias)")


@dataclass(frozen=True)
class InteractionReport:
    selfaction_c1: float
    selfaction_c1_ratio: float
    selfaction_c2: float
    selfaction_c2_ratio: float
    cross: float
    cross_leading: float
    cross_ratio: float
    lambda_orthogonality: float


def interaction_integrals(pi: BubbleParams, pj: BubbleParams, grid: GridSpec) -> InteractionReport:
    """Lattice values of the self- and interaction integrals against their
    universal leading terms: integral phi_i^(2n/(n-2)) vs c1, the squared
    lam-derivative pairing vs c2, integral phi_i^p phi_j vs b eps_ij, and
    the near-orthogonality integral phi_i^p phi_{2,i} (small)."""
    _require_resolved(pi, grid)
    _require_resolved(pj, grid)
    n = grid.n
    exps = grid.exponents
    bc = bubble_constants(n)
    phi_i = bubble_field(pi, grid)
    phi_j = bubble_field(pj, grid)
    phi2_i = bubble_lambda_derivative(pi, grid)
    dv = grid.cell_volume

    self_c1 = float((phi_i.values ** exps.two_star).sum() * dv)
    self_c2 = float((phi_i.values ** (4.0 / (n - 2)) * phi2_i.values ** 2).sum() * dv)
    cross = float((phi_i.values ** exps.p * phi_j.values).sum() * dv)
    eps = epsilon_ij(pi, pj, grid)
    lam_orth = float((phi_i.values ** exps.p * phi2_i.values).sum() * dv)
    lead = bc.b * eps
    return InteractionReport(
        selfaction_c1=self_c1, selfaction_c1_ratio=self_c1 / bc.c1,
        selfaction_c2=self_c2, selfaction_c2_ratio=self_c2 / bc.c2,
        cross=cross, cross_leading=lead,
        cross_ratio=cross / lead if lead != 0 else float("nan"),
        lambda_orthogonality=lam_orth,
    )


# --- blow-up threshold and the mixed test function ----------------------------


def blowup_threshold(j_value_u0: float, K: ScalarField) -> float:
    """Least single-bubble blow-up energy of I:

        I_inf = ( -J(u0)^(-(n-2)/2) + c0 (4n(n-1)/max K)^((n-2)/2) )^(2/n),

    the bubble sitting where K is maximal."""
    n = K.grid.n
    maxK = float(K.values.max())
    if maxK <= 0:
        raise BubbleError("Y empty, threshold undefined (max K <= 0)")
    if j_value_u0 <= 0:
        raise BubbleError("J(u0) must be positive")
    bc = bubble_constants(n)
    core = -j_value_u0 ** (-(n - 2) / 2.0) + bc.c0 * (4.0 * n * (n - 1) / maxK) ** ((n - 2) / 2.0)
    if core <= 0:
        raise BubbleError("blow-up core negative; threshold undefined at these values")
    return core ** (2.0 / n)


def fit_beta(u0: ScalarField, K: ScalarField) -> float:
    """Least-squares beta with L u0 = (1/beta) K u0^p (scalar regression of
    K u0^p against L u0)."""
    L = SpectralOperator.conformal_l(u0.grid)
    lhs = L.apply(u0).values.ravel()
    rhs = (K.values * u0.values ** u0.grid.exponents.p).ravel()
    denom = float(lhs @ lhs)
    if denom == 0:
        raise BubbleError("degenerate u0 in beta fit")
    inv_beta = float(lhs @ rhs) / denom
    if inv_beta <= 0:
        raise BubbleError("fitted beta not positive")
    return 1.0 / inv_beta


def seed_test_function(u0: ScalarField, K: ScalarField, a, lam: float,
                       beta: Optional[float] = None,
                       cutoff_radius: Optional[float] = None) -> ScalarField:
    """Normalized mixed test function alpha0 u0 + alpha1 phi_{a,lam} with

        alpha0^(4/(n-2)) = 1/beta,   alpha1^(4/(n-2)) = 4n(n-1)/K(a),

    the choices that cancel the cross terms in the energy expansion and
    land strictly below the blow-up threshold."""
    grid = u0.grid
    n = grid.n
    idx = tuple(int(round(c / grid.spacing)) % grid.points_per_axis for c in a)
    K_a = float(K.values[idx])
    if K_a <= 0:
        raise BubbleError(f"K(a) = {K_a:.3e} <= 0 at the bubble center")
    if beta is None:
        beta = fit_beta(u0, K)
    alpha0 = (1.0 / beta) ** ((n - 2) / 4.0)
    alpha1 = (4.0 * n * (n - 1) / K_a) ** ((n - 2) / 4.0)
    params = BubbleParams(a=tuple(float(x) for x in a), lam=float(lam),
                          cutoff_radius=cutoff_radius if cutoff_radius is not None
                          else grid.side_length / 8.0)
    phi = bubble_field(params, grid)
    return normalize_critical(ScalarField(grid, alpha0 * u0.values + alpha1 * phi.values))


def _ramp_derivative(s: np.ndarray) -> np.ndarray:
    """d/ds of the smooth_indicator ramp on (0, 1), zero elsewhere."""
    out = np.zeros_like(s)
    mid = (s > 0.0) & (s < 1.0)
    sm = s[mid]
    out[mid] = np.exp(1.0 - 1.0 / (1.0 - sm ** 2)) * (-2.0 * sm / (1.0 - sm ** 2) ** 2)
    return out


def radial_average(f: ScalarField, center, r_max: float, bin_width: Optional[float] = None):
    """Spherical averages of a lattice field around ``center``: returns
    (radii, averages) with the value at the center prepended, ready for
    interpolation.  Exact for radial integrands up to the lattice binning."""
    grid = f.grid
    d = torus_distance(grid, center).ravel()
    vals = f.values.ravel()
    width = bin_width if bin_width is not None else 0.5 * grid.spacing
    nbins = int(np.ceil(r_max / width)) + 1
    which = np.minimum((d / width).astype(int), nbins - 1)
    sums = np.bincount(which, weights=vals, minlength=nbins)
    counts = np.bincount(which, minlength=nbins)
    centers = (np.arange(nbins) + 0.5) * width
    good = counts > 0
    radii = np.concatenate(([0.0], centers[good]))
    idx = tuple(int(round(c / grid.spacing)) % grid.points_per_axis for c in center)
    averages = np.concatenate(([f.values[idx]], sums[good] / counts[good]))
    return radii, averages


@dataclass(frozen=True)
class SeedEnergy:
    lam: float
    r: float
    k: float
    I: float
    in_Y: bool
    bubble_quadratic: float


def seed_energy_expansion(w0: ScalarField, K: ScalarField, a, lam: float,
                          cutoff_radius: float, beta: float = 1.0,
                          samples: int = 200_000) -> SeedEnergy:
    """Continuum energy of the mixed test function alpha0 w0 + alpha1
    phi_{a,lam}, valid at any concentration (no lattice representation of
    the bubble is needed).

    All bubble integrals run as 1D radial quadrature, including the cutoff
    gradient in <L phi, phi>; the background enters through its lattice
    scalars and through spherical averages of K w0^m around the center.
    Inside the spike w0 is replaced by its center value, an approximation
    bounded by the relative variation of w0 (well under a percent for the
    backgrounds this is used on).  Requires an integer critical exponent
    (n = 3 or 4)."""
    grid = w0.grid
    n = grid.n
    exps = grid.exponents
    s_exp = exps.two_star
    if abs(s_exp - round(s_exp)) > 1e-12:
        raise BubbleError("seed energy expansion needs an integer critical exponent (n = 3 or 4)")
    s_int = int(round(s_exp))
    idx = tuple(int(round(c / grid.spacing)) % grid.points_per_axis for c in a)
    K_a = float(K.values[idx])
    if K_a <= 0:
        raise BubbleError("K(a) <= 0 at the expansion center")
    alpha0 = beta ** (-(n - 2) / 4.0)
    alpha1 = (4.0 * n * (n - 1) / K_a) ** ((n - 2) / 4.0)

    eps = cutoff_radius
    omega = surface_area(n)
    r = np.linspace(0.0, 2.0 * eps, samples + 1)
    r[0] = 1e-12
    srel = (r - eps) / eps
    eta = smooth_indicator(srel)
    deta = _ramp_derivative(srel) / eps
    q = lam ** 2 * r ** 2
    theta = (lam / (1.0 + q)) ** ((n - 2) / 2.0)
    dtheta = -(n - 2) * theta * lam ** 2 * r / (1.0 + q)
    phi = eta * theta
    dphi = eta * dtheta + deta * theta
    measure = omega * r ** (n - 1)

    quad = float(np.trapezoid((exps.c_n * dphi ** 2 - phi ** 2) * measure, r))

    # spherical averages of K w0^m, m = 0..s-1, interpolated onto the radial grid
    avg_cache = {}

    def avg_on_r(m: int) -> np.ndarray:
        if m not in avg_cache:
            field = ScalarField(grid, K.values * w0.values ** m)
            radii, averages = radial_average(field, a, 2.0 * eps)
            avg_cache[m] = np.interp(r, radii, averages)
        return avg_cache[m]

    # k(seed) via the binomial expansion of (alpha0 w0 + alpha1 phi)^{2*}
    from math import comb

    k_seed = alpha0 ** s_int * k_of(w0, K)
    for j in range(1, s_int + 1):
        t_j = float(np.trapezoid(avg_on_r(s_int - j) * phi ** j * measure, r))
        k_seed += comb(s_int, j) * alpha0 ** (s_int - j) * alpha1 ** j * t_j

    # r(seed): background + cross (L w0 = K w0^p / beta) + bubble quadratic
    cross = float(np.trapezoid(avg_on_r(s_int - 1) * phi * measure, r)) / beta
    r_seed = alpha0 ** 2 * r_of(w0) + 2.0 * alpha0 * alpha1 * cross + alpha1 ** 2 * quad

    in_Y = r_seed > 0 and k_seed > 0
    I = r_seed / k_seed ** ((n - 2) / n) if in_Y else float("nan")
    return SeedEnergy(lam=float(lam), r=r_seed, k=k_seed, I=I, in_Y=in_Y,
                      bubble_quadratic=quad)


def seed_energy_sweep(w0: ScalarField, K: ScalarField, a, lams: Sequence[float],
                      cutoff_radius: float, beta: float = 1.0) -> List[SeedEnergy]:
    return [seed_energy_expansion(w0, K, a, lam, cutoff_radius, beta=beta) for lam in lams]


# --- decomposition against a background solution ------------------------------


@dataclass
class Decomposition:
    alpha: float
    alphas: List[float]
    bubbles: List[BubbleParams]
    v: ScalarField
    gram_condition: float
    orthogonality: List[float]
    almost_orthogonality: dict
    refined: bool = False

    def reconstruct(self, u_infty: ScalarField, grid: GridSpec) -> ScalarField:
        total = self.alpha * u_infty.values + self.v.values
        for alpha_i, p in zip(self.alphas, self.bubbles):
            total = total + alpha_i * bubble_field(p, grid).values
        return ScalarField(grid, total)


def _l_pairing(L: SpectralOperator, f: ScalarField, g: ScalarField) -> float:
    return integrate(ScalarField(f.grid, L.apply(f).values * g.values))


def _solve_linear_coefficients(u: ScalarField, u_infty: ScalarField,
                               fields: List[ScalarField], L: SpectralOperator,
                               cond_limit: float) -> tuple:
    basis = [u_infty] + fields
    m = len(basis)
    G = np.empty((m, m))
    Lb = [L.apply(bfield) for bfield in basis]
    for i in range(m):
        for j in range(i, m):
            G[i, j] = G[j, i] = integrate(ScalarField(u.grid, Lb[i].values * basis[j].values))
    rhs = np.array([integrate(ScalarField(u.grid, Lb[i].values * u.values)) for i in range(m)])
    cond = float(np.linalg.cond(G))
    if cond > cond_limit:
        raise BubbleError(f"bubbles nearly parallel: Gram condition {cond:.3e}")
    coeff = np.linalg.solve(G, rhs)
    return coeff, cond


def _weighted_misfit(u: ScalarField, u_infty: ScalarField, params: List[BubbleParams],
                     L: SpectralOperator, cond_limit: float) -> float:
    grid = u.grid
    fields = [bubble_field(p, grid) for p in params]
    coeff, _ = _solve_linear_coefficients(u, u_infty, fields, L, cond_limit)
    recon = coeff[0] * u_infty.values
    for c, f in zip(coeff[1:], fields):
        recon = recon + c * f.values
    weight = np.abs(u.values) ** (4.0 / (grid.n - 2))
    return float((weight * (u.values - recon) ** 2).sum() * grid.cell_volume)


def _golden_refine(fun, lo: float, hi: float, iters: int = 18) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def decompose(u: ScalarField, u_infty: ScalarField, bubbles: Sequence[BubbleParams],
              refine: bool = False, cond_limit: float = 1e6,
              trust_lambda: float = 0.1, trust_center: float = 0.02,
              max_rounds: int = 50) -> Decomposition:
    """Write u = alpha u_inf + sum alpha_i phi_i + v with v orthogonal to the
    span of {u_inf, phi_i} in the L-pairing, by solving the (q+1)x(q+1)
    linear system.  With ``refine`` the (a_i, lam_i) are improved by
    coordinate descent (golden section per coordinate, lambdas first, then
    centers) on the u^(4/(n-2))-weighted misfit, inside the trust region."""
    grid = u.grid
    L = SpectralOperator.conformal_l(grid)
    params = [BubbleParams(a=p.a, lam=p.lam, cutoff_radius=p.cutoff_radius) for p in bubbles]

    if refine and params:
        misfit = lambda ps: _weighted_misfit(u, u_infty, ps, L, cond_limit)
        for _ in range(max_rounds):
            moved = 0.0
            for i, p in enumerate(params):
                lo = p.lam * (1.0 - trust_lambda)
                hi = p.lam * (1.0 + trust_lambda)
                best = _golden_refine(
                    lambda lam: misfit(params[:i] + [BubbleParams(p.a, lam, p.cutoff_radius)] + params[i + 1:]),
                    lo, hi)
                moved = max(moved, abs(best / p.lam - 1.0))
                params[i] = BubbleParams(p.a, best, p.cutoff_radius)
                p = params[i]
            for i, p in enumerate(params):
                for ax in range(grid.n):
                    width = trust_center * grid.side_length
                    def move(pos, i=i, ax=ax, p=p):
                        a = list(p.a)
                        a[ax] = pos
                        return misfit(params[:i] + [BubbleParams(tuple(a), p.lam, p.cutoff_radius)] + params[i + 1:])
                    best = _golden_refine(move, p.a[ax] - width, p.a[ax] + width)
                    moved = max(moved, abs(best - p.a[ax]) / grid.side_length)
                    a = list(p.a)
                    a[ax] = best
                    params[i] = BubbleParams(tuple(a), p.lam, p.cutoff_radius)
                    p = params[i]
            if moved < 1e-6:
                break

    fields = [bubble_field(p, grid) for p in params]
    coeff, cond = _solve_linear_coefficients(u, u_infty, fields, L, cond_limit)
    recon = coeff[0] * u_infty.values
    for c, f in zip(coeff[1:], fields):
        recon = recon + c * f.values
    v = ScalarField(grid, u.values - recon)

    ortho = [abs(_l_pairing(L, u_infty, v))]
    for f in fields:
        ortho.append(abs(_l_pairing(L, f, v)))

    almost = {"lambda": [], "center": []}
    for p in params:
        phi2 = bubble_lambda_derivative(p, grid)
        almost["lambda"].append(abs(_l_pairing(L, phi2, v)))
        comps = bubble_center_derivatives(p, grid)
        almost["center"].append(float(np.sqrt(sum(_l_pairing(L, c, v) ** 2 for c in comps))))

    return Decomposition(alpha=float(coeff[0]), alphas=[float(c) for c in coeff[1:]],
                         bubbles=params, v=v, gram_condition=cond,
                         orthogonality=ortho, almost_orthogonality=almost,
                         refined=bool(refine))
