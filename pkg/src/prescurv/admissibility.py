"""Solvability diagnostics: the A-B inequality, the linear necessary
condition, the first-eigenvalue condition, and the counterexample family.

The A-B inequality reads

    ||u||_{H^1}^2  <=  A r(u) + B |k(u)|^((n-2)/n)

with the Sobolev norm ||u||^2 = integral (c_n |grad u|^2 + u^2).  It cannot
be proved at desk scale; ``certify_ab`` searches (A, B) against a documented
sample family and returns an empirical certificate (evidence, not proof).
The hard samples are mixtures sliding mass onto {K >= 0} until the pairing k
crosses zero: any valid (A, B) must cover the crossing with r alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .functionals import h1_norm_sq, k_of_abs, r_of
from .operators import (
    DirichletMask,
    SpectralOperator,
    dirichlet_nu1,
    random_smooth_field,
    sobolev_constant_estimate,
    superlevel_mask,
)
from .torus import (
    GridSpec,
    ScalarField,
    TorusError,
    bump_field,
    integrate,
    normalize_critical,
    smooth_indicator,
    torus_distance,
)


class CertificateNotFound(RuntimeError):
    pass


@dataclass(frozen=True)
class ABCertificate:
    A: float
    B: float
    eps0: float
    sample_count: int
    worst_slack: float
    seed: int
    scope: str = "Global"  # or "OnX"

    def to_text(self) -> str:
        lines = [
            f"A={self.A!r}",
            f"B={self.B!r}",
            f"eps0={self.eps0!r}",
            f"sample_count={self.sample_count}",
            f"worst_slack={self.worst_slack!r}",
            f"seed={self.seed}",
            f"scope={self.scope}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ABCertificate":
        kv = {}
        for line in text.strip().splitlines():
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
        return cls(A=float(kv["A"]), B=float(kv["B"]), eps0=float(kv["eps0"]),
                   sample_count=int(kv["sample_count"]), worst_slack=float(kv["worst_slack"]),
                   seed=int(kv["seed"]), scope=kv.get("scope", "Global"))


@dataclass(frozen=True)
class SamplerConfig:
    random_fields: int = 120
    bubble_lambdas: tuple = (6.0, 10.0, 16.0)
    mixture_steps: int = 24
    scope: str = "Global"


def _sample_slack_terms(u: ScalarField, K: ScalarField) -> tuple:
    """(r, |k|^((n-2)/n), ||u||_H1^2) for one normalized sample."""
    n = u.grid.n
    r = r_of(u)
    kappa = abs(k_of_abs(u, K)) ** ((n - 2) / n)
    return r, kappa, h1_norm_sq(u)


def ab_sample_family(K: ScalarField, sampler: SamplerConfig, seed: int) -> List[ScalarField]:
    """The documented sample family: the constant, filtered random fields
    (signed and positive), concentration profiles on {K >= 0}, and
    adversarial constant-to-bump mixtures bracketing the k = 0 crossing."""
    grid = K.grid
    rng = np.random.default_rng(seed)
    samples: List[ScalarField] = [normalize_critical(ScalarField.constant(grid, 1.0))]

    for _ in range(sampler.random_fields):
        f = random_smooth_field(grid, rng, decay=rng.uniform(1.0, 3.0))
        scale = float(np.abs(f.values).max())
        if scale == 0:
            continue
        if sampler.scope == "OnX" or rng.random() < 0.5:
            vals = 1.0 + 0.8 * (f.values / scale) * rng.random()
            vals = np.clip(vals, 0.02, None)
        else:
            vals = f.values
        samples.append(normalize_critical(ScalarField(grid, vals)))

    peak = np.unravel_index(int(np.argmax(K.values)), grid.shape)
    peak_xy = np.array(peak) * grid.spacing
    cutoff = grid.side_length / 8.0
    d = torus_distance(grid, peak_xy)
    eta = smooth_indicator((d - cutoff) / cutoff)
    max_lam = 0.5 / grid.spacing
    for lam in sampler.bubble_lambdas:
        lam = min(float(lam), max_lam)
        prof = eta * (lam / (1.0 + lam ** 2 * d ** 2)) ** ((grid.n - 2) / 2.0)
        if float(np.abs(prof).max()) > 0:
            samples.append(normalize_critical(ScalarField(grid, prof)))

    # adversarial mixtures: slide mass onto {K >= 0}; include the k-crossing
    bump = bump_field(grid, peak_xy, 1.5 * grid.spacing, max(6 * grid.spacing, 0.08 * grid.side_length))
    ks = []
    mixtures = []
    for t in np.linspace(0.0, 1.0, sampler.mixture_steps):
        u = normalize_critical(ScalarField(grid, (1.0 - t) + t * bump.values * (1.0 / max(integrate(bump), 1e-12))))
        mixtures.append(u)
        ks.append(k_of_abs(u, K))
    samples.extend(mixtures)
    ks = np.array(ks)
    crossings = np.nonzero(np.diff(np.sign(ks)))[0]
    for c in crossings:
        lo, hi = c / (sampler.mixture_steps - 1), (c + 1) / (sampler.mixture_steps - 1)
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            u = normalize_critical(ScalarField(grid, (1.0 - mid) + mid * bump.values * (1.0 / max(integrate(bump), 1e-12))))
            if np.sign(k_of_abs(u, K)) == np.sign(ks[c]):
                lo = mid
            else:
                hi = mid
        samples.append(u)
    return samples


def certify_ab(K: ScalarField, sampler: Optional[SamplerConfig] = None, seed: int = 0,
               target_eps0: float = 1e-2,
               a_grid: Optional[np.ndarray] = None,
               b_grid: Optional[np.ndarray] = None) -> ABCertificate:
    """Search (A, B) on a log grid for the pair maximizing the worst-case
    slack  A r + B |k|^((n-2)/n) - ||u||_H1^2  over the sample family.
    Succeeds when that slack clears ``target_eps0``.  Deterministic for a
    fixed seed; re-running reproduces worst_slack bit for bit."""
    sampler = sampler or SamplerConfig()
    samples = ab_sample_family(K, sampler, seed)
    terms = np.array([_sample_slack_terms(u, K) for u in samples])
    r, kappa, h1 = terms[:, 0], terms[:, 1], terms[:, 2]

    A = a_grid if a_grid is not None else np.logspace(-2, 2, 33)
    B = b_grid if b_grid is not None else np.logspace(-2, 3, 41)
    slack = (A[:, None, None] * r[None, None, :]
             + B[None, :, None] * kappa[None, None, :]
             - h1[None, None, :])
    worst = slack.min(axis=2)  # shape (A, B)
    best = float(worst.max())
    if best <= 0:
        raise CertificateNotFound(
            f"no empirical certificate: K likely too positive (best slack {best:.3e})")
    if best < target_eps0:
        raise CertificateNotFound(
            f"best slack {best:.3e} below requested margin {target_eps0:.3e}")
    # slack is monotone in B wherever kappa > 0, so the raw argmax runs to
    # the grid edge; among qualifying pairs prefer the smallest B (strongest
    # control of |k|), then the smallest A
    qualifying = np.argwhere(worst >= target_eps0)
    order = np.lexsort((A[qualifying[:, 0]], B[qualifying[:, 1]]))
    i, j = qualifying[order[0]]
    return ABCertificate(A=float(A[i]), B=float(B[j]), eps0=float(target_eps0),
                         sample_count=len(samples), worst_slack=float(worst[i, j]),
                         seed=seed, scope=sampler.scope)


def replay_certificate(cert: ABCertificate, K: ScalarField,
                       sampler: Optional[SamplerConfig] = None) -> float:
    """Regenerate the retained samples and return the worst slack under the
    certificate's (A, B); soundness means this is >= eps0."""
    sampler = sampler or SamplerConfig(scope=cert.scope)
    samples = ab_sample_family(K, sampler, cert.seed)
    n = K.grid.n
    worst = np.inf
    for u in samples:
        r, kappa, h1 = _sample_slack_terms(u, K)
        worst = min(worst, cert.A * r + cert.B * kappa - h1)
    return float(worst)


# --- Prop.-style smallness check on nested domains ---------------------------


@dataclass(frozen=True)
class DomainPair:
    omega: DirichletMask
    big: DirichletMask
    dist: float

    def __post_init__(self):
        if not self.big.contains(self.omega):
            raise TorusError("omega must be contained in the big domain")
        if self.big.count <= self.omega.count:
            raise TorusError("containment must be strict")
        if self.dist <= 2 * self.omega.grid.spacing:
            raise TorusError("boundary separation must exceed two lattice cells")


def boundary_separation(omega: DirichletMask, big: DirichletMask) -> float:
    """Lattice distance between the two boundaries, measured in dilation
    steps of the inner domain until it escapes the outer one."""
    if not big.contains(omega):
        raise TorusError("omega must be contained in the big domain")
    from .operators import periodic_dilation

    grid = omega.grid
    current = omega.inside
    for steps in range(1, grid.points_per_axis):
        current = periodic_dilation(current, 1)
        if not bool(np.all(big.inside | ~current)):
            return steps * grid.spacing
    return grid.side_length


def nested_domains(K: ScalarField, inner_cells: int = 3, outer_cells: int = 6) -> DomainPair:
    """Default Omega, D as dilations of {K >= 0} by inner and outer cells."""
    base = superlevel_mask(K, 0.0)
    if base.is_empty:
        raise TorusError("{K >= 0} is empty; nested domains undefined")
    omega = base.dilate(inner_cells)
    big = omega.dilate(outer_cells - inner_cells)
    return DomainPair(omega=omega, big=big,
                      dist=boundary_separation(omega, big))


@dataclass(frozen=True)
class SmallnessReport:
    passed: bool
    vacuous: bool
    sup_K: float
    inf_negK_outside: float
    nu1_D: float
    dist: float
    annulus_volume: float
    sobolev: float
    C2: float
    C3: float
    B_min: float
    C1: float
    sup_K_threshold: float
    epsilon_effective: float
    lines: tuple

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def check_rauzy_smallness(K: ScalarField, pair: DomainPair, epsilon: Optional[float] = None,
                          sobolev: Optional[float] = None, nu1_tol: float = 1e-7) -> SmallnessReport:
    """Evaluate the constructive smallness condition

        sup K < eps [ dist^(2(n-1)/(n-2)) (nu1(D)/(nu1(D)+1))^(n/(n-2)) ] inf_{M\\Omega}(-K)

    with the full constants chain printed.  The chain (cutoff-gradient
    constant 2, Young split a = 1/2, Hoelder volume factors, empirical
    Sobolev bound) yields a threshold for sup K; when ``epsilon`` is given
    the displayed bracket is used instead."""
    grid = K.grid
    n = grid.n
    c_n = grid.exponents.c_n
    outside = ~pair.omega.inside
    if not outside.any():
        raise TorusError("Omega covers the torus; no outside region")
    inf_negK = float((-K.values[outside]).min())
    if inf_negK <= 0:
        raise TorusError("Omega does not contain {K >= 0}")
    sup_K = float(K.values.max())

    lines = []
    if sup_K <= 0:
        lines.append(f"sup K = {sup_K:.6g} <= 0: smallness holds vacuously")
        return SmallnessReport(passed=True, vacuous=True, sup_K=sup_K,
                               inf_negK_outside=inf_negK, nu1_D=float("nan"),
                               dist=pair.dist, annulus_volume=float("nan"),
                               sobolev=float("nan"), C2=float("nan"), C3=float("nan"),
                               B_min=float("nan"), C1=float("nan"),
                               sup_K_threshold=float("inf"),
                               epsilon_effective=float("nan"), lines=tuple(lines))

    nu1_D = dirichlet_nu1(pair.big, tol=nu1_tol)
    if nu1_D <= 0:
        lines.append(f"nu1(D) = {nu1_D:.6g} <= 0: condition (ii) fails")
        return SmallnessReport(passed=False, vacuous=False, sup_K=sup_K,
                               inf_negK_outside=inf_negK, nu1_D=nu1_D, dist=pair.dist,
                               annulus_volume=float("nan"), sobolev=float("nan"),
                               C2=float("nan"), C3=float("nan"), B_min=float("nan"),
                               C1=float("nan"), sup_K_threshold=0.0,
                               epsilon_effective=float("nan"), lines=tuple(lines))

    d = pair.dist
    annulus = (pair.big.count - pair.omega.count) * grid.cell_volume
    S = sobolev if sobolev is not None else sobolev_constant_estimate(grid, samples=100, seed=0)
    ratio = nu1_D / (nu1_D + 1.0)
    exp_n = n / (n - 2)

    # constants chain, Young split a = 1/2, cutoff gradient constant 2
    C_grad = 2.0
    C2 = C_grad ** 2 * c_n
    C3 = (grid.volume - pair.omega.count * grid.cell_volume) ** (2.0 / n)
    B_min = 2.0 * (2.0 * C2 / ratio * annulus ** (2.0 / n) / d ** 2 + C3) / inf_negK ** ((n - 2) / n)
    B_min = B_min ** 1.0  # B_min as displayed below is B_min^{ (n-2)/n } convention: keep power explicit
    Bpow_min = 2.0 ** exp_n * (2.0 * C2 / ratio * annulus ** (2.0 / n) / d ** 2 + C3) ** exp_n / inf_negK
    C1 = (c_n * ratio / (4.0 * S ** 2)) ** exp_n
    threshold = C1 / Bpow_min

    bracket = d ** (2.0 * (n - 1) / (n - 2)) * ratio ** exp_n * inf_negK
    if epsilon is not None:
        threshold_used = epsilon * bracket
        eps_eff = epsilon
    else:
        threshold_used = threshold
        eps_eff = threshold / bracket if bracket > 0 else float("nan")

    passed = sup_K < threshold_used
    lines.extend([
        f"sup K                      = {sup_K:.6g}",
        f"inf_(M\\Omega)(-K)          = {inf_negK:.6g}",
        f"nu1(D)                     = {nu1_D:.6g}   (condition (ii): > 0: {'ok' if nu1_D > 0 else 'FAIL'})",
        f"dist(bd Omega, bd D)       = {d:.6g}",
        f"|D \\ Omega|                = {annulus:.6g}",
        f"Sobolev bound S            = {S:.6g}",
        f"cutoff gradient constant   = {C_grad:.3g}  (|grad eta| <= C/d)",
        f"C2 = C^2 c_n               = {C2:.6g}",
        f"C3 = |M \\ Omega|^(2/n)     = {C3:.6g}",
        f"Young split a              = 0.5",
        f"condition 1)  B^(n/(n-2)) > {Bpow_min:.6g}",
        f"condition 2)  C1           = {C1:.6g}",
        f"sup K threshold            = {threshold_used:.6g}" + ("  (user epsilon)" if epsilon is not None else "  (chain default)"),
        f"effective universal eps    = {eps_eff:.6g}  (discretization-dependent surrogate)",
        f"verdict: sup K {'<' if passed else '>='} threshold -> {'PASS' if passed else 'FAIL'}",
    ])
    return SmallnessReport(passed=passed, vacuous=False, sup_K=sup_K,
                           inf_negK_outside=inf_negK, nu1_D=nu1_D, dist=d,
                           annulus_volume=annulus, sobolev=S, C2=C2, C3=C3,
                           B_min=Bpow_min, C1=C1, sup_K_threshold=threshold_used,
                           epsilon_effective=eps_eff, lines=tuple(lines))


# --- linear necessary condition ----------------------------------------------


@dataclass(frozen=True)
class KWReport:
    w_bar: ScalarField = field(repr=False)
    min_w_bar: float
    integral_K: float
    nu1_omega_K: float
    w_bar_positive: bool
    nu1_positive: bool
    integral_negative: bool

    @property
    def verdicts(self) -> tuple:
        return (self.nu1_positive, self.w_bar_positive, self.integral_negative)


def kazdan_warner(K: ScalarField, nu1_tol: float = 1e-7) -> KWReport:
    """Solve the screened linear problem S w = -K and evaluate the three
    necessary conditions: nu1({K>=0}) > 0, w > 0, and integral K < 0.
    The {K >= 0} mask is dilated by one lattice cell before the eigenvalue,
    standing in for an enclosing open domain."""
    S = SpectralOperator.screened_l(K.grid)
    w_bar = S.solve(ScalarField(K.grid, -K.values))
    mask = superlevel_mask(K, 0.0)
    if mask.is_empty:
        nu1 = float("inf")
    else:
        nu1 = dirichlet_nu1(mask.dilate(1), tol=nu1_tol)
    intK = integrate(K)
    return KWReport(w_bar=w_bar, min_w_bar=w_bar.min(), integral_K=intK,
                    nu1_omega_K=nu1, w_bar_positive=w_bar.min() > 0,
                    nu1_positive=nu1 > 0, integral_negative=intK < 0)


def counterexample_K(grid: GridSpec, eps: float, lam: float, p: float, x0) -> ScalarField:
    """The sharp-peak family K = -eps + eta (lam/(1+lam^2 d^2))^p with the
    cutoff eta equal to 1 on B_eps(x0) and supported in B_{2 eps}(x0).
    For min(2, n/2) < p < n, suitable eps and lam make all of
    nu1({K>=0}) > 0 and integral K < 0 hold while min w < 0."""
    n = grid.n
    if not (min(2.0, n / 2.0) < p < n):
        raise TorusError(f"p = {p} outside (min(2, n/2), n) for n = {n}")
    if eps <= 0 or lam <= 0:
        raise TorusError("eps and lam must be positive")
    d = torus_distance(grid, x0)
    eta = smooth_indicator((d - eps) / eps)
    peak = (lam / (1.0 + lam ** 2 * d ** 2)) ** p
    return ScalarField(grid, -eps + eta * peak)


@dataclass(frozen=True)
class SubsolutionReport:
    residual: float
    max_violation: float
    holds: bool


def subsolution_check(u_solution: ScalarField, K: ScalarField,
                      residual_tol: float = 1e-6) -> SubsolutionReport:
    """For a positive solution of L u = K u^p, the inverse conformal factor
    u^(-4/(n-2)) must lie below the linear control solution w pointwise."""
    from .functionals import el_residual

    res = el_residual(u_solution, K, 1.0)
    if res > residual_tol:
        raise TorusError(f"not a solution: residual {res:.3e} > {residual_tol:.1e}")
    n = u_solution.grid.n
    u_bar = u_solution.values ** (-4.0 / (n - 2))
    w_bar = kazdan_warner(K).w_bar.values
    violation = float((u_bar - w_bar).max())
    return SubsolutionReport(residual=res, max_violation=violation,
                             holds=violation <= 1e-8)
