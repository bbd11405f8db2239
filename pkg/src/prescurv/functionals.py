"""The scalars r, k, the energies J and I, their gradients and residuals.

Conventions (all integrals over the flat torus with its lattice quadrature):

    r(u)   = <L u, u>              with L = -c_n Lap - 1,
    k(u)   = integral K u^(2n/(n-2)),
    R_g(u) = u^(-p) L u            (scalar curvature of u^(4/(n-2)) g_0),
    J(u)   = -k / (-r)^(n/(n-2))   on X = {u>0, r<0, k<0, ||u||_crit = 1},
    I(u)   = r / k^((n-2)/n)       on Y = {u>0, r>0, k>0, ||u||_crit = 1}.

Both energies are invariant under positive rescaling of u, so they extend to
homogeneous formulas off the unit sphere; the reports below evaluate them on
the normalized representative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .operators import SpectralOperator, h1_norm_sq, parseval_weights, rfft_field, xi_squared
from .torus import ScalarField, critical_norm, integrate, lp_norm

POSITIVITY_FLOOR = 1e-10
MEMBERSHIP_NORM_TOL = 1e-10


class FunctionalError(ValueError):
    pass


def r_of(u: ScalarField) -> float:
    """Total-curvature pairing <L u, u> = integral (c_n |grad u|^2 - u^2),
    evaluated in Parseval form."""
    grid = u.grid
    spec = rfft_field(u.values)
    w = parseval_weights(grid)
    sym = grid.exponents.c_n * xi_squared(grid) - 1.0
    total = float((w * sym * (spec.real ** 2 + spec.imag ** 2)).sum())
    return total * grid.volume / grid.total_points ** 2


def k_of(u: ScalarField, K: ScalarField) -> float:
    """K-pairing: integral of K u^(2n/(n-2)).  Requires u >= 0 (fractional
    power for n = 5); tiny negative values from roundoff are clipped."""
    if u.grid != K.grid:
        raise FunctionalError("grid mismatch between u and K")
    if u.min() < -1e-13:
        raise FunctionalError("fractional power of negative base")
    base = np.clip(u.values, 0.0, None)
    return float((K.values * base ** u.grid.exponents.two_star).sum() * u.grid.cell_volume)


def k_of_abs(u: ScalarField, K: ScalarField) -> float:
    """K-pairing with |u|: the form that appears in the A-B inequality,
    which is quantified over all of H^1, sign included."""
    if u.grid != K.grid:
        raise FunctionalError("grid mismatch between u and K")
    return float((K.values * np.abs(u.values) ** u.grid.exponents.two_star).sum() * u.grid.cell_volume)


def scalar_curvature(u: ScalarField) -> ScalarField:
    """R_g = u^(-p) L u.  Aborts if u dips below the positivity floor
    (the negative power would be garbage; nothing is clamped silently)."""
    if u.min() < POSITIVITY_FLOOR:
        raise FunctionalError(
            f"field minimum {u.min():.3e} below positivity floor {POSITIVITY_FLOOR:.0e}; "
            "scalar curvature undefined"
        )
    L = SpectralOperator.conformal_l(u.grid)
    lu = L.apply(u)
    return ScalarField(u.grid, lu.values * u.values ** (-u.grid.exponents.p))


@dataclass(frozen=True)
class EnergyReport:
    r: float
    k: float
    critical_norm: float
    in_X: bool
    in_Y: bool
    J: Optional[float] = None
    I: Optional[float] = None


def energy_report(u: ScalarField, K: ScalarField) -> EnergyReport:
    r = r_of(u)
    k = k_of(u, K)
    norm = critical_norm(u)
    positive = u.min() > 0.0
    normalized = abs(norm - 1.0) < MEMBERSHIP_NORM_TOL
    in_X = positive and normalized and r < 0 and k < 0
    in_Y = positive and normalized and r > 0 and k > 0
    n = u.grid.n
    J = (-k) / (-r) ** (n / (n - 2)) if in_X else None
    I = r / k ** ((n - 2) / n) if in_Y else None
    return EnergyReport(r=r, k=k, critical_norm=norm, in_X=in_X, in_Y=in_Y, J=J, I=I)


def j_energy(u: ScalarField, K: ScalarField) -> EnergyReport:
    return energy_report(u, K)


def i_energy(u: ScalarField, K: ScalarField) -> EnergyReport:
    return energy_report(u, K)


def j_value(u: ScalarField, K: ScalarField) -> float:
    """Homogeneous J, defined whenever r < 0 and k < 0 (no normalization
    needed: both numerator and denominator scale the same way)."""
    r = r_of(u)
    k = k_of(u, K)
    if not (r < 0 and k < 0):
        raise FunctionalError(f"J undefined: r={r:.3e}, k={k:.3e} (need both < 0)")
    n = u.grid.n
    return (-k) / (-r) ** (n / (n - 2))


def i_value(u: ScalarField, K: ScalarField) -> float:
    r = r_of(u)
    k = k_of(u, K)
    if not (r > 0 and k > 0):
        raise FunctionalError(f"I undefined: r={r:.3e}, k={k:.3e} (need both > 0)")
    n = u.grid.n
    return r / k ** ((n - 2) / n)


def grad_j(u: ScalarField, K: ScalarField) -> ScalarField:
    """Differential of J at u:
    (2*/(-r)^(n/(n-2))) ((-k/-r) L u - K u^p).  Vanishes on solutions with
    the matching ratio; radial direction is annihilated automatically."""
    rep = energy_report(u, K)
    if not rep.in_X:
        raise FunctionalError("gradient defined on X only")
    return _grad_common(u, K, rep.r, rep.k, branch="J")


def grad_i(u: ScalarField, K: ScalarField) -> ScalarField:
    """Differential of I at u: (2/k^((n-2)/n)) (L u - (r/k) K u^p)."""
    rep = energy_report(u, K)
    if not rep.in_Y:
        raise FunctionalError("gradient defined on Y only")
    return _grad_common(u, K, rep.r, rep.k, branch="I")


def _grad_common(u: ScalarField, K: ScalarField, r: float, k: float, branch: str) -> ScalarField:
    exps = u.grid.exponents
    L = SpectralOperator.conformal_l(u.grid)
    lu = L.apply(u).values
    up = u.values ** exps.p
    if branch == "J":
        n = u.grid.n
        coeff = exps.two_star / (-r) ** (n / (n - 2))
        core = (k / r) * lu - K.values * up
    else:
        n = u.grid.n
        coeff = 2.0 / k ** ((n - 2) / n)
        core = lu - (r / k) * K.values * up
    return ScalarField(u.grid, coeff * core)


def flow_defect(u: ScalarField, K: ScalarField, branch: str, r: Optional[float] = None,
                k: Optional[float] = None) -> ScalarField:
    """Pointwise defect driving the flow: (−k/−r) R − K on the J branch,
    R − (r/k) K on the I branch."""
    if r is None:
        r = r_of(u)
    if k is None:
        k = k_of(u, K)
    R = scalar_curvature(u)
    if branch == "J":
        return ScalarField(u.grid, (k / r) * R.values - K.values)
    return ScalarField(u.grid, R.values - (r / k) * K.values)


def delta_j_sq(u: ScalarField, K: ScalarField) -> float:
    """|delta J|^2 = integral |(-k/-r) R - K|^2 u^(2n/(n-2)); zero exactly at
    normalized solutions of the ratio equation."""
    rep = energy_report(u, K)
    if not rep.in_X:
        raise FunctionalError("delta_j_sq defined on X only")
    d = flow_defect(u, K, "J", rep.r, rep.k)
    return weighted_defect_sq(u, d)


def delta_i_sq(u: ScalarField, K: ScalarField) -> float:
    rep = energy_report(u, K)
    if not rep.in_Y:
        raise FunctionalError("delta_i_sq defined on Y only")
    d = flow_defect(u, K, "I", rep.r, rep.k)
    return weighted_defect_sq(u, d)


def weighted_defect_sq(u: ScalarField, defect: ScalarField) -> float:
    """integral |defect|^2 u^(2n/(n-2)) d mu (the conformal-volume L2 norm)."""
    w = u.values ** u.grid.exponents.two_star
    return float((defect.values ** 2 * w).sum() * u.grid.cell_volume)


def dual_defect_estimate(u: ScalarField, defect: ScalarField) -> float:
    """H^1-dual proxy for the defect: sqrt(<S^{-1} g, g>) with
    g = defect * u^p and S the screened operator.  Reported alongside the
    weighted L2 value; neither is claimed to be the W^{-1,2} norm."""
    g = ScalarField(u.grid, defect.values * u.values ** u.grid.exponents.p)
    S = SpectralOperator.screened_l(u.grid)
    sol = S.solve(g)
    return float(np.sqrt(max(integrate(ScalarField(u.grid, sol.values * g.values)), 0.0)))


def el_residual(u: ScalarField, K: ScalarField, beta: float) -> float:
    """Max-norm residual of L u - (1/beta) K u^p."""
    if beta == 0:
        raise FunctionalError("beta must be nonzero")
    if u.min() <= 0:
        raise FunctionalError("el_residual needs u > 0")
    L = SpectralOperator.conformal_l(u.grid)
    res = L.apply(u).values - (1.0 / beta) * K.values * u.values ** u.grid.exponents.p
    return float(np.abs(res).max())


def scaled_solution(u_crit: ScalarField, K: ScalarField, delta_tol: float = 1e-6,
                    polish: bool = True) -> tuple:
    """Rescale a normalized critical point to an exact solution of
    L w = K w^p.

    A critical point of J or I satisfies L u = (r/k) K u^p, i.e. beta = k/r.
    The rescaled field w = (r/k)^((n-2)/4) u then solves L w = K w^p, and
    r(w) = k(w) holds identically.  Returns (w, beta).
    """
    r = r_of(u_crit)
    k = k_of(u_crit, K)
    if r * k <= 0:
        raise FunctionalError(f"r*k <= 0 (r={r:.3e}, k={k:.3e}); no scaling to a solution")
    branch = "J" if r < 0 else "I"
    d = flow_defect(u_crit, K, branch, r, k)
    dsq = weighted_defect_sq(u_crit, d)
    if dsq > delta_tol:
        raise FunctionalError(f"not a critical point: |delta|^2 = {dsq:.3e} > {delta_tol:.1e}")
    n = u_crit.grid.n
    beta = k / r
    w = ScalarField(u_crit.grid, (r / k) ** ((n - 2) / 4.0) * u_crit.values)
    if polish:
        w = newton_polish(w, K)
    return w, beta


def newton_polish(w: ScalarField, K: ScalarField, max_iter: int = 40, tol: float = 1e-12,
                  mu0: float = 1.0) -> ScalarField:
    """Levenberg-style Newton on F(w) = L w - K w^p: solve
    (J_F + mu I) delta = -F with MINRES and a screened spectral
    preconditioner, shrinking mu on success and inflating it when the step
    fails to reduce the L2 residual.  Positivity is enforced by the line
    search.  Returns the best iterate seen."""
    from scipy.sparse.linalg import LinearOperator, minres

    grid = w.grid
    exps = grid.exponents
    L = SpectralOperator.conformal_l(grid)
    shape = grid.shape
    m = grid.total_points
    dv = grid.cell_volume

    def residual(vals: np.ndarray) -> np.ndarray:
        f = ScalarField(grid, vals)
        return L.apply(f).values - K.values * np.clip(vals, 0.0, None) ** exps.p

    def l2(res: np.ndarray) -> float:
        return float(np.sqrt((res ** 2).sum() * dv))

    from .operators import irfft_field  # local alias

    current = w.values.copy()
    res = residual(current)
    best, best_l2 = current.copy(), l2(res)
    mu = mu0

    for _ in range(max_iter):
        rnorm = l2(res)
        scale = l2(K.values * np.clip(current, 0.0, None) ** exps.p) + 1e-30
        if rnorm / scale < tol:
            break
        diag = exps.p * K.values * np.clip(current, 1e-30, None) ** (exps.p - 1.0)
        moved = False
        for _ in range(8):  # inflate mu until a productive step is found
            sym_pre = exps.c_n * xi_squared(grid) + 1.0 + mu

            def matvec(vec, diag=diag, mu=mu):
                f = vec.reshape(shape)
                lf = irfft_field(L.symbol * rfft_field(f), shape)
                return (lf - diag * f + mu * f).reshape(-1)

            def prevec(vec, sym_pre=sym_pre):
                f = vec.reshape(shape)
                return irfft_field(rfft_field(f) / sym_pre, shape).reshape(-1)

            A = LinearOperator((m, m), matvec=matvec)
            M = LinearOperator((m, m), matvec=prevec)
            delta, _ = minres(A, -res.reshape(-1), rtol=1e-12, maxiter=1200, M=M)
            step = delta.reshape(shape)
            if np.all(np.isfinite(step)):
                t = 1.0
                for _ in range(12):
                    candidate = current + t * step
                    if candidate.min() > 0:
                        cand_res = residual(candidate)
                        if l2(cand_res) < rnorm:
                            current, res = candidate, cand_res
                            moved = True
                            break
                    t *= 0.5
            if moved:
                mu = max(mu * 0.25, 1e-12)
                break
            mu *= 4.0
        if not moved:
            break
        if l2(res) < best_l2:
            best, best_l2 = current.copy(), l2(res)
    return ScalarField(grid, best)


def lemma_3_3_bounds(K: ScalarField, certificate, sobolev_bound: float) -> dict:
    """Constants the A-B certificate forces on X: a positive lower bound for
    -k, the sup bound -k <= ||K||_inf, and -r <= vol^(2/n).  On a sublevel
    {J <= L} additionally -r >= (c0/L)^((n-2)/n)."""
    n = K.grid.n
    c0 = (1.0 / (certificate.B * sobolev_bound ** 2)) ** (n / (n - 2))
    return {
        "k_lower": c0,
        "k_upper": float(np.abs(K.values).max()),
        "r_upper": K.grid.volume ** (2.0 / n),
    }
