"""Spectral operators on the periodic lattice and Dirichlet eigenvalues.

Three Fourier-multiplier operators are in play:

* the plain Laplacian with symbol -|xi|^2,
* the conformal operator  L = -c_n Lap - 1  (symbol c_n |xi|^2 - 1), whose
  constants form a negative eigendirection (symbol -1 at the zero mode),
* the screened operator   S = -(n-1) Lap + 1 (symbol (n-1)|xi|^2 + 1),
  positive and always invertible.

Forward/inverse transforms use the real FFT; symbols are cached per grid.
Dirichlet problems on lattice masks cannot use the global symbol, so the
first eigenvalue on a mask is computed with a second-order finite-difference
Laplacian (zero extension outside the mask) and shifted inverse power
iteration with conjugate-gradient inner solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.fft
from scipy.sparse.linalg import LinearOperator, cg

from .torus import GridSpec, ScalarField, TorusError, torus_distance

_WORKERS = -1  # let scipy.fft use all cores


class OperatorError(ValueError):
    """Solver or operator construction failure."""


class OperatorKind(Enum):
    LAPLACIAN = "laplacian"
    CONFORMAL_L = "conformal_l"
    SCREENED_L = "screened_l"


def rfft_field(values: np.ndarray) -> np.ndarray:
    return scipy.fft.rfftn(values, workers=_WORKERS)


def irfft_field(spectrum: np.ndarray, shape) -> np.ndarray:
    return scipy.fft.irfftn(spectrum, s=shape, workers=_WORKERS)


@lru_cache(maxsize=32)
def _xi_squared(n: int, points: int, side: float) -> np.ndarray:
    """|xi|^2 on the rfft mode grid, xi = 2 pi k / side per axis."""
    full = 2.0 * np.pi * np.fft.fftfreq(points, d=1.0 / points) / side
    half = 2.0 * np.pi * np.arange(points // 2 + 1) / side
    axes = [full] * (n - 1) + [half]
    xi2 = np.zeros(tuple(points for _ in range(n - 1)) + (points // 2 + 1,))
    for ax, a in enumerate(axes):
        shape = [1] * n
        shape[ax] = a.size
        xi2 = xi2 + (a ** 2).reshape(shape)
    return xi2


@lru_cache(maxsize=32)
def _parseval_weights(n: int, points: int) -> np.ndarray:
    """Multiplicity of each rfft mode when summing |u_hat|^2 over the full grid."""
    w = np.full(tuple(points for _ in range(n - 1)) + (points // 2 + 1,), 2.0)
    w[..., 0] = 1.0
    if points % 2 == 0:
        w[..., -1] = 1.0
    return w


def xi_squared(grid: GridSpec) -> np.ndarray:
    return _xi_squared(grid.n, grid.points_per_axis, grid.side_length)


def parseval_weights(grid: GridSpec) -> np.ndarray:
    return _parseval_weights(grid.n, grid.points_per_axis)


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """A Fourier multiplier on a fixed grid."""

    grid: GridSpec
    kind: OperatorKind
    symbol: np.ndarray = field(repr=False)

    @classmethod
    def laplacian(cls, grid: GridSpec) -> "SpectralOperator":
        return cls(grid, OperatorKind.LAPLACIAN, -xi_squared(grid))

    @classmethod
    def conformal_l(cls, grid: GridSpec) -> "SpectralOperator":
        c_n = grid.exponents.c_n
        return cls(grid, OperatorKind.CONFORMAL_L, c_n * xi_squared(grid) - 1.0)

    @classmethod
    def screened_l(cls, grid: GridSpec) -> "SpectralOperator":
        return cls(grid, OperatorKind.SCREENED_L, (grid.n - 1) * xi_squared(grid) + 1.0)

    def apply(self, f: ScalarField) -> ScalarField:
        if f.grid != self.grid:
            raise OperatorError("grid mismatch between operator and field")
        return ScalarField(self.grid, irfft_field(self.symbol * rfft_field(f.values), self.grid.shape))

    def check_invertible(self, tol: float = 1e-12) -> None:
        bad = np.abs(self.symbol) < tol
        if bad.any():
            idx = tuple(int(i[0]) for i in np.nonzero(bad))
            raise OperatorError(
                f"operator not invertible on this grid: symbol {self.symbol[idx]:.3e} at mode {idx}"
            )

    def solve(self, rhs: ScalarField, tol: float = 1e-12) -> ScalarField:
        """Invert the multiplier: returns f with apply(f) = rhs exactly on
        resolved modes.  Rejects grids where some symbol value is within
        ``tol`` of zero (resonant grid)."""
        if rhs.grid != self.grid:
            raise OperatorError("grid mismatch between operator and field")
        self.check_invertible(tol)
        return ScalarField(self.grid, irfft_field(rfft_field(rhs.values) / self.symbol, self.grid.shape))

    def quadratic_form(self, f: ScalarField) -> float:
        """<op f, f> via Parseval; bit-consistent with the symbol."""
        if f.grid != self.grid:
            raise OperatorError("grid mismatch between operator and field")
        spec = rfft_field(f.values)
        w = parseval_weights(self.grid)
        total = float((w * self.symbol * (spec.real ** 2 + spec.imag ** 2)).sum())
        g = self.grid
        return total * g.volume / g.total_points ** 2


@dataclass(frozen=True, eq=False)
class GreensSample:
    """Discrete Green's function of the conformal operator with a lattice pole."""

    pole: tuple
    values: ScalarField


def discrete_delta(grid: GridSpec, index) -> ScalarField:
    """Lattice delta at a grid index, normalized so its integral is 1."""
    index = tuple(int(i) % grid.points_per_axis for i in np.atleast_1d(index))
    if len(index) != grid.n:
        raise TorusError(f"pole index needs {grid.n} components")
    v = np.zeros(grid.shape)
    v[index] = 1.0 / grid.cell_volume
    return ScalarField(grid, v)


def greens_function(grid: GridSpec, pole_index) -> GreensSample:
    """Green's function of L = -c_n Lap - 1 with pole at a lattice point.
    Sign-changing: the zero mode carries eigenvalue -1, so the average of G
    is -1/vol while the near-pole part is positive."""
    op = SpectralOperator.conformal_l(grid)
    pole = tuple(int(i) % grid.points_per_axis for i in np.atleast_1d(pole_index))
    g = op.solve(discrete_delta(grid, pole))
    return GreensSample(pole=pole, values=g)


# --- Dirichlet masks and the first eigenvalue -------------------------------


@dataclass(frozen=True, eq=False)
class DirichletMask:
    """Boolean lattice mask marking the interior of an open subdomain."""

    grid: GridSpec
    inside: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.inside, dtype=bool)
        if m.shape != self.grid.shape:
            raise TorusError("mask shape does not match grid")
        object.__setattr__(self, "inside", m)

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    @property
    def is_full(self) -> bool:
        return bool(self.inside.all())

    @property
    def is_empty(self) -> bool:
        return not bool(self.inside.any())

    def dilate(self, cells: int = 1) -> "DirichletMask":
        if cells <= 0:
            return self
        grown = periodic_dilation(self.inside, cells)
        return DirichletMask(self.grid, grown)

    def contains(self, other: "DirichletMask") -> bool:
        return bool(np.all(self.inside | ~other.inside))


def cube_mask(grid: GridSpec, corner, size: float) -> DirichletMask:
    """Open axis-aligned cube (corner, corner+size)^n; interior lattice points."""
    corner = np.asarray(corner, dtype=float)
    x = grid.axis_coordinates()
    inside = np.ones(grid.shape, dtype=bool)
    for ax in range(grid.n):
        rel = (x - corner[ax]) % grid.side_length
        sel = (rel > 0) & (rel < size)
        shape = [1] * grid.n
        shape[ax] = grid.points_per_axis
        inside &= sel.reshape(shape)
    return DirichletMask(grid, inside)


def ball_mask(grid: GridSpec, center, radius: float) -> DirichletMask:
    return DirichletMask(grid, torus_distance(grid, center) < radius)


def superlevel_mask(f: ScalarField, level: float = 0.0) -> DirichletMask:
    return DirichletMask(f.grid, f.values >= level)


def punctured_mask(grid: GridSpec, index) -> DirichletMask:
    """Everything except one lattice point."""
    inside = np.ones(grid.shape, dtype=bool)
    inside[tuple(int(i) % grid.points_per_axis for i in np.atleast_1d(index))] = False
    return DirichletMask(grid, inside)


def periodic_dilation(mask: np.ndarray, cells: int = 1) -> np.ndarray:
    """Binary dilation with the face-neighbor structuring element and
    periodic wrap-around."""
    out = mask.copy()
    for _ in range(cells):
        grown = out.copy()
        for ax in range(out.ndim):
            grown |= np.roll(out, 1, axis=ax)
            grown |= np.roll(out, -1, axis=ax)
        out = grown
    return out


def _fd_laplacian(values: np.ndarray, spacing: float) -> np.ndarray:
    out = -2.0 * values.ndim * values
    for ax in range(values.ndim):
        out += np.roll(values, 1, axis=ax) + np.roll(values, -1, axis=ax)
    return out / spacing ** 2


def dirichlet_nu1(mask: DirichletMask, tol: float = 1e-8, max_iter: int = 200) -> float:
    """First Dirichlet eigenvalue of L = -c_n Lap - 1 on the mask.

    Uses the 2nd-order finite-difference Laplacian with zero extension
    outside the mask and shifted inverse power iteration (shift -2, one
    below the Gershgorin lower bound -1 of the masked operator), with
    conjugate-gradient inner solves preconditioned by the periodic
    spectral inverse.  Converged when successive eigenvalue estimates
    differ by less than ``tol`` relative.
    """
    grid = mask.grid
    c_n = grid.exponents.c_n
    h = grid.spacing

    if mask.is_empty:
        return float("inf")  # no admissible test functions: vacuous, infinitely stable
    if mask.is_full:
        # no Dirichlet boundary at all: the periodic ground state is the constant
        return -1.0

    inside = mask.inside
    idx = np.nonzero(inside.ravel())
    m = idx[0].size

    def apply_masked(vec: np.ndarray) -> np.ndarray:
        full = np.zeros(grid.total_points)
        full[idx] = vec
        full = full.reshape(grid.shape)
        out = -c_n * _fd_laplacian(full, h) - full
        return out.reshape(-1)[idx]

    shift = -2.0

    def apply_shifted(vec: np.ndarray) -> np.ndarray:
        return apply_masked(vec) - shift * vec

    shifted = LinearOperator((m, m), matvec=apply_shifted)

    # periodic spectral preconditioner for the shifted operator (SPD)
    sym = c_n * xi_squared(grid) - 1.0 - shift

    def precondition(vec: np.ndarray) -> np.ndarray:
        full = np.zeros(grid.total_points)
        full[idx] = vec
        sol = irfft_field(rfft_field(full.reshape(grid.shape)) / sym, grid.shape)
        return sol.reshape(-1)[idx]

    precond = LinearOperator((m, m), matvec=precondition)

    v = np.ones(m)
    v /= np.linalg.norm(v)
    lam_prev = float(v @ apply_masked(v))
    for _ in range(max_iter):
        w, info = cg(shifted, v, rtol=1e-10, atol=0.0, maxiter=4000, M=precond)
        if info != 0:
            raise OperatorError(f"inner CG failed to converge (info={info})")
        w /= np.linalg.norm(w)
        lam = float(w @ apply_masked(w))
        v = w
        if abs(lam - lam_prev) <= tol * max(1.0, abs(lam)):
            return lam
        lam_prev = lam
    raise OperatorError(f"nu1 iteration did not converge; last estimate {lam_prev:.6e}")


def nu1_dilation_sweep(mask: DirichletMask, steps: int = 3, tol: float = 1e-8) -> list:
    """nu1 on the mask and on one-cell dilations of it.  The continuum
    quantity is a supremum over enclosing smooth domains; this reports the
    finite sweep instead of claiming that supremum."""
    out = []
    current = mask
    for k in range(steps):
        out.append((k, dirichlet_nu1(current, tol=tol)))
        current = current.dilate(1)
    return out


# --- empirical Sobolev constant ---------------------------------------------


def random_smooth_field(grid: GridSpec, rng: np.random.Generator, decay: float = 2.0,
                        corner_modes: float = 3.0) -> ScalarField:
    """White noise filtered by (1 + |xi|^2/xi0^2)^(-decay); mean kept."""
    noise = rng.standard_normal(grid.shape)
    xi2 = xi_squared(grid)
    xi0 = 2.0 * np.pi * corner_modes / grid.side_length
    filt = (1.0 + xi2 / xi0 ** 2) ** (-decay)
    return ScalarField(grid, irfft_field(filt * rfft_field(noise), grid.shape))


def h1_norm_sq(f: ScalarField) -> float:
    """Squared Sobolev norm <(L+2) f, f> = integral of c_n |grad f|^2 + f^2."""
    grid = f.grid
    spec = rfft_field(f.values)
    w = parseval_weights(grid)
    sym = grid.exponents.c_n * xi_squared(grid) + 1.0
    total = float((w * sym * (spec.real ** 2 + spec.imag ** 2)).sum())
    return total * grid.volume / grid.total_points ** 2


def sobolev_constant_estimate(grid: GridSpec, samples: int = 200, seed: int = 0) -> float:
    """Empirical upper bound S with ||f||_{L^{2n/(n-2)}} <= S ||f||_{H^1},
    maximized over constants, filtered random fields, and bubble-like
    profiles.  Deterministic for a fixed seed; grows monotonically with the
    sample count (it is a running maximum)."""
    from .torus import bump_field, lp_norm  # local import to avoid cycles

    rng = np.random.default_rng(seed)
    two_star = grid.exponents.two_star
    best = 0.0

    def ratio(f: ScalarField) -> float:
        h1 = h1_norm_sq(f)
        if h1 <= 0:
            return 0.0
        return lp_norm(f, two_star) / np.sqrt(h1)

    best = max(best, ratio(ScalarField.constant(grid, 1.0)))
    centers = [np.full(grid.n, 0.5 * grid.side_length)]
    for c in centers:
        for width in (0.05, 0.1, 0.2):
            f = bump_field(grid, c, width * grid.side_length, 2 * width * grid.side_length)
            best = max(best, ratio(f))
    for _ in range(samples):
        decay = rng.uniform(1.0, 3.0)
        f = random_smooth_field(grid, rng, decay=decay)
        best = max(best, ratio(f))
    return best
