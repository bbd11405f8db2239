"""Flat periodic lattice model: grids, scalar fields, quadrature and norms.

The computational manifold is the flat n-torus [0, L)^n sampled on a uniform
lattice with an identical number of points per axis.  All integrals are plain
lattice sums times spacing^n, which is spectrally accurate for smooth periodic
integrands.  Fields are stored as C-ordered (row-major) float64 arrays.

The critical Lebesgue exponent 2n/(n-2) plays a special role throughout: the
variational normalization keeps fields on the unit sphere of that norm, and
the conformal volume element is u^(2n/(n-2)) times the flat one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SUPPORTED_DIMENSIONS = (3, 4, 5)

SNAPSHOT_MAGIC = b"CSCF"
SNAPSHOT_VERSION = 1


class TorusError(ValueError):
    """Invalid grid, field, or argument in the lattice layer."""


@dataclass(frozen=True)
class CriticalExponents:
    """The exponents attached to dimension n: p = (n+2)/(n-2), 2* = 2n/(n-2),
    and the conformal constant c_n = 4(n-1)/(n-2)."""

    n: int
    p: float
    two_star: float
    c_n: float

    @classmethod
    def for_dimension(cls, n: int) -> "CriticalExponents":
        if n not in SUPPORTED_DIMENSIONS:
            raise TorusError(f"dimension {n} not supported (need n in {SUPPORTED_DIMENSIONS})")
        return cls(n=n, p=(n + 2) / (n - 2), two_star=2 * n / (n - 2), c_n=4 * (n - 1) / (n - 2))


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic lattice on the flat n-torus of period ``side_length``."""

    n: int
    points_per_axis: int
    side_length: float = 1.0

    def __post_init__(self):
        if self.n not in SUPPORTED_DIMENSIONS:
            raise TorusError(f"dimension {self.n} not supported (need n in {SUPPORTED_DIMENSIONS})")
        if self.points_per_axis < 8:
            raise TorusError("points_per_axis must be >= 8")
        if not (self.side_length > 0):
            raise TorusError("side_length must be positive")

    @property
    def spacing(self) -> float:
        return self.side_length / self.points_per_axis

    @property
    def shape(self) -> tuple:
        return (self.points_per_axis,) * self.n

    @property
    def total_points(self) -> int:
        return self.points_per_axis ** self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.n

    @property
    def volume(self) -> float:
        return self.side_length ** self.n

    @property
    def exponents(self) -> CriticalExponents:
        return CriticalExponents.for_dimension(self.n)

    def axis_coordinates(self) -> np.ndarray:
        """Lattice coordinates along one axis: 0, h, 2h, ..., L-h."""
        return np.arange(self.points_per_axis) * self.spacing


@lru_cache(maxsize=64)
def _axis_distance_cache(points: int, side: float, center_coord: float) -> np.ndarray:
    x = np.arange(points) * (side / points)
    d = np.abs(x - center_coord)
    return np.minimum(d, side - d)


def torus_distance(grid: GridSpec, center) -> np.ndarray:
    """Geodesic (shortest-image) distance from ``center`` on the lattice."""
    center = np.asarray(center, dtype=float)
    if center.shape != (grid.n,):
        raise TorusError(f"center must have {grid.n} coordinates")
    d2 = np.zeros(grid.shape)
    for ax in range(grid.n):
        da = _axis_distance_cache(grid.points_per_axis, grid.side_length, float(center[ax] % grid.side_length))
        shape = [1] * grid.n
        shape[ax] = grid.points_per_axis
        d2 = d2 + (da.reshape(shape)) ** 2
    return np.sqrt(d2)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A real field sampled on the lattice.  Treated as an immutable value:
    operations return fresh fields and never mutate ``values`` in place."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            if v.size == self.grid.total_points:
                v = v.reshape(self.grid.shape)
            else:
                raise TorusError(f"values shape {v.shape} does not match grid shape {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise TorusError("non-finite field")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        """Sample ``fn(x_1, ..., x_n)`` on the coordinate mesh."""
        axes = np.meshgrid(*[grid.axis_coordinates()] * grid.n, indexing="ij")
        return cls(grid, np.asarray(fn(*axes), dtype=float))

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    # minimal arithmetic; everything returns a fresh field
    def _coerce(self, other):
        if isinstance(other, ScalarField):
            if other.grid != self.grid:
                raise TorusError("grid mismatch")
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(self.grid, self.values / self._coerce(other))

    def __pow__(self, exponent):
        return ScalarField(self.grid, self.values ** exponent)

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


def integrate(f: ScalarField) -> float:
    """Lattice quadrature of f over the torus: spacing^n times the sum."""
    return float(f.values.sum()) * f.grid.cell_volume


def lp_norm(f: ScalarField, p: float) -> float:
    """(integral of |f|^p)^(1/p) by lattice quadrature; requires p >= 1."""
    if p < 1:
        raise TorusError("lp_norm requires p >= 1")
    return float((np.abs(f.values) ** p).sum() * f.grid.cell_volume) ** (1.0 / p)


def critical_norm(f: ScalarField) -> float:
    return lp_norm(f, f.grid.exponents.two_star)


def normalize_critical(u: ScalarField) -> ScalarField:
    """Rescale u to unit critical norm ||u||_{L^{2n/(n-2)}} = 1."""
    norm = critical_norm(u)
    if norm <= 0.0:
        raise TorusError("cannot normalize zero field")
    return ScalarField(u.grid, u.values / norm)


def smooth_indicator(s: np.ndarray) -> np.ndarray:
    """Ramp equal to 1 for s <= 0 and 0 for s >= 1, with the bump profile
    exp(1 - 1/(1 - s^2)) on the transition.  Smooth at lattice resolution."""
    s = np.asarray(s, dtype=float)
    out = np.ones_like(s)
    out[s >= 1.0] = 0.0
    mid = (s > 0.0) & (s < 1.0)
    sm = s[mid]
    out[mid] = np.exp(1.0 - 1.0 / (1.0 - sm ** 2))
    return out


def bump_field(grid: GridSpec, center, inner_radius: float, outer_radius: float) -> ScalarField:
    """Smooth cutoff: 1 inside ``inner_radius`` of center, 0 beyond ``outer_radius``."""
    if not (0 < inner_radius < outer_radius):
        raise TorusError("need 0 < inner_radius < outer_radius")
    d = torus_distance(grid, center)
    s = (d - inner_radius) / (outer_radius - inner_radius)
    return ScalarField(grid, smooth_indicator(s))


# --- field snapshot binary format ------------------------------------------
#
# Layout (little-endian): magic "CSCF", u32 version = 1, u8 n,
# u64 points_per_axis, f64 side_length, then points_per_axis^n f64 values
# in row-major order.

_HEADER = struct.Struct("<4sIBQd")


def write_snapshot(path, f: ScalarField) -> None:
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, g.n, g.points_per_axis, g.side_length))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_snapshot(path) -> ScalarField:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise TorusError("truncated snapshot header")
        magic, version, n, points, side = _HEADER.unpack(header)
        if magic != SNAPSHOT_MAGIC:
            raise TorusError("not a CSCF snapshot")
        if version != SNAPSHOT_VERSION:
            raise TorusError(f"unsupported snapshot version {version}")
        grid = GridSpec(n=n, points_per_axis=points, side_length=side)
        raw = fh.read(8 * grid.total_points)
        if len(raw) != 8 * grid.total_points:
            raise TorusError("truncated snapshot payload")
        values = np.frombuffer(raw, dtype="<f8").astype(float).reshape(grid.shape)
    return ScalarField(grid, values)
