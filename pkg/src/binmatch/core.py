"""Shared geometry, grids, and small complex linear-algebra kernels.

Array conventions used throughout the package (complex128 unless noted):

* steering sets   ``A``: (num_bins, num_mics, num_dirs)
* HRTF sets:      per ear (num_dirs, num_bins)
* binaural filter ``c``: (num_bins, 2, num_mics), applied as ``p = c @ x``
* covariances     ``R``: (num_bins, num_mics, num_mics), Hermitian
* STFT data       ``X``: (num_frames, num_bins, num_mics)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

SPEED_OF_SOUND = 343.0

# Angular equality tolerance for Direction comparisons (radians).
ANGLE_TOL = 1e-9

# Condition-number ceiling beyond which solves refuse to return garbage.
COND_LIMIT = 1e14

TWO_PI = 2.0 * math.pi


class NonHermitianError(ValueError):
    """Matrix fails the Hermitian symmetry check."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Linear system is singular or too ill-conditioned to solve reliably."""


class GridMismatchError(ValueError):
    """Two objects disagree about the direction grid they live on."""


@dataclass(frozen=True)
class Direction:
    """A look direction: azimuth in [0, 2*pi), elevation in [-pi/2, pi/2].

    Azimuth is measured counterclockwise from +x (front), so +y is to the
    left; elevation is positive upward.
    """

    azimuth: float
    elevation: float = 0.0

    def __post_init__(self):
        az = float(self.azimuth) % TWO_PI
        el = float(self.elevation)
        if not -math.pi / 2 - ANGLE_TOL <= el <= math.pi / 2 + ANGLE_TOL:
            raise ValueError(f"elevation {el} outside [-pi/2, pi/2]")
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", min(max(el, -math.pi / 2), math.pi / 2))

    @classmethod
    def from_degrees(cls, azimuth_deg, elevation_deg=0.0):
        return cls(math.radians(azimuth_deg), math.radians(elevation_deg))

    @property
    def azimuth_deg(self):
        return math.degrees(self.azimuth)

    @property
    def elevation_deg(self):
        return math.degrees(self.elevation)

    def unit_vector(self):
        """Unit vector pointing from the array toward the source."""
        ce = math.cos(self.elevation)
        return np.array([
            ce * math.cos(self.azimuth),
            ce * math.sin(self.azimuth),
            math.sin(self.elevation),
        ])

    def isclose(self, other, tol=ANGLE_TOL):
        """Equality up to ``tol`` radians on the unit sphere."""
        d = float(np.linalg.norm(self.unit_vector() - other.unit_vector()))
        return d <= tol


def wrap_angle(angle):
    """Wrap an angle (radians) into [-pi, pi)."""
    return (angle + math.pi) % TWO_PI - math.pi


def angular_distance_deg(a_deg, b_deg):
    """Circular azimuth distance in degrees, result in [0, 180]."""
    return np.abs((np.asarray(a_deg) - np.asarray(b_deg) + 180.0) % 360.0 - 180.0)


class DirectionGrid:
    """Ordered set of candidate directions; ordering is stable across runs."""

    def __init__(self, directions):
        dirs = tuple(directions)
        if len(dirs) < 1:
            raise ValueError("grid needs at least one direction")
        units = np.array([d.unit_vector() for d in dirs])
        for i in range(len(dirs)):
            d = np.linalg.norm(units[i + 1:] - units[i], axis=1)
            if d.size and d.min() <= ANGLE_TOL:
                j = i + 1 + int(np.argmin(d))
                raise ValueError(f"duplicate directions at indices {i} and {j}")
        self.directions = dirs
        self._units = units

    @classmethod
    def azimuth_ring(cls, count, elevation=0.0, start=0.0):
        """Uniform azimuth ring of ``count`` directions at one elevation."""
        step = TWO_PI / count
        return cls(Direction(start + q * step, elevation) for q in range(count))

    def __len__(self):
        return len(self.directions)

    def __iter__(self):
        return iter(self.directions)

    def __getitem__(self, q):
        return self.directions[q]

    @property
    def unit_vectors(self):
        """(Q, 3) unit vectors toward each direction."""
        return self._units

    @property
    def azimuths_deg(self):
        return np.array([d.azimuth_deg for d in self.directions])

    def index_of(self, direction, tol=ANGLE_TOL):
        """Index of a grid direction matching ``direction`` within ``tol``."""
        d = np.linalg.norm(self._units - direction.unit_vector(), axis=1)
        q = int(np.argmin(d))
        if d[q] > tol:
            raise ValueError(
                f"direction az={direction.azimuth_deg:.3f} deg not on grid "
                f"(closest is {d[q]:.2e} away)")
        return q

    def index_nearest(self, direction):
        d = np.linalg.norm(self._units - direction.unit_vector(), axis=1)
        return int(np.argmin(d))


@dataclass(frozen=True, eq=False)
class FreqGrid:
    """One-sided frequency grid: bin k sits at k * sample_rate / fft_size."""

    sample_rate: float
    fft_size: int
    bins: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.fft_size < 2 or self.fft_size % 2:
            raise ValueError("fft_size must be even and >= 2")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        bins = np.arange(self.fft_size // 2 + 1) * (self.sample_rate / self.fft_size)
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @property
    def num_bins(self):
        return self.fft_size // 2 + 1

    def band_mask(self, lo_hz, hi_hz):
        """Boolean mask selecting bins with lo_hz <= f <= hi_hz."""
        return (self.bins >= lo_hz) & (self.bins <= hi_hz)


def _as_complex_matrix(m, name):
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def solve_regularized(m, rhs, eps):
    """Solve (eps*I + M) x = rhs for Hermitian M.

    Raises NonHermitianError when M is not symmetric to 1e-10 relative, and
    SingularMatrixError when eps == 0 and the system is numerically singular.
    """
    m = _as_complex_matrix(m, "M")
    rhs = _as_complex_matrix(rhs, "rhs")
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"M must be square, got {m.shape}")
    if m.shape[0] != rhs.shape[0]:
        raise ValueError(f"rhs rows {rhs.shape[0]} != M size {m.shape[0]}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    scale = np.linalg.norm(m)
    asym = np.linalg.norm(m - m.conj().T)
    if asym > 1e-10 * max(scale, 1e-300):
        raise NonHermitianError(f"asymmetry {asym:.3e} exceeds 1e-10 relative")
    a = m + eps * np.eye(m.shape[0])
    if eps == 0.0 and (scale == 0.0 or np.linalg.cond(a) > COND_LIMIT):
        raise SingularMatrixError("condition estimate exceeds 1e14 with eps=0")
    x = scipy.linalg.solve(a, rhs, assume_a="her")
    resid = np.linalg.norm(a @ x - rhs)
    if not np.all(np.isfinite(x)) or resid > 1e-8 * max(
            np.linalg.norm(rhs), 1e-300):
        raise SingularMatrixError("solve failed residual check")
    return x


def hermitian_solve_general(m, rhs):
    """Solve M x = rhs for a general square M; error out when near-singular."""
    m = _as_complex_matrix(m, "M")
    rhs = _as_complex_matrix(rhs, "rhs")
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"M must be square, got {m.shape}")
    if m.shape[0] != rhs.shape[0]:
        raise ValueError(f"rhs rows {rhs.shape[0]} != M size {m.shape[0]}")
    if np.linalg.norm(m) == 0.0 or np.linalg.cond(m) > COND_LIMIT:
        raise SingularMatrixError("condition estimate exceeds 1e14")
    x = np.linalg.solve(m, rhs)
    resid = np.linalg.norm(m @ x - rhs)
    if resid > 1e-9 * max(np.linalg.norm(rhs), 1e-300):
        raise SingularMatrixError("solve failed residual check")
    return x
