"""Ear transfer functions on a direction grid.

Two sources: an analytic rigid-sphere head model (diffraction series for a
point receiver on the sphere surface), and a CSV grid-file loader. Left and
right responses are stored as (num_dirs, num_bins) complex arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import spherical_jn, spherical_yn

from .core import (SPEED_OF_SOUND, Direction, DirectionGrid, FreqGrid,
                   GridMismatchError)

# Below this frequency the sphere model degenerates to a transparent head:
# unit magnitude and plane-wave phase at the ear position.
LOW_FREQ_CROSSOVER_HZ = 50.0

MAX_SERIES_TERMS = 100
SERIES_RELATIVE_TOL = 1e-6

GRID_CSV_HEADER = "az_deg,el_deg,freq_hz,re_left,im_left,re_right,im_right"


class SeriesNotConvergedError(RuntimeError):
    """Sphere diffraction series still contributing at the term cap."""


class HrtfParseError(ValueError):
    """Grid file is malformed; message carries the offending line."""


@dataclass(frozen=True)
class SphereHeadParams:
    radius: float = 0.0875
    ear_azimuth: float = math.radians(100.0)
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def ear_units(self):
        """Unit vectors toward (left, right) ear positions on the sphere."""
        left = np.array([math.cos(self.ear_azimuth), math.sin(self.ear_azimuth), 0.0])
        right = np.array([math.cos(self.ear_azimuth), -math.sin(self.ear_azimuth), 0.0])
        return left, right


@dataclass
class HrtfSet:
    """Left/right transfer functions over a direction grid and freq grid."""

    grid: DirectionGrid
    freqs: FreqGrid
    h_left: np.ndarray
    h_right: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        q, f = len(self.grid), self.freqs.num_bins
        for name, h in (("h_left", self.h_left), ("h_right", self.h_right)):
            if h.shape != (q, f):
                raise ValueError(f"{name} shape {h.shape} != ({q}, {f})")
            if not np.all(np.isfinite(h)):
                raise ValueError(f"{name} has non-finite entries")
        if self.freqs.bins[0] == 0.0:
            scale = max(np.abs(self.h_left).max(), np.abs(self.h_right).max(), 1e-300)
            worst = max(np.abs(self.h_left[:, 0].imag).max(),
                        np.abs(self.h_right[:, 0].imag).max())
            if worst > 1e-9 * scale:
                raise ValueError("transfer functions must be real at f=0")

    def per_bin(self):
        """(num_bins, Q, 2) view used by the filter designs."""
        return np.stack([self.h_left.T, self.h_right.T], axis=2)

    def select(self, indices):
        """(num_bins, K, 2) responses for a subset of grid directions."""
        idx = np.atleast_1d(indices)
        return np.stack([self.h_left[idx].T, self.h_right[idx].T], axis=2)


def _sphere_surface_response(mu, cos_theta):
    """Diffraction series for a plane wave hitting a rigid sphere.

    mu: (F,) positive values of (2*pi*f*a/c); cos_theta: (Q,) cosines of the
    angle between arrival direction and receiver position. Returns (Q, F).
    Uses the spherical Hankel function of the second kind, which matches the
    package-wide exp(-j*2*pi*f*tau) delay convention (closer ear leads).
    """
    mu = np.asarray(mu, dtype=np.float64)
    cos_theta = np.asarray(cos_theta, dtype=np.float64)
    total = np.zeros((cos_theta.size, mu.size), dtype=np.complex128)
    p_prev = np.zeros_like(cos_theta)  # P_{m-1}
    p_curr = np.ones_like(cos_theta)   # P_0
    quiet_streak = 0
    for m in range(MAX_SERIES_TERMS + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            hp = spherical_jn(m, mu, derivative=True) \
                - 1j * spherical_yn(m, mu, derivative=True)
            inv = np.where(np.isfinite(hp) & (np.abs(hp) > 0), 1.0 / hp, 0.0)
        term = ((2 * m + 1) * 1j ** (m - 1)) * p_curr[:, None] * inv[None, :]
        total += term
        scale = max(float(np.abs(total).max()), 1e-300)
        if float(np.abs(term).max()) < SERIES_RELATIVE_TOL * scale:
            quiet_streak += 1
            if quiet_streak >= 3:
                break
        else:
            quiet_streak = 0
        # Legendre recurrence: (m+1) P_{m+1} = (2m+1) x P_m - m P_{m-1}
        p_prev, p_curr = p_curr, ((2 * m + 1) * cos_theta * p_curr - m * p_prev) / (m + 1)
    else:
        raise SeriesNotConvergedError(
            f"series not converged after {MAX_SERIES_TERMS} terms "
            f"(max mu = {mu.max():.2f})")
    return total / mu[None, :] ** 2


def build_sphere_hrtf_set(params, grid, freqs):
    """Evaluate the rigid-sphere model on a full grid. Returns an HrtfSet."""
    left_u, right_u = params.ear_units()
    units = grid.unit_vectors
    f = freqs.bins
    lo = f < LOW_FREQ_CROSSOVER_HZ
    h = np.empty((2, len(grid), freqs.num_bins), dtype=np.complex128)
    for e, ear_u in enumerate((left_u, right_u)):
        cos_theta = units @ ear_u
        # plane-wave limit below the crossover (transparent head)
        tau = -(cos_theta * params.radius) / params.speed_of_sound
        h[e][:, lo] = np.exp(-2j * np.pi * tau[:, None] * f[lo][None, :])
        if np.any(~lo):
            mu = 2 * np.pi * f[~lo] * params.radius / params.speed_of_sound
            h[e][:, ~lo] = _sphere_surface_response(mu, cos_theta)
    return HrtfSet(grid=grid, freqs=freqs, h_left=h[0], h_right=h[1],
                   metadata={"source": "sphere", "radius": params.radius})


def sphere_hrtf(params, direction, freqs):
    """(left, right) per-bin response for a single direction."""
    hs = build_sphere_hrtf_set(params, DirectionGrid([direction]), freqs)
    return hs.h_left[0], hs.h_right[0]


def itd_of(hrtf_set, direction, band_hz=(200.0, 1500.0)):
    """Interaural time difference in seconds, positive when left leads.

    Mean over the band of the unwrapped interaural phase divided by 2*pi*f.
    """
    q = hrtf_set.grid.index_of(direction)
    f = hrtf_set.freqs.bins
    phi = np.angle(hrtf_set.h_left[q]) - np.angle(hrtf_set.h_right[q])
    nz = f > 0
    phi_u = np.unwrap(phi[nz])
    fb = f[nz]
    band = (fb >= band_hz[0]) & (fb <= band_hz[1])
    return float(np.mean(phi_u[band] / (2 * np.pi * fb[band])))


def save_hrtf_grid(hrtf_set, path):
    """Write the documented CSV grid format (one row per direction per bin)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# binaural transfer-function grid\n")
        fh.write(GRID_CSV_HEADER + "\n")
        for q, d in enumerate(hrtf_set.grid):
            for k, f in enumerate(hrtf_set.freqs.bins):
                hl = hrtf_set.h_left[q, k]
                hr = hrtf_set.h_right[q, k]
                fh.write(f"{d.azimuth_deg:.17g},{d.elevation_deg:.17g},{f:.17g},"
                         f"{hl.real:.17g},{hl.imag:.17g},"
                         f"{hr.real:.17g},{hr.imag:.17g}\n")


def _parse_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.lower().replace(" ", "") == GRID_CSV_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise HrtfParseError(
                    f"{path}:{lineno}: expected 7 comma-separated fields, "
                    f"got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise HrtfParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise HrtfParseError(f"{path}: no data rows")
    return np.array(rows)


def load_hrtf_grid(path, freqs, grid=None):
    """Load a grid CSV onto the target FreqGrid.

    Rows may appear in any order. When ``grid`` is given the file must cover
    (a superset of) its directions; responses are reordered to match. File
    frequencies are linearly interpolated onto ``freqs``; bins beyond the
    file's top frequency hold its last value and are flagged in metadata.
    """
    data = _parse_rows(path)
    keys = np.round(data[:, 0] * 1e6).astype(np.int64) * 10_000_000_000 \
        + np.round((data[:, 1] + 90.0) * 1e6).astype(np.int64)
    uniq, inverse = np.unique(keys, return_inverse=True)
    file_dirs = []
    for u in uniq:
        i = int(np.nonzero(keys == u)[0][0])
        file_dirs.append(Direction.from_degrees(data[i, 0], data[i, 1]))

    if grid is None:
        order = sorted(range(len(file_dirs)),
                       key=lambda i: (file_dirs[i].elevation, file_dirs[i].azimuth))
        grid = DirectionGrid(file_dirs[i] for i in order)
        dir_to_file = order
    else:
        dir_to_file = []
        tol = math.radians(1e-4)
        for d in grid:
            hit = [i for i, fd in enumerate(file_dirs) if fd.isclose(d, tol=tol)]
            if not hit:
                raise GridMismatchError(
                    f"file {path} missing direction az={d.azimuth_deg:.3f} deg, "
                    f"el={d.elevation_deg:.3f} deg")
            dir_to_file.append(hit[0])

    h = np.empty((2, len(grid), freqs.num_bins), dtype=np.complex128)
    file_fmax = None
    for qi, fi in enumerate(dir_to_file):
        sel = data[inverse == fi]
        order = np.argsort(sel[:, 2])
        sel = sel[order]
        fvals = sel[:, 2]
        if np.any(np.diff(fvals) <= 0):
            raise HrtfParseError(
                f"{path}: duplicate frequency rows for direction index {qi}")
        file_fmax = fvals[-1] if file_fmax is None else min(file_fmax, fvals[-1])
        for e, cols in enumerate(((3, 4), (5, 6))):
            re = np.interp(freqs.bins, fvals, sel[:, cols[0]])
            im = np.interp(freqs.bins, fvals, sel[:, cols[1]])
            h[e, qi] = re + 1j * im
    if freqs.bins[0] == 0.0:
        h[:, :, 0] = h[:, :, 0].real
    metadata = {"source": "file", "path": str(path)}
    if freqs.bins[-1] > file_fmax + 1e-9:
        metadata["extrapolated_above_hz"] = float(file_fmax)
    return HrtfSet(grid=grid, freqs=freqs, h_left=h[0], h_right=h[1],
                   metadata=metadata)
