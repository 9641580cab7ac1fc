"""Per-frequency binaural filter designs and the statistics feeding them.

Filter arrays are (num_bins, 2, num_mics) and are applied as ``p = c @ x``.
Every design is a per-bin closed form; bins are independent, so everything
here is batched over the frequency axis.

Designs:

* ``design_bsm``       -- regularized least squares against the ear
  responses under a diffuse (all-directions) source model, with an optional
  magnitude-only refinement above a cutoff frequency.
* ``design_compass``   -- distortionless extraction of detected direct
  directions rendered through their ear responses, plus the diffuse design
  applied to the residual, collapsed into one filter.
* ``design_dbsm``      -- signal-dependent design driven by an estimated
  source covariance (direct block plus diffuse floor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GridMismatchError, SingularMatrixError

DEFAULT_EPS_SCALE = 1e-4
DEFAULT_COV_LOADING = 1e-6
GRAM_COND_LIMIT = 1e12


class RankDeficientError(ValueError):
    """Constraint directions are too close to separate."""


# ---------------------------------------------------------------------------
# covariance estimation


class CovarianceTracker:
    """Recursive per-bin spatial covariance: R[t] = b*R[t-1] + (1-b)*x x^H.

    Initialized from the first frame plus a small identity term. beta = 1
    freezes the estimate at its initialization.
    """

    def __init__(self, beta):
        if not 0.0 < beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {beta}")
        self.beta = beta
        self.r_x = None
        self.frames_seen = 0

    def update(self, frame):
        """Fold in one (num_bins, num_mics) frame; returns the live estimate."""
        x = np.asarray(frame)
        outer = x[:, :, None] * x[:, None, :].conj()
        if self.r_x is None:
            self.r_x = outer + 1e-8 * np.eye(x.shape[1])[None, :, :]
        else:
            self.r_x *= self.beta
            self.r_x += (1.0 - self.beta) * outer
        self.frames_seen += 1
        return self.r_x


def estimate_covariance(frames, beta):
    """Run a CovarianceTracker over (T, F, M) frames; yields per-step R."""
    tracker = CovarianceTracker(beta)
    for x in frames:
        yield tracker.update(x)


# ---------------------------------------------------------------------------
# shared least-squares kernel


def _check_grids(steering, hrtf):
    if len(steering.grid) != len(hrtf.grid):
        raise GridMismatchError(
            f"steering grid has {len(steering.grid)} directions, "
            f"ear responses have {len(hrtf.grid)}")
    for q, (a, b) in enumerate(zip(steering.grid, hrtf.grid)):
        if not a.isclose(b, tol=1e-9):
            raise GridMismatchError(f"grids disagree at index {q}")


def _bin_eps(gram, eps, num_mics):
    """Per-bin regularizer: eps or DEFAULT_EPS_SCALE * trace(G)/M."""
    if eps is not None:
        return np.full(gram.shape[0], float(eps))
    tr = np.einsum("fmm->f", gram).real
    return DEFAULT_EPS_SCALE * tr / num_mics


def _weighted_ls_design(a, h2, weights, eps):
    """c = H^T W A^H (A W A^H + eps I)^(-1), batched over bins.

    a: (F, M, Q); h2: (F, Q, 2); weights: per-direction nonnegative reals
    ((Q,) or (F, Q)) or None for unweighted.
    """
    f_bins, num_mics, _ = a.shape
    if weights is None:
        aw, hw = a, h2
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim == 1:
            w = w[None, :]
        aw = a * w[:, None, :]
        hw = h2 * w[:, :, None]
    gram = np.einsum("fmq,fnq->fmn", aw, a.conj())
    target = np.einsum("fqe,fmq->fem", hw, a.conj())
    eps_f = _bin_eps(gram, eps, num_mics)
    lhs = gram.conj()
    lhs[:, np.arange(num_mics), np.arange(num_mics)] += eps_f[:, None]
    try:
        sol = np.linalg.solve(lhs, target.transpose(0, 2, 1))
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from None
    c = sol.transpose(0, 2, 1)
    if not np.all(np.isfinite(c)):
        raise SingularMatrixError("design produced non-finite filter")
    return c


def design_bsm(steering, hrtf, eps=None, magls_cutoff_hz=2000.0):
    """Signal-independent binaural matching filter, (num_bins, 2, M).

    Complex least squares below magls_cutoff_hz; magnitude-only refinement
    with phase continuation above it (None disables the refinement).
    """
    _check_grids(steering, hrtf)
    h2 = hrtf.per_bin()
    c = _weighted_ls_design(steering.a, h2, None, eps)
    if magls_cutoff_hz is not None:
        bins = steering.freqs.bins
        if magls_cutoff_hz < bins[-1]:
            start = int(np.searchsorted(bins, magls_cutoff_hz))
            c = magls_refine(c, steering, hrtf, start, eps=eps)
    return c


def magls_refine(c_init, steering, hrtf, start_bin, eps=None):
    """Magnitude-only refinement of bins start_bin..end, ascending.

    For each bin the target keeps |H| but takes its phase from the previous
    bin's filter applied to the current steering matrix. A refined bin is
    kept only when its magnitude error does not exceed the initial
    (complex-LS) filter's, so the refinement never loses magnitude accuracy.
    """
    a, h2 = steering.a, hrtf.per_bin()
    f_bins, num_mics, _ = a.shape
    if not 0 < start_bin <= f_bins:
        raise ValueError(f"start_bin {start_bin} out of range 1..{f_bins}")
    c = c_init.copy()
    mag = np.abs(h2)

    def mag_err(cf, k):
        return np.linalg.norm(np.abs(np.einsum("em,mq->eq", cf, a[k])) - mag[k].T)

    for k in range(start_bin, f_bins):
        phase = np.angle(np.einsum("em,mq->eq", c[k - 1], a[k]))
        target = (mag[k].T * np.exp(1j * phase)).T[None, :, :]
        cand = _weighted_ls_design(a[k][None], target, None, eps)[0]
        if mag_err(cand, k) <= mag_err(c[k], k):
            c[k] = cand
    return c


# ---------------------------------------------------------------------------
# distortionless extraction and the parametric design


def lcmv_direct(a_d, r_x, loading=DEFAULT_COV_LOADING):
    """Distortionless extractor rows W = (A^H R^-1 A)^-1 A^H R^-1.

    a_d: (F, M, K) steering columns of the direct directions; r_x: (F, M, M).
    Diagonal loading (loading * trace/M) keeps the inversion sane. Bins
    whose K x K constraint Gram is numerically singular get a small Gram
    loading instead of exact constraints (spatially degenerate bins, e.g.
    DC); if more than a quarter of bins need that, the directions are
    declared too close and RankDeficientError is raised.
    """
    a_d = np.asarray(a_d)
    r_x = np.asarray(r_x)
    f_bins, num_mics, k = a_d.shape
    tr = np.einsum("fmm->f", r_x).real
    r = r_x + (loading * tr / num_mics)[:, None, None] * np.eye(num_mics)
    try:
        ri_a = np.linalg.solve(r, a_d)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from None
    gram = np.einsum("fmk,fml->fkl", a_d.conj(), ri_a)
    bad = np.linalg.cond(gram) > GRAM_COND_LIMIT
    if np.count_nonzero(bad) > max(1, f_bins // 4):
        raise RankDeficientError(
            f"{np.count_nonzero(bad)}/{f_bins} bins have rank-deficient "
            f"constraints; directions too close")
    if np.any(bad):
        gtr = np.einsum("fkk->f", gram).real
        gram[bad] += (1e-9 * np.maximum(gtr[bad], 1e-30) / k)[:, None, None] \
            * np.eye(k)
    w = np.linalg.solve(gram, ri_a.conj().transpose(0, 2, 1))
    return w


def design_compass(a_d, h_d, w_d, c_bsm):
    """Single-stage filter: c_bsm (I - A_d W_d) + H_d^T W_d.

    Equivalent to extracting the direct signals distortionlessly, rendering
    them through their ear responses, and rendering the beamformed-away
    residual through the diffuse design.
    """
    if a_d.shape[2] == 0:
        return c_bsm.copy()
    proj = a_d @ w_d  # (F, M, M)
    resid = np.eye(a_d.shape[1])[None] - proj
    return c_bsm @ resid + h_d.transpose(0, 2, 1) @ w_d


# ---------------------------------------------------------------------------
# steered response power DOA


@dataclass
class DoaResult:
    indices: list
    directions: list
    confident: list

    def __iter__(self):
        return iter(self.directions)


def srp_spectrum(r_x, steering, band_mask=None):
    """Normalized steered response power per grid direction, (Q,) real."""
    a = steering.a if band_mask is None else steering.a[band_mask]
    r = r_x if band_mask is None else r_x[band_mask]
    num = np.einsum("fmq,fmn,fnq->q", a.conj(), r, a).real
    # same normalization per direction: unit-modulus steering, M per bin
    den = np.einsum("fmq,fmq->q", a.conj(), a).real
    return num / np.maximum(den, 1e-30)


def estimate_doa(r_x, steering, num_sources, band_mask=None, min_separation=2):
    """Top local maxima of the steered response over the grid.

    Peaks are circular local maxima separated by at least min_separation
    grid steps. When fewer qualified peaks exist than requested (e.g. an
    isotropic field), remaining picks fall back to power order with ties
    broken toward the lowest grid index and are flagged not confident.
    """
    if num_sources < 1:
        raise ValueError("num_sources must be >= 1")
    p = srp_spectrum(r_x, steering, band_mask)
    q = p.size
    spread = p.max() - p.min()
    is_peak = (p > np.roll(p, 1)) & (p >= np.roll(p, -1)) & (spread > 1e-12 * abs(p.max()))
    order = np.argsort(-p, kind="stable")
    chosen, flags = [], []
    for stage in (True, False):
        for idx in order:
            if len(chosen) >= num_sources:
                break
            if bool(is_peak[idx]) != stage:
                continue
            sep = [min(abs(idx - j), q - abs(idx - j)) for j in chosen]
            if sep and min(sep) < min_separation:
                continue
            chosen.append(int(idx))
            flags.append(stage)
    return DoaResult(indices=chosen,
                     directions=[steering.grid[i] for i in chosen],
                     confident=flags)


# ---------------------------------------------------------------------------
# source covariance for the signal-dependent design


@dataclass
class SourceCovEstimate:
    """Direct-source covariance block plus a diffuse floor.

    direct: (num_bins, K, K); sigma_r2: (num_bins,) diffuse power per grid
    direction, estimated from the beamforming residual.
    """

    direct: np.ndarray
    sigma_r2: np.ndarray

    def __post_init__(self):
        if np.any(self.sigma_r2 < 0):
            raise ValueError("sigma_r2 must be nonnegative")

    def assemble(self, direct_indices, num_dirs):
        """Full (num_bins, Q, Q) source covariance, direct block in place."""
        f_bins, k, _ = self.direct.shape
        r_s = np.zeros((f_bins, num_dirs, num_dirs), dtype=np.complex128)
        r_s[:, np.arange(num_dirs), np.arange(num_dirs)] = self.sigma_r2[:, None]
        idx = np.asarray(direct_indices)
        r_s[:, idx[:, None], idx[None, :]] += self.direct
        return r_s


def build_source_cov(s_d_frames, residual_frames, beta=0.9):
    """Recursive average of direct-signal outer products and residual power.

    s_d_frames: (T, F, K) extracted direct signals; residual_frames:
    (T, F, M). The diffuse floor is the running mean over frames of
    (mean per-mic residual power) / M.
    """
    s = np.asarray(s_d_frames)
    r = np.asarray(residual_frames)
    if s.shape[0] != r.shape[0]:
        raise ValueError("frame counts differ")
    t_frames, f_bins, _ = s.shape
    num_mics = r.shape[2]
    direct = s[0][:, :, None] * s[0][:, None, :].conj()
    floor = np.mean(np.abs(r[0]) ** 2, axis=1) / num_mics
    for t in range(1, t_frames):
        outer = s[t][:, :, None] * s[t][:, None, :].conj()
        direct = beta * direct + (1.0 - beta) * outer
        inst = np.mean(np.abs(r[t]) ** 2, axis=1) / num_mics
        floor = beta * floor + (1.0 - beta) * inst
    return SourceCovEstimate(direct=direct, sigma_r2=floor)


# ---------------------------------------------------------------------------
# signal-dependent design


def design_dbsm(steering, hrtf, r_s, r_n, check_grids=True):
    """c = H^T R_s A^H (A R_s A^H + R_n)^(-1), batched over bins.

    r_s: full (F, Q, Q) source covariance, or its diagonal as (F, Q) /(Q,).
    r_n: noise covariance, (F, M, M), or per-bin scalars (F,) meaning
    sigma^2 I, or a scalar.
    """
    if check_grids:
        _check_grids(steering, hrtf)
    a = steering.a
    f_bins, num_mics, num_dirs = a.shape
    h2 = hrtf.per_bin()

    r_s = np.asarray(r_s)
    if r_s.ndim == 1:
        r_s = np.broadcast_to(r_s, (f_bins, num_dirs))
    if r_s.ndim == 2:
        aw = a * r_s[:, None, :]
        gram = np.einsum("fmq,fnq->fmn", aw, a.conj())
        target = np.einsum("fqe,fmq->fem", h2 * r_s[:, :, None], a.conj())
    else:
        ars = a @ r_s
        gram = np.einsum("fmq,fnq->fmn", ars, a.conj())
        target = np.einsum("fqe,fqp,fmp->fem", h2, r_s, a.conj())

    r_n = np.asarray(r_n, dtype=np.complex128)
    if r_n.ndim == 0:
        r_n = np.broadcast_to(r_n, (f_bins,))
    if r_n.ndim == 1:
        lhs = gram.conj()
        lhs[:, np.arange(num_mics), np.arange(num_mics)] += r_n.real[:, None]
    else:
        lhs = (gram + r_n).conj()
    try:
        sol = np.linalg.solve(lhs, target.transpose(0, 2, 1))
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from None
    c = sol.transpose(0, 2, 1)
    if not np.all(np.isfinite(c)):
        raise SingularMatrixError("design produced non-finite filter")
    return c
