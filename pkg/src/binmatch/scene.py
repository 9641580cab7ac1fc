"""Scene simulation: steering vectors, shoebox reverberation, moving sources.

The room model is the classic image-source method for a rectangular room
with uniform wall reflectivity, rendered with Peterson-style fractional
delay pulses. Source motion is stepwise (one room position per trajectory
step) with a short linear crossfade between per-step renders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .core import SPEED_OF_SOUND, Direction, DirectionGrid, FreqGrid

# fractional-delay pulse: taps and normalized cutoff (fraction of Nyquist)
PULSE_TAPS = 64
PULSE_CUTOFF = 0.9

CROSSFADE_SECONDS = 0.010

WALL_MARGIN = 0.05  # meters; sources/mics must sit inside by this much


class SourceOutsideRoomError(ValueError):
    pass


class TrajectoryExitsRoomError(ValueError):
    pass


class DecayTooShortError(ValueError):
    """Impulse response decays too fast (or too little) to fit a slope."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions (meters) relative to the array reference point.

    Positions are re-centered so the reference point is their centroid.
    """

    mic_positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 2:
            raise ValueError("mic_positions must be (num_mics >= 2, 3)")
        pos = pos - pos.mean(axis=0)
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        off = d + np.eye(pos.shape[0]) * 1.0
        if off.min() < 1e-6:
            raise ValueError("duplicate microphone positions")
        if d.max() >= 1.0:
            raise ValueError(f"aperture {d.max():.3f} m exceeds 1 m")
        pos.setflags(write=False)
        object.__setattr__(self, "mic_positions", pos)

    @classmethod
    def rectangular(cls, width=0.15, depth=0.05):
        """Four mics at the corners of a horizontal width x depth rectangle."""
        w, dpt = width / 2.0, depth / 2.0
        return cls(np.array([
            [+w, +dpt, 0.0],
            [+w, -dpt, 0.0],
            [-w, +dpt, 0.0],
            [-w, -dpt, 0.0],
        ]))

    @property
    def num_mics(self):
        return self.mic_positions.shape[0]


@dataclass
class SteeringSet:
    """Far-field steering columns over a grid: a[f] has shape (M, Q)."""

    grid: DirectionGrid
    freqs: FreqGrid
    a: np.ndarray  # (num_bins, num_mics, num_dirs)

    def __post_init__(self):
        expect = (self.freqs.num_bins, self.a.shape[1], len(self.grid))
        if self.a.shape != expect:
            raise ValueError(f"steering shape {self.a.shape} != {expect}")

    @property
    def num_mics(self):
        return self.a.shape[1]

    def column(self, q):
        """(num_bins, M) steering vector of grid direction q."""
        return self.a[:, :, q]


def steering_vector(geom, direction, freqs, speed_of_sound=SPEED_OF_SOUND):
    """Plane-wave array response, (num_bins, num_mics), unit magnitude.

    Entry m is exp(-j*2*pi*f*tau_m) with tau_m = -(u . r_m)/c relative to
    the array reference point.
    """
    tau = -(geom.mic_positions @ direction.unit_vector()) / speed_of_sound
    return np.exp(-2j * np.pi * freqs.bins[:, None] * tau[None, :])


def build_steering_set(geom, grid, freqs, speed_of_sound=SPEED_OF_SOUND):
    tau = -(geom.mic_positions @ grid.unit_vectors.T) / speed_of_sound  # (M, Q)
    a = np.exp(-2j * np.pi * freqs.bins[:, None, None] * tau[None, :, :])
    return SteeringSet(grid=grid, freqs=freqs, a=a)


@dataclass(frozen=True)
class TrajectoryConfig:
    """Stepwise circular motion around the array center at fixed radius."""

    start_position: tuple
    azimuth_step: float = math.radians(6.0)
    step_duration: float = 0.167
    num_steps: int = 60
    sense: str = "ccw"

    def __post_init__(self):
        if self.step_duration <= 0:
            raise ValueError("step_duration must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.sense not in ("ccw", "cw"):
            raise ValueError(f"sense must be 'ccw' or 'cw', got {self.sense!r}")

    def positions(self, array_center):
        """(num_steps, 3) source positions and their azimuths (radians)."""
        center = np.asarray(array_center, dtype=np.float64)
        rel = np.asarray(self.start_position, dtype=np.float64) - center
        radius = math.hypot(rel[0], rel[1])
        az0 = math.atan2(rel[1], rel[0])
        sign = 1.0 if self.sense == "ccw" else -1.0
        az = az0 + sign * self.azimuth_step * np.arange(self.num_steps)
        pos = np.empty((self.num_steps, 3))
        pos[:, 0] = center[0] + radius * np.cos(az)
        pos[:, 1] = center[1] + radius * np.sin(az)
        pos[:, 2] = self.start_position[2]
        return pos, az


@dataclass(frozen=True)
class SceneConfig:
    room_dims: tuple = (8.0, 8.0, 5.0)
    rt60_target: float = 0.2
    array_center: tuple = (4.0, 4.0, 2.0)
    source_trajectory: TrajectoryConfig = field(
        default_factory=lambda: TrajectoryConfig(start_position=(7.0, 4.0, 2.0)))
    noise_level_db: float = -40.0
    sample_rate: float = 48000.0
    max_image_order: int = 20

    def __post_init__(self):
        if self.rt60_target < 0:
            raise ValueError("rt60_target must be >= 0 (0 = anechoic)")
        room = np.asarray(self.room_dims, dtype=np.float64)
        if room.shape != (3,) or np.any(room <= 0):
            raise ValueError("room_dims must be 3 positive lengths")


@dataclass
class SimulationResult:
    """Microphone signals plus per-sample ground truth.

    direct_reference is the anechoic direct-path signal at the array
    reference point (propagation delay and 1/r gain applied, no noise);
    it serves as the rendering reference and the voiced-activity source.
    """

    signals: np.ndarray            # (num_samples, num_mics)
    azimuth_deg: np.ndarray        # (num_samples,) true source azimuth
    direct_reference: np.ndarray   # (num_samples,)
    sample_rate: float
    step_samples: int
    source_positions: np.ndarray   # (num_steps, 3)

    def frame_azimuth_deg(self, stft_cfg, num_frames):
        """Ground-truth azimuth at each STFT frame center."""
        centers = np.minimum(stft_cfg.frame_center_samples(num_frames),
                             len(self.azimuth_deg) - 1)
        return self.azimuth_deg[centers]

    def frame_source_level_db(self, stft_cfg, num_frames):
        """Direct-path level (dBFS) per STFT frame."""
        out = np.empty(num_frames)
        n = len(self.direct_reference)
        for t in range(num_frames):
            s = t * stft_cfg.hop
            seg = self.direct_reference[s:min(s + stft_cfg.fft_size, n)]
            out[t] = 10.0 * np.log10(np.mean(seg**2) + 1e-30)
        return out


def absorption_for_rt60(room_dims, rt60):
    """Uniform wall (absorption, reflectivity) hitting an RT60 target.

    Eyring's reverberation formula is inverted for the absorption
    coefficient; it stays accurate in the high-absorption regime where
    Sabine's overestimates the decay time. rt60 = 0 means fully absorbing.
    """
    if rt60 == 0.0:
        return 1.0, 0.0
    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    alpha = 1.0 - math.exp(-0.161 * volume / (surface * rt60))
    return alpha, math.sqrt(1.0 - alpha)


def _check_inside(point, room, what, error_cls):
    p = np.asarray(point, dtype=np.float64)
    room = np.asarray(room, dtype=np.float64)
    if np.any(p < WALL_MARGIN) or np.any(p > room - WALL_MARGIN):
        raise error_cls(f"{what} at {p.tolist()} is outside room {room.tolist()}")


def _fractional_pulse_add(rir, delays, gains, fs):
    """Scatter windowed-sinc pulses into a multichannel RIR buffer.

    rir: (L, M); delays, gains: (N, M) per image source and mic.
    """
    length, n_mics = rir.shape
    taps = np.arange(PULSE_TAPS) - PULSE_TAPS // 2 + 1
    fc = PULSE_CUTOFF * fs / 2.0
    tw = PULSE_TAPS / fs
    chunk = max(1, 4_000_000 // (n_mics * PULSE_TAPS))
    flat = rir.reshape(-1)
    for s in range(0, delays.shape[0], chunk):
        d = delays[s:s + chunk]                      # (n, M)
        g = gains[s:s + chunk]
        base = np.floor(d * fs).astype(np.int64)     # (n, M)
        idx = base[:, :, None] + taps[None, None, :]  # (n, M, T)
        u = idx / fs - d[:, :, None]
        pulse = (0.5 * (1.0 + np.cos(2.0 * np.pi * u / tw))
                 * (2.0 * fc / fs) * np.sinc(2.0 * fc * u))
        pulse *= np.abs(u) < tw / 2.0
        vals = (g[:, :, None] * pulse).reshape(-1)
        mic_ix = np.broadcast_to(np.arange(n_mics)[None, :, None], idx.shape)
        inside = (idx >= 0) & (idx < length)
        lin = (idx * n_mics + mic_ix).reshape(-1)
        keep = inside.reshape(-1)
        flat += np.bincount(lin[keep], weights=vals[keep], minlength=flat.size)


def image_source_rir(room_dims, source_pos, mic_positions, fs, reflectivity,
                     max_order, rir_seconds, speed_of_sound=SPEED_OF_SOUND,
                     highpass_hz=50.0):
    """Image-source room impulse response, (num_samples, num_mics).

    Uniform reflectivity per wall bounce; image amplitude beta^n / distance;
    images outside the travel-time budget or above max_order are dropped.
    Reverberant responses are high-passed (2nd-order Butterworth) to remove
    the nonphysical low-frequency buildup of same-sign image pulses; the
    purely direct path (reflectivity 0) is returned unfiltered.
    """
    room = np.asarray(room_dims, dtype=np.float64)
    src = np.asarray(source_pos, dtype=np.float64)
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=np.float64))
    length = int(math.ceil(rir_seconds * fs)) + PULSE_TAPS
    d_max = rir_seconds * speed_of_sound

    ranges = [np.arange(-int(math.ceil(d_max / (2 * room[i]))),
                        int(math.ceil(d_max / (2 * room[i]))) + 1)
              for i in range(3)]
    rx, ry, rz = np.meshgrid(*ranges, indexing="ij")
    cells = np.stack([rx.ravel(), ry.ravel(), rz.ravel()], axis=1)  # (C, 3)

    rir = np.zeros((length, mics.shape[0]))
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                parity = np.array([px, py, pz])
                img = (1 - 2 * parity)[None, :] * src[None, :] \
                    + 2.0 * cells * room[None, :]
                bounce = (np.abs(cells - parity[None, :]).sum(axis=1)
                          + np.abs(cells).sum(axis=1))
                keep = bounce <= max_order
                if reflectivity == 0.0:
                    keep &= bounce == 0
                img, nb = img[keep], bounce[keep]
                dist = np.linalg.norm(img[:, None, :] - mics[None, :, :], axis=2)
                dist = np.maximum(dist, 1e-3)
                near = dist.min(axis=1) <= d_max
                img, nb, dist = img[near], nb[near], dist[near]
                if img.shape[0] == 0:
                    continue
                gains = (reflectivity ** nb)[:, None] / dist
                delays = dist / speed_of_sound
                _fractional_pulse_add(rir, delays, gains, fs)
    if reflectivity > 0.0 and highpass_hz:
        sos = butter(2, highpass_hz, btype="highpass", fs=fs, output="sos")
        rir = sosfilt(sos, rir, axis=0)
    return rir


def calibrate_reflectivity(room_dims, rt60, fs, source_pos, mic_pos,
                           max_order=40):
    """Wall reflectivity whose image-source RIR measures rt60 seconds.

    Seeded with the Eyring inversion, then fit numerically against
    measure_rt60 on the actual generator output (coarse bisection at a
    reduced rate, two secant-style refinements at the target rate). The
    statistical formulas alone overshoot in a uniform-absorption box, where
    low-bounce axial image paths outlive the diffuse-field decay.
    """
    if rt60 == 0.0:
        return 0.0
    _, beta = absorption_for_rt60(room_dims, rt60)
    t_direct = float(np.linalg.norm(np.asarray(source_pos, dtype=np.float64)
                                    - np.asarray(mic_pos, dtype=np.float64))
                     / SPEED_OF_SOUND)
    rir_seconds = 1.4 * rt60 + t_direct + 0.01

    def measured(b, rate):
        rir = image_source_rir(room_dims, source_pos,
                               np.atleast_2d(mic_pos), rate, b,
                               max_order, rir_seconds)
        return measure_rt60(rir[:, 0], rate)

    lo, hi = 0.4 * beta, min(beta * 1.05, 0.999)
    for _ in range(10):
        mid = 0.5 * (lo + hi)
        if measured(mid, 16000.0) < rt60:
            lo = mid
        else:
            hi = mid
    beta = 0.5 * (lo + hi)
    for _ in range(2):
        m = measured(beta, fs)
        if abs(m / rt60 - 1.0) < 0.02:
            break
        # decay rate scales with ln(beta): exponent-correct toward target
        beta = beta ** (m / rt60)
    return beta


def _step_windows(num_samples, step_samples, num_steps, fs):
    """Per-step gain envelopes with linear crossfades; they sum to one."""
    xf = min(int(round(CROSSFADE_SECONDS * fs)), step_samples)
    ramp = np.linspace(0.0, 1.0, xf, endpoint=False) if xf else np.zeros(0)
    windows = []
    for k in range(num_steps):
        start = k * step_samples
        end = (k + 1) * step_samples if k < num_steps - 1 else num_samples
        if end <= start:
            windows.append((start, np.zeros(0)))
            continue
        lead = min(xf, start)
        w = np.ones(end + lead - start)
        if lead:
            w[:lead] = ramp[xf - lead:]
        if k < num_steps - 1:
            tail = min(xf, num_samples - end)
            w = np.concatenate([w, 1.0 - ramp[:tail]])
        windows.append((start - lead, w))
    return windows


def simulate_shoebox(cfg, geom, source_audio, seed=0):
    """Render a moving source into microphone signals.

    Returns a SimulationResult with per-sample ground-truth azimuth and the
    anechoic direct-path signal at the array reference point. Sensor noise
    is white Gaussian, independent per mic, at cfg.noise_level_db relative
    to the direct-path RMS (relative to full scale when the source is
    silent).
    """
    source = np.asarray(source_audio, dtype=np.float64)
    if source.ndim != 1:
        raise ValueError("source_audio must be mono")
    fs = cfg.sample_rate
    traj = cfg.source_trajectory
    step_samples = int(round(traj.step_duration * fs))
    needed = step_samples * traj.num_steps
    if len(source) < needed:
        raise ValueError(
            f"source audio ({len(source)} samples) shorter than trajectory "
            f"({needed} samples)")

    center = np.asarray(cfg.array_center, dtype=np.float64)
    mics_abs = center[None, :] + geom.mic_positions
    for m in mics_abs:
        _check_inside(m, cfg.room_dims, "microphone", SourceOutsideRoomError)
    positions, azimuths = traj.positions(center)
    for p in positions:
        _check_inside(p, cfg.room_dims, "trajectory position",
                      TrajectoryExitsRoomError)

    if cfg.rt60_target > 0.0:
        beta = calibrate_reflectivity(cfg.room_dims, cfg.rt60_target, fs,
                                      positions[0], center,
                                      cfg.max_image_order)
    else:
        beta = 0.0
    t_direct = float(np.linalg.norm(positions - center[None, :], axis=1).max()
                     / SPEED_OF_SOUND)
    rir_seconds = max(1.3 * cfg.rt60_target, 0.02) + t_direct

    n = len(source)
    signals = np.zeros((n, geom.num_mics))
    direct_ref = np.zeros(n)
    windows = _step_windows(n, step_samples, traj.num_steps, fs)
    for k, (start, w) in enumerate(windows):
        if w.size == 0:
            continue
        seg = source[start:start + w.size] * w
        rir = image_source_rir(cfg.room_dims, positions[k], mics_abs, fs,
                               beta, cfg.max_image_order, rir_seconds)
        wet = fftconvolve(seg[:, None], rir, axes=0)
        stop = min(n, start + wet.shape[0])
        signals[start:stop] += wet[:stop - start]
        ref_rir = image_source_rir(cfg.room_dims, positions[k], center[None, :],
                                   fs, 0.0, 0, t_direct + 0.01)
        dry = fftconvolve(seg, ref_rir[:, 0])
        stop_d = min(n, start + dry.shape[0])
        direct_ref[start:stop_d] += dry[:stop_d - start]

    ref_rms = float(np.sqrt(np.mean(direct_ref**2)))
    if ref_rms <= 1e-12:
        ref_rms = 1.0
    noise_rms = ref_rms * 10.0 ** (cfg.noise_level_db / 20.0)
    rng = np.random.default_rng(seed)
    signals += noise_rms * rng.standard_normal(signals.shape)

    step_index = np.minimum(np.arange(n) // step_samples, traj.num_steps - 1)
    azimuth_deg = np.degrees(azimuths)[step_index] % 360.0
    return SimulationResult(signals=signals, azimuth_deg=azimuth_deg,
                            direct_reference=direct_ref, sample_rate=fs,
                            step_samples=step_samples,
                            source_positions=positions)


def measure_rt60(rir, sample_rate):
    """RT60 from Schroeder backward integration.

    A line is fit to the decay curve between -5 and -25 dB and extrapolated
    to 60 dB. Raises DecayTooShortError when the curve gives no usable span.
    """
    h = np.asarray(rir, dtype=np.float64)
    if h.ndim == 2:
        h = h[:, 0]
    energy = h**2
    if energy.sum() <= 0:
        raise DecayTooShortError("impulse response has no energy")
    sch = np.cumsum(energy[::-1])[::-1]
    db = 10.0 * np.log10(sch / sch[0] + 1e-300)
    i5 = int(np.argmax(db <= -5.0))
    i25 = int(np.argmax(db <= -25.0))
    if db[i5] > -5.0 or db[i25] > -25.0:
        raise DecayTooShortError("decay never spans -5 to -25 dB")
    min_span = max(int(0.01 * sample_rate), 32)
    if i25 - i5 < min_span:
        raise DecayTooShortError(
            f"only {i25 - i5} samples between -5 and -25 dB")
    t = np.arange(i5, i25 + 1) / sample_rate
    slope, _ = np.polyfit(t, db[i5:i25 + 1], 1)
    if slope >= 0:
        raise DecayTooShortError("decay curve is not decreasing")
    return -60.0 / slope


def schroeder_curve(rir):
    """Backward-integrated energy decay in dB (monotone nonincreasing)."""
    h = np.asarray(rir, dtype=np.float64)
    if h.ndim == 2:
        h = h[:, 0]
    sch = np.cumsum((h**2)[::-1])[::-1]
    return 10.0 * np.log10(sch / sch[0] + 1e-300)


def speech_like(duration, sample_rate=48000.0, seed=0):
    """Synthetic speech-like test signal: modulated noise in 100-4000 Hz.

    A syllabic-rate envelope with occasional pauses over bandpassed noise;
    peak-normalized to 0.5.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    band = (f >= 100.0) & (f <= 4000.0)
    shaped = np.where(band, spec / np.maximum(f, 100.0) ** 0.5, 0.0)
    carrier = np.fft.irfft(shaped, n)

    # syllabic (~4 Hz) modulation with soft pauses
    t = np.arange(n) / sample_rate
    slow = np.fft.rfft(rng.standard_normal(n))
    keep = np.fft.rfftfreq(n, 1.0 / sample_rate) <= 4.0
    env = np.fft.irfft(np.where(keep, slow, 0.0), n)
    env = (env - env.min()) / max(float(np.ptp(env)), 1e-12)
    env = 0.08 + 0.92 * env**1.5
    env *= 0.55 + 0.45 * np.cos(2.0 * np.pi * 3.1 * t + 0.7)
    sig = carrier * np.abs(env)
    return 0.5 * sig / np.max(np.abs(sig))
