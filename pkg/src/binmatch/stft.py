"""STFT analysis/synthesis between multichannel audio and spectral frames.

``analyze`` produces an (num_frames, num_bins, num_channels) complex array;
``synthesize`` inverts it with weighted overlap-add.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FreqGrid


class ChannelMismatchError(ValueError):
    """Input channels differ in length."""


class TooShortError(ValueError):
    """Audio shorter than one analysis frame."""


class InconsistentFramesError(ValueError):
    """Spectral frames disagree with the configured bin count."""


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 256
    sample_rate: float = 48000.0
    window: str = "hann"

    def __post_init__(self):
        n, h = self.fft_size, self.hop
        if n < 2 or (n & (n - 1)) != 0:
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if h <= 0 or n % h != 0:
            raise ValueError(f"hop {h} must divide fft_size {n}")
        if h > n // 2:
            raise ValueError(f"hop {h} must be <= fft_size/2 for COLA")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def num_bins(self):
        return self.fft_size // 2 + 1

    def freq_grid(self):
        return FreqGrid(self.sample_rate, self.fft_size)

    def num_frames(self, num_samples):
        if num_samples < self.fft_size:
            raise TooShortError(
                f"need >= {self.fft_size} samples, got {num_samples}")
        return (num_samples - self.fft_size) // self.hop + 1

    def frame_center_samples(self, num_frames):
        """Sample index at the center of each analysis frame."""
        return np.arange(num_frames) * self.hop + self.fft_size // 2


def hann_window(n):
    """Periodic Hann window (COLA-compatible at hop = n/2 and n/4)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _as_channels(audio):
    if isinstance(audio, (list, tuple)):
        lengths = {len(np.asarray(ch)) for ch in audio}
        if len(lengths) > 1:
            raise ChannelMismatchError(f"channel lengths differ: {sorted(lengths)}")
        audio = np.stack([np.asarray(ch, dtype=np.float64) for ch in audio], axis=1)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim == 1:
        audio = audio[:, None]
    if audio.ndim != 2:
        raise ValueError(f"audio must be (samples,) or (samples, channels), got {audio.shape}")
    return audio


def analyze(audio, cfg):
    """Windowed FFT of every hop-spaced frame.

    Returns a (num_frames, num_bins, num_channels) complex array. Frame t
    covers samples [t*hop, t*hop + fft_size).
    """
    audio = _as_channels(audio)
    n_samples = audio.shape[0]
    t = cfg.num_frames(n_samples)
    win = hann_window(cfg.fft_size)
    # (T, channels, fft) view, then window and transform along time axis
    frames = np.lib.stride_tricks.sliding_window_view(
        audio, cfg.fft_size, axis=0)[::cfg.hop][:t]
    spec = np.fft.rfft(frames * win, axis=-1)
    return np.ascontiguousarray(spec.transpose(0, 2, 1))


def synthesize(frames, cfg):
    """Weighted overlap-add inverse of :func:`analyze`.

    Each frame is inverse-transformed, windowed again, and accumulated;
    the result is normalized per sample by the accumulated squared-window
    sum (zero where no frame covers a sample). With the Hann pair this is
    perfect reconstruction in the covered region.
    """
    frames = np.asarray(frames, dtype=np.complex128)
    if frames.ndim == 2:
        frames = frames[:, :, None]
    if frames.ndim != 3 or frames.shape[1] != cfg.num_bins:
        raise InconsistentFramesError(
            f"expected (T, {cfg.num_bins}, C) frames, got {frames.shape}")
    t, _, n_ch = frames.shape
    win = hann_window(cfg.fft_size)
    n_out = (t - 1) * cfg.hop + cfg.fft_size
    out = np.zeros((n_out, n_ch))
    wsum = np.zeros(n_out)
    segs = np.fft.irfft(frames, n=cfg.fft_size, axis=1)
    for k in range(t):
        sl = slice(k * cfg.hop, k * cfg.hop + cfg.fft_size)
        out[sl] += win[:, None] * segs[k]
        wsum[sl] += win * win
    covered = wsum > 1e-10
    out[covered] /= wsum[covered, None]
    out[~covered] = 0.0
    return out
