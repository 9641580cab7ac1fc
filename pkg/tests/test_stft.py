import numpy as np
import pytest

from binmatch.stft import (
    ChannelMismatchError,
    InconsistentFramesError,
    StftConfig,
    TooShortError,
    analyze,
    hann_window,
    synthesize,
)

CFG = StftConfig(fft_size=1024, hop=256, sample_rate=48000.0)


class TestConfig:
    def test_hop_must_divide(self):
        with pytest.raises(ValueError):
            StftConfig(fft_size=1024, hop=300)

    def test_hop_at_most_half(self):
        with pytest.raises(ValueError):
            StftConfig(fft_size=1024, hop=1024)

    def test_power_of_two(self):
        with pytest.raises(ValueError):
            StftConfig(fft_size=1000, hop=250)

    def test_num_frames(self):
        assert CFG.num_frames(480000) == (480000 - 1024) // 256 + 1


class TestAnalyze:
    def test_sine_peak_bin(self):
        # DFT of a 1 kHz tone at 48 kHz / fft 1024 peaks at round(1000*1024/48000) = 21
        t = np.arange(48000) / 48000.0
        x = np.sin(2 * np.pi * 1000.0 * t)
        spec = analyze(x, CFG)
        mags = np.abs(spec[:, :, 0])
        assert np.all(np.argmax(mags, axis=1) == 21)

    def test_zero_input(self):
        spec = analyze(np.zeros(4096), CFG)
        assert spec.shape == (13, 513, 1)
        assert np.all(spec == 0)

    def test_windowed_impulse_spectrum(self):
        # impulse at sample n0 inside frame 0: |X[k]| = win[n0], phase -2*pi*k*n0/N
        n0 = 17
        x = np.zeros(2048)
        x[n0] = 1.0
        spec = analyze(x, CFG)[0, :, 0]
        win = hann_window(1024)
        k = np.arange(513)
        expected = win[n0] * np.exp(-2j * np.pi * k * n0 / 1024)
        assert np.allclose(spec, expected, atol=1e-12)

    def test_impulse_at_zero(self):
        x = np.zeros(1024)
        x[0] = 1.0
        spec = analyze(x, CFG)[0, :, 0]
        # periodic Hann has win[0] = 0, so the frame is identically zero
        assert np.allclose(spec, 0.0, atol=1e-15)

    def test_too_short(self):
        with pytest.raises(TooShortError):
            analyze(np.zeros(1000), CFG)

    def test_channel_mismatch(self):
        with pytest.raises(ChannelMismatchError):
            analyze([np.zeros(2048), np.zeros(2049)], CFG)

    def test_linearity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(4096)
        y = rng.standard_normal(4096)
        lhs = analyze(2.0 * x + 3.0 * y, CFG)
        rhs = 2.0 * analyze(x, CFG) + 3.0 * analyze(y, CFG)
        assert np.max(np.abs(lhs - rhs)) < 1e-10


class TestSynthesize:
    def test_round_trip_snr(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((48000, 2))
        y = synthesize(analyze(x, CFG), CFG)
        n = CFG.fft_size
        err = y[n:-n] - x[n : y.shape[0] - n]
        snr = 10 * np.log10(np.sum(x[n : y.shape[0] - n] ** 2) / np.sum(err**2))
        assert snr > 80.0

    def test_round_trip_hop_half(self):
        cfg = StftConfig(fft_size=512, hop=256, sample_rate=48000.0)
        rng = np.random.default_rng(1)
        x = rng.standard_normal(16384)
        y = synthesize(analyze(x, cfg), cfg)
        err = y[512:-512, 0] - x[512 : y.shape[0] - 512]
        assert np.max(np.abs(err)) < 1e-10

    def test_zero_frames(self):
        out = synthesize(np.zeros((5, 513, 2), dtype=complex), CFG)
        assert out.shape == ((5 - 1) * 256 + 1024, 2)
        assert np.all(out == 0)

    def test_single_frame_ola_weight(self):
        # one frame: output is win^2 * x normalized by the accumulated
        # window-square sum (= win^2 itself), i.e. x where the window is live
        rng = np.random.default_rng(3)
        x = rng.standard_normal(1024)
        spec = analyze(x, CFG)
        assert spec.shape[0] == 1
        y = synthesize(spec, CFG)[:, 0]
        win = hann_window(1024)
        w2 = win * win
        covered = w2 > 1e-10
        expected = np.zeros(1024)
        expected[covered] = (w2 * x)[covered] / w2[covered]
        assert np.allclose(y, expected, atol=1e-10)

    def test_inconsistent_frames(self):
        with pytest.raises(InconsistentFramesError):
            synthesize(np.zeros((4, 100, 1), dtype=complex), CFG)
