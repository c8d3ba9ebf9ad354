"""Tests for the STFT pair, mixing and complex ratio masks."""

import numpy as np
import pytest

from core.errors import DegenerateSource, InvalidInput, ShapeError
from services.dsp import (
    ComplexMask,
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    apply_mask,
    compute_cirm,
    crop_for_embedding,
    istft,
    mix_waveforms,
    stft,
    window_envelope,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def segment(rng):
    return Waveform(rng.standard_normal(40800))


# ---------------------------------------------------------------------------
# Waveform / StftConfig
# ---------------------------------------------------------------------------

class TestWaveform:
    def test_duration_and_rms(self):
        w = Waveform(np.full(8000, 0.5))
        assert w.duration == pytest.approx(0.5)
        assert w.rms() == pytest.approx(0.5)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInput, match='non-finite'):
            Waveform(np.array([0.0, np.nan]))

    def test_empty_rms_is_zero(self):
        assert Waveform(np.zeros(0)).rms() == 0.0


class TestStftConfig:
    def test_default_geometry(self):
        cfg = StftConfig()
        assert cfg.freq_bins == 257
        assert cfg.frames_for(40800) == 256

    def test_hop_larger_than_window(self):
        with pytest.raises(InvalidInput, match='hop'):
            StftConfig(window_length=100, hop=200, fft_size=128)

    def test_window_larger_than_fft(self):
        with pytest.raises(InvalidInput, match='fft_size'):
            StftConfig(window_length=600)


# ---------------------------------------------------------------------------
# STFT / ISTFT
# ---------------------------------------------------------------------------

class TestStft:
    def test_shape_of_a_segment(self, segment):
        spec = stft(segment)
        assert spec.shape == (257, 256)

    def test_empty_signal(self):
        with pytest.raises(InvalidInput, match='empty'):
            stft(Waveform(np.zeros(0)))

    def test_round_trip(self, segment):
        cfg = StftConfig()
        restored = istft(stft(segment, cfg), cfg, len(segment))
        assert len(restored) == len(segment)
        np.testing.assert_allclose(restored.samples[512:-512], segment.samples[512:-512], atol=1e-8)

    def test_round_trip_many_signals(self, rng):
        cfg = StftConfig()
        for _ in range(10):
            w = Waveform(rng.standard_normal(40800))
            y = istft(stft(w, cfg), cfg, 40800)
            a, b = w.samples[512:-512], y.samples[512:-512]
            assert np.linalg.norm(a - b) / np.linalg.norm(a) <= 1e-6

    def test_out_length_beyond_frames(self, segment):
        spec = stft(segment)
        with pytest.raises(InvalidInput, match='exceeds'):
            istft(spec, StftConfig(), out_length=spec.frames * 160 + 1)

    def test_bin_mismatch(self, segment):
        spec = stft(segment)
        with pytest.raises(ShapeError, match='bins'):
            istft(spec, StftConfig(window_length=200, fft_size=256), 40800)

    def test_envelope_positive_inside_signal(self):
        cfg = StftConfig()
        env = window_envelope(cfg, 256)
        assert env[cfg.fft_size // 2:cfg.fft_size // 2 + 40800].min() > 0.0


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

class TestMix:
    def test_target_snr(self, rng):
        a = Waveform(rng.standard_normal(16000))
        b = Waveform(3.0 * rng.standard_normal(16000))
        mixed, scale = mix_waveforms(a, b, 6.0)
        achieved = 20 * np.log10(a.rms() / (scale * b.rms()))
        assert achieved == pytest.approx(6.0, abs=1e-9)
        np.testing.assert_allclose(mixed.samples, a.samples + scale * b.samples)

    def test_infinite_snr_leaves_b_out(self, rng):
        a = Waveform(rng.standard_normal(100))
        mixed, scale = mix_waveforms(a, Waveform(rng.standard_normal(100)), float('inf'))
        assert scale == 0.0
        np.testing.assert_array_equal(mixed.samples, a.samples)

    def test_silent_interferer(self, rng):
        with pytest.raises(DegenerateSource):
            mix_waveforms(Waveform(rng.standard_normal(100)), Waveform(np.zeros(100)), 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mix_waveforms(Waveform(np.ones(10)), Waveform(np.ones(11)), 0.0)

    def test_nan_snr(self):
        with pytest.raises(InvalidInput):
            mix_waveforms(Waveform(np.ones(10)), Waveform(np.ones(10)), float('nan'))


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

class TestMasks:
    def test_cirm_recovers_source(self, rng):
        a = Waveform(rng.standard_normal(40800))
        b = Waveform(rng.standard_normal(40800))
        x, scale = mix_waveforms(a, b, 0.0)
        X = stft(x)
        mask = compute_cirm(stft(a), X, 5.0)
        estimate = apply_mask(X, mask).to_complex()
        reference = stft(a).to_complex()
        # Unclamped bins recover the source
        inside = (np.abs(mask.real) < 5.0) & (np.abs(mask.imag) < 5.0)
        np.testing.assert_allclose(estimate[inside], reference[inside], rtol=1e-6, atol=1e-3)

    def test_cirm_is_bounded(self, segment):
        X = stft(segment)
        loud = ComplexSpectrogram(10 * X.real, 10 * X.imag, X.config)
        mask = compute_cirm(loud, X, 5.0)
        assert np.max(np.abs(mask.real)) == pytest.approx(5.0)
        assert np.max(np.abs(mask.imag)) <= 5.0

    def test_cirm_of_mixture_is_identity(self, segment):
        X = stft(segment)
        mask = compute_cirm(X, X)
        np.testing.assert_allclose(mask.real, 1.0, atol=1e-3)
        np.testing.assert_allclose(mask.imag, 0.0, atol=1e-12)

    def test_cirm_shape_mismatch(self, segment):
        X = stft(segment)
        with pytest.raises(ShapeError):
            compute_cirm(crop_for_embedding(X), X)

    def test_mask_bound_enforced(self):
        with pytest.raises(InvalidInput, match='exceeds bound'):
            ComplexMask(np.full((2, 2), 6.0), np.zeros((2, 2)), 5.0)

    def test_identity_mask_passes_through(self, segment):
        X = stft(segment)
        out = apply_mask(X, ComplexMask.identity(X.shape))
        np.testing.assert_array_equal(out.real, X.real)

    def test_crop_for_embedding(self, segment):
        assert crop_for_embedding(stft(segment)).shape == (256, 256)
