"""Deterministic signal processing: STFT/ISTFT, mixing, complex ratio masks.

All functions are pure. Waveforms are float64 internally; spectrogram and
mask components are plain float64 arrays so they can be stacked into
tensors by the training and inference services.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Tuple

import numpy as np
import torch
from scipy.signal import get_window

from core.errors import DegenerateSource, InvalidInput, ShapeError, SynthesisError

# Regularizer added to |X|^2 in the ratio mask denominator
CIRM_EPS = 1e-8
# Minimum overlap-added window power for invertibility
NOLA_FLOOR = 1e-12
# Frequency bins kept for the vocal attributes network
EMBEDDING_FREQ_BINS = 256


# ==================== Data Classes ====================

@dataclass(frozen=True)
class Waveform:
    """Mono signal with its sample rate."""
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        object.__setattr__(self, 'samples', samples)
        if self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInput("waveform contains non-finite samples")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples ** 2)))

    def slice(self, start: int, stop: int) -> 'Waveform':
        return Waveform(self.samples[start:stop], self.sample_rate)

    def scaled(self, gain: float) -> 'Waveform':
        return Waveform(self.samples * gain, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters (defaults: 400/160/512 Hann)."""
    window_length: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = 'hann'
    center_pad: bool = True

    def __post_init__(self) -> None:
        if self.hop <= 0:
            raise InvalidInput("hop must be positive")
        if self.hop > self.window_length:
            raise InvalidInput("hop must not exceed window_length")
        if self.window_length > self.fft_size:
            raise InvalidInput("window_length must not exceed fft_size")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    def frames_for(self, n_samples: int) -> int:
        """Frame count stft() produces for a signal of n_samples."""
        if self.center_pad:
            return 1 + n_samples // self.hop
        return 1 + (n_samples - self.fft_size) // self.hop

    @classmethod
    def from_settings(cls, section: dict) -> 'StftConfig':
        return cls(
            window_length=int(section['window_length']),
            hop=int(section['hop']),
            fft_size=int(section['fft_size']),
            window=str(section['window']),
            center_pad=bool(section['center_pad']),
        )


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Real/imaginary F x T grids."""
    real: np.ndarray
    imag: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self) -> None:
        real = np.asarray(self.real, dtype=np.float64)
        imag = np.asarray(self.imag, dtype=np.float64)
        if real.ndim != 2 or real.shape != imag.shape:
            raise ShapeError(f"real {real.shape} and imag {imag.shape} must be equal 2-D grids")
        object.__setattr__(self, 'real', real)
        object.__setattr__(self, 'imag', imag)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.real.shape

    @property
    def freq_bins(self) -> int:
        return self.real.shape[0]

    @property
    def frames(self) -> int:
        return self.real.shape[1]

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def stacked(self) -> np.ndarray:
        """(2, F, T) array as fed to the networks."""
        return np.stack([self.real, self.imag])

    @classmethod
    def from_complex(cls, values: np.ndarray, config: StftConfig) -> 'ComplexSpectrogram':
        return cls(np.real(values), np.imag(values), config)


@dataclass(frozen=True)
class ComplexMask:
    """Bounded complex ratio mask; each component lies in [-bound, bound]."""
    real: np.ndarray
    imag: np.ndarray
    bound: float = 5.0

    def __post_init__(self) -> None:
        real = np.asarray(self.real, dtype=np.float64)
        imag = np.asarray(self.imag, dtype=np.float64)
        if real.shape != imag.shape:
            raise ShapeError(f"mask real {real.shape} and imag {imag.shape} differ")
        if self.bound <= 0:
            raise InvalidInput("mask bound must be positive")
        if real.size and max(np.max(np.abs(real)), np.max(np.abs(imag))) > self.bound:
            raise InvalidInput(f"mask component exceeds bound {self.bound}")
        object.__setattr__(self, 'real', real)
        object.__setattr__(self, 'imag', imag)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.real.shape

    def stacked(self) -> np.ndarray:
        return np.stack([self.real, self.imag])

    @classmethod
    def identity(cls, shape: Tuple[int, int], bound: float = 5.0) -> 'ComplexMask':
        return cls(np.ones(shape), np.zeros(shape), bound)


# ==================== Helpers ====================

@lru_cache(maxsize=16)
def _window_array(name: str, length: int) -> np.ndarray:
    # Periodic (fftbins) windows, as torch.hann_window defaults to
    window = get_window(name, length, fftbins=True).astype(np.float64)
    window.setflags(write=False)
    return window


def analysis_window(cfg: StftConfig) -> np.ndarray:
    """Window of cfg.window_length samples, zero-padded and centered in fft_size."""
    window = _window_array(cfg.window, cfg.window_length)
    left = (cfg.fft_size - cfg.window_length) // 2
    padded = np.zeros(cfg.fft_size)
    padded[left:left + cfg.window_length] = window
    return padded


def window_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Sum of squared windows overlap-added over n_frames frames.

    Indexed in the padded domain when cfg.center_pad is set, i.e. sample
    fft_size // 2 of the envelope corresponds to signal sample 0.
    """
    window_sq = analysis_window(cfg) ** 2
    envelope = np.zeros(cfg.fft_size + cfg.hop * (n_frames - 1))
    for t in range(n_frames):
        envelope[t * cfg.hop:t * cfg.hop + cfg.fft_size] += window_sq
    return envelope


def complex_multiply(x_re: Any, x_im: Any, m_re: Any, m_im: Any) -> Tuple[Any, Any]:
    """Element-wise complex product on numpy arrays or torch tensors alike."""
    return x_re * m_re - x_im * m_im, x_re * m_im + x_im * m_re


def complex_ratio(s_re: Any, s_im: Any, x_re: Any, x_im: Any, bound: float,
                  eps: float = CIRM_EPS) -> Tuple[Any, Any]:
    """S / X with eps added to |X|^2, components clamped to [-bound, bound]."""
    denom = x_re * x_re + x_im * x_im + eps
    ratio_re = (s_re * x_re + s_im * x_im) / denom
    ratio_im = (s_im * x_re - s_re * x_im) / denom
    if isinstance(ratio_re, torch.Tensor):
        return ratio_re.clamp(-bound, bound), ratio_im.clamp(-bound, bound)
    return np.clip(ratio_re, -bound, bound), np.clip(ratio_im, -bound, bound)


def _require_same_shape(a: Tuple[int, ...], b: Tuple[int, ...], what: str) -> None:
    if tuple(a) != tuple(b):
        raise ShapeError(f"{what}: shapes {tuple(a)} and {tuple(b)} differ")


# ==================== Operations ====================

def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Short-time Fourier transform; frames centered on t * hop when center_pad."""
    if len(w) == 0:
        raise InvalidInput("cannot analyse an empty waveform")
    signal = torch.from_numpy(w.samples)
    if not cfg.center_pad and len(w) < cfg.fft_size:
        raise InvalidInput(f"signal of {len(w)} samples is shorter than fft_size without padding")
    # Reflect padding needs more samples than the pad width
    pad_mode = 'reflect' if len(w) > cfg.fft_size // 2 else 'constant'
    spec = torch.stft(
        signal,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        win_length=cfg.window_length,
        window=torch.from_numpy(np.array(_window_array(cfg.window, cfg.window_length))),
        center=cfg.center_pad,
        pad_mode=pad_mode,
        return_complex=True,
    )
    values = spec.numpy()
    return ComplexSpectrogram(values.real.copy(), values.imag.copy(), cfg)


def istft(s: ComplexSpectrogram, cfg: StftConfig = StftConfig(), out_length: int = 40800,
          sample_rate: int = 16000) -> Waveform:
    """Least-squares overlap-add inverse (frames divided by summed squared window)."""
    if s.freq_bins != cfg.freq_bins:
        raise ShapeError(f"spectrogram has {s.freq_bins} bins, config expects {cfg.freq_bins}")
    if out_length > s.frames * cfg.hop:
        raise InvalidInput(f"out_length {out_length} exceeds frames * hop = {s.frames * cfg.hop}")

    envelope = window_envelope(cfg, s.frames)
    offset = cfg.fft_size // 2 if cfg.center_pad else 0
    covered = min(out_length, envelope.shape[0] - offset)
    interior = envelope[offset:offset + covered]
    if interior.size and interior.min() < NOLA_FLOOR:
        bad = int(np.argmin(interior))
        raise SynthesisError(f"window power {interior[bad]:.3e} below {NOLA_FLOOR} at sample {bad}")

    values = torch.from_numpy(s.to_complex())
    signal = torch.istft(
        values,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        win_length=cfg.window_length,
        window=torch.from_numpy(np.array(_window_array(cfg.window, cfg.window_length))),
        center=cfg.center_pad,
        length=out_length,
    )
    return Waveform(signal.numpy().copy(), sample_rate)


def mix_waveforms(a: Waveform, b: Waveform, snr_db: float) -> Tuple[Waveform, float]:
    """a + scale_b * b with RMS(a) / RMS(scale_b * b) at the target SNR.

    snr_db = +inf means b is left out (scale_b = 0).
    """
    if len(a) != len(b):
        raise ShapeError(f"cannot mix {len(a)} and {len(b)} samples")
    if a.sample_rate != b.sample_rate:
        raise ShapeError(f"cannot mix {a.sample_rate} Hz with {b.sample_rate} Hz")
    if np.isposinf(snr_db):
        return Waveform(a.samples.copy(), a.sample_rate), 0.0
    if np.isnan(snr_db) or np.isneginf(snr_db):
        raise InvalidInput(f"snr_db must be finite or +inf, got {snr_db}")
    rms_b = b.rms()
    if rms_b == 0.0:
        raise DegenerateSource("interfering signal is silent; finite SNR is undefined")
    scale_b = (a.rms() / rms_b) / (10.0 ** (snr_db / 20.0))
    return Waveform(a.samples + scale_b * b.samples, a.sample_rate), float(scale_b)


def compute_cirm(source: ComplexSpectrogram, mixture: ComplexSpectrogram,
                 K: float = 5.0) -> ComplexMask:
    """Complex ideal ratio mask of source relative to mixture."""
    _require_same_shape(source.shape, mixture.shape, "compute_cirm")
    if K <= 0:
        raise InvalidInput("mask bound K must be positive")
    real, imag = complex_ratio(source.real, source.imag, mixture.real, mixture.imag, K)
    return ComplexMask(real, imag, K)


def apply_mask(x: ComplexSpectrogram, m: ComplexMask) -> ComplexSpectrogram:
    """Complex multiplication of mixture and mask."""
    _require_same_shape(x.shape, m.shape, "apply_mask")
    real, imag = complex_multiply(x.real, x.imag, m.real, m.imag)
    return ComplexSpectrogram(real, imag, x.config)


def crop_for_embedding(s: ComplexSpectrogram) -> ComplexSpectrogram:
    """Drop the highest frequency bin (257 x T -> 256 x T)."""
    if s.freq_bins < EMBEDDING_FREQ_BINS + 1:
        raise ShapeError(f"need at least {EMBEDDING_FREQ_BINS + 1} bins to crop, got {s.freq_bins}")
    return ComplexSpectrogram(s.real[:-1], s.imag[:-1], s.config)
