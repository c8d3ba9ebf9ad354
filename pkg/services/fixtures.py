"""Synthetic audio-visual corpus for tests, checks and desk-scale runs.

Each speaker is a harmonic tone complex shaped by speaker-specific
band-pass "formants" and a syllable-rate amplitude envelope. Mouth ROIs are
drawn so the mouth opening follows the audio envelope frame by frame, and
every clip carries a short track of face crops with a per-speaker color and
pattern. Output is byte-identical for a fixed seed.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy.signal import butter, sosfilt

from core.config import Config
from core.errors import InvalidInput, IoError
from services.dsp import Waveform
from services.manifest import ManifestEntry, write_manifest
from utils.audio_io import write_wav

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FPS = 25
ROI_STORE_SIZE = 96
FACE_STORE_SIZE = 224
FACES_PER_CLIP = 3


# ==================== Data Classes ====================

@dataclass(frozen=True)
class SpeakerProfile:
    """Deterministic voice and appearance of one synthetic speaker."""
    index: int
    f0: float
    formants: Tuple[float, float, float]
    syllable_rate: float
    mouth_width: int
    skin: Tuple[int, int, int]
    background: Tuple[int, int, int]
    stripes: int

    @property
    def video_id(self) -> str:
        return f"spk{self.index:02d}"


@dataclass
class FixtureSummary:
    manifest_path: Path
    n_entries: int
    n_videos: int
    noise_paths: List[Path] = field(default_factory=list)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def speaker_profile(seed: int, index: int) -> SpeakerProfile:
    rng = _rng(seed, 1, index)
    # Spread fundamentals over the speaking range so speakers stay separable
    f0 = 95.0 + 150.0 * ((index * 0.618034 + rng.uniform(0, 0.1)) % 1.0)
    first = rng.uniform(350.0, 900.0)
    second = first + rng.uniform(600.0, 1400.0)
    third = second + rng.uniform(700.0, 1500.0)
    return SpeakerProfile(
        index=index,
        f0=float(f0),
        formants=(float(first), float(second), float(min(third, 6500.0))),
        syllable_rate=float(rng.uniform(2.5, 5.5)),
        mouth_width=int(rng.integers(26, 46)),
        skin=tuple(int(c) for c in rng.integers(90, 230, size=3)),
        background=tuple(int(c) for c in rng.integers(0, 80, size=3)),
        stripes=int(rng.integers(2, 9)),
    )


# ==================== Audio ====================

def _bandpass(signal: np.ndarray, center: float, sample_rate: int) -> np.ndarray:
    low = max(center * 0.75, 60.0)
    high = min(center * 1.25, sample_rate / 2 - 100.0)
    sos = butter(2, [low, high], btype='bandpass', fs=sample_rate, output='sos')
    return sosfilt(sos, signal)


def _envelope(profile: SpeakerProfile, n: int, rng: np.random.Generator,
              sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    rate = profile.syllable_rate * rng.uniform(0.85, 1.15)
    syllables = np.clip(np.sin(2 * np.pi * rate * t + phase), 0.0, None) ** 1.5
    # Occasional pauses between phrases
    gate_rate = rng.uniform(0.3, 0.6)
    gate = 0.5 * (1.0 + np.tanh(6.0 * np.sin(2 * np.pi * gate_rate * t + rng.uniform(0, 2 * np.pi)) + 3.0))
    return syllables * gate


def synthesize_voice(profile: SpeakerProfile, duration: float, rng: np.random.Generator,
                     sample_rate: int = SAMPLE_RATE) -> Tuple[np.ndarray, np.ndarray]:
    """Speech-like signal and its amplitude envelope, both n samples long."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4.0, 6.0) * t)
    phase = 2 * np.pi * np.cumsum(profile.f0 * vibrato) / sample_rate
    n_harmonics = int((sample_rate / 2 - 200.0) // (profile.f0 * 1.03))
    source = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        source += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k

    voiced = sum(gain * _bandpass(source, center, sample_rate)
                 for center, gain in zip(profile.formants, (1.0, 0.6, 0.35)))
    envelope = _envelope(profile, n, rng, sample_rate)
    signal = voiced * envelope + 1e-3 * rng.standard_normal(n)
    peak = np.max(np.abs(signal))
    return 0.5 * signal / peak, envelope


def synthesize_noise(duration: float, rng: np.random.Generator,
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Low-passed noise bursts; non-speech interference for enhancement mode."""
    n = int(round(duration * sample_rate))
    cutoff = rng.uniform(800.0, 5000.0)
    sos = butter(4, cutoff, btype='lowpass', fs=sample_rate, output='sos')
    noise = sosfilt(sos, rng.standard_normal(n))
    t = np.arange(n) / sample_rate
    bursts = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t) ** 2
    noise = noise * bursts
    return 0.3 * noise / np.max(np.abs(noise))


# ==================== Images ====================

def _frame_levels(envelope: np.ndarray, n_frames: int, samples_per_frame: int) -> np.ndarray:
    levels = np.array([
        envelope[i * samples_per_frame:(i + 1) * samples_per_frame].mean()
        for i in range(n_frames)
    ])
    top = levels.max()
    return levels / top if top > 0 else levels


def draw_mouth(profile: SpeakerProfile, opening: float, size: int = ROI_STORE_SIZE) -> Image.Image:
    """Grayscale ROI: lips as an ellipse whose height tracks `opening` in [0, 1]."""
    image = Image.new('L', (size, size), color=150 + 3 * profile.index % 60)
    draw = ImageDraw.Draw(image)
    cx, cy = size // 2, size // 2
    half_w = profile.mouth_width // 2
    half_h = 2 + int(round(opening * size * 0.22))
    draw.ellipse([cx - half_w - 4, cy - half_h - 4, cx + half_w + 4, cy + half_h + 4], fill=90)
    draw.ellipse([cx - half_w, cy - half_h, cx + half_w, cy + half_h], fill=20)
    return image


def draw_face(profile: SpeakerProfile, variant: int, size: int = FACE_STORE_SIZE) -> Image.Image:
    """RGB face crop: per-speaker skin tone, background and stripe pattern."""
    image = Image.new('RGB', (size, size), color=profile.background)
    draw = ImageDraw.Draw(image)
    jitter = 2 * variant
    margin = size // 8
    draw.ellipse([margin + jitter, margin, size - margin + jitter, size - margin // 2], fill=profile.skin)
    band = size // (2 * profile.stripes)
    shade = tuple(max(c - 60, 0) for c in profile.skin)
    for k in range(profile.stripes):
        top = margin + 2 * k * band
        draw.rectangle([margin + jitter, top, size - margin + jitter, top + band // 2], fill=shade)
    eye = size // 12
    for ex in (size // 3, 2 * size // 3):
        draw.ellipse([ex - eye + jitter, size // 3 - eye, ex + eye + jitter, size // 3 + eye], fill=(10, 10, 10))
    return image


def _save(image: Image.Image, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        image.save(str(path), format='PNG', optimize=False)
    except OSError as e:
        raise IoError(f"failed to write {path}: {e}")


# ==================== Operations ====================

def make_synthetic_fixture(rng_seed: int, n_speakers: int, clips_per_speaker: int,
                           out_dir: Optional[Path] = None, duration: float = 4.0,
                           noise_clips: int = 0) -> FixtureSummary:
    """Write a corpus of n_speakers videos with clips_per_speaker clips each.

    Layout under out_dir: audio/<clip>.wav, roi/<clip>/NNNN.png,
    face/<clip>/NNNN.png, noise/noiseNN.wav and manifest.jsonl with paths
    relative to out_dir.

    Raises:
        InvalidInput: Fewer than two speakers or no clips
        IoError: Any write fails
    """
    if n_speakers < 2:
        raise InvalidInput(f"need at least 2 speakers, got {n_speakers}")
    if clips_per_speaker < 1:
        raise InvalidInput("clips_per_speaker must be at least 1")
    out_dir = Path(out_dir) if out_dir is not None else Path(Config.CACHE_DIR) / f"fixture_s{rng_seed}"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}")

    samples_per_frame = SAMPLE_RATE // FPS
    entries: List[ManifestEntry] = []
    for index in range(n_speakers):
        profile = speaker_profile(rng_seed, index)
        for clip in range(clips_per_speaker):
            clip_id = f"{profile.video_id}_c{clip:02d}"
            rng = _rng(rng_seed, 2, index, clip)
            samples, envelope = synthesize_voice(profile, duration, rng)
            write_wav(out_dir / 'audio' / f"{clip_id}.wav", Waveform(samples, SAMPLE_RATE))

            n_frames = len(samples) // samples_per_frame
            for frame, level in enumerate(_frame_levels(envelope, n_frames, samples_per_frame)):
                _save(draw_mouth(profile, float(level)), out_dir / 'roi' / clip_id / f"{frame:04d}.png")
            for variant in range(FACES_PER_CLIP):
                _save(draw_face(profile, variant + clip), out_dir / 'face' / clip_id / f"{variant:04d}.png")

            entries.append(ManifestEntry(
                clip_id=clip_id,
                audio_path=f"audio/{clip_id}.wav",
                roi_dir=f"roi/{clip_id}",
                face_dir=f"face/{clip_id}",
                video_id=profile.video_id,
            ))

    noise_paths: List[Path] = []
    for k in range(noise_clips):
        noise = synthesize_noise(duration, _rng(rng_seed, 3, k))
        noise_paths.append(write_wav(out_dir / 'noise' / f"noise{k:02d}.wav", Waveform(noise, SAMPLE_RATE)))

    manifest_path = out_dir / Config.MANIFEST_FILE
    try:
        write_manifest(manifest_path, entries)
    except OSError as e:
        raise IoError(f"failed to write {manifest_path}: {e}")
    logger.info(
        f"[Fixture] Wrote {len(entries)} clip(s) for {n_speakers} speaker(s)"
        f"{f' and {noise_clips} noise clip(s)' if noise_clips else ''} to {out_dir}"
    )
    return FixtureSummary(manifest_path, len(entries), n_speakers, noise_paths)
