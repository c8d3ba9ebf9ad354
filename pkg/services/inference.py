"""Sliding-window separation and enhancement of arbitrary-length clips.

Windows are cut at hop intervals with the final window right-aligned to
the clip end. Each window is separated independently by a backend (the
trained model, or ground-truth masks for oracle checks), inverted, and
blended back with weights normalized to sum to one at every sample.
"""

import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np

from core.config import RunConfig
from core.errors import ClipTooShort, ConfigError, InvalidInput, ShapeError
from services.dsp import ComplexMask, ComplexSpectrogram, Waveform, apply_mask, compute_cirm, istft, stft
from services.metrics import bss_eval
from services.networks import AudioVisualSeparator, predict_masks
from services.objectives import MAX_PIT_SOURCES
from services.persistence import PersistenceService
from services.tuples import SegmentSpec
from services.visuals import FaceTrack, FaceTrackInput, crop_rois
from utils.audio_io import write_wav

logger = logging.getLogger(__name__)

BLEND_MODES = ('crossfade_hann', 'overlap_average')
PARTITION_TOLERANCE = 1e-9


# ==================== Data Classes ====================

@dataclass(frozen=True)
class WindowConfig:
    """Window length and hop in seconds, and how overlapping outputs are blended."""
    window: float = 2.55
    hop: float = 1.275
    blend: str = 'crossfade_hann'

    def __post_init__(self) -> None:
        if not 0 < self.hop <= self.window:
            raise InvalidInput(f"hop must satisfy 0 < hop <= window, got hop={self.hop}, window={self.window}")
        if self.blend not in BLEND_MODES:
            raise InvalidInput(f"blend must be one of {', '.join(BLEND_MODES)}, got '{self.blend}'")

    @classmethod
    def from_config(cls, run: RunConfig) -> 'WindowConfig':
        """Window = one model segment; a hop of 0 means half a window."""
        window = SegmentSpec.from_config(run).duration
        hop = run['infer.hop'] or window / 2
        return cls(window=window, hop=min(hop, window), blend=run['infer.blend'])

    def samples(self, sample_rate: int) -> Tuple[int, int]:
        win = int(round(self.window * sample_rate))
        return win, max(1, int(round(self.hop * sample_rate)))


@dataclass
class SeparationResult:
    """Per-speaker estimates covering the whole clip."""
    sources: List[Waveform]
    window_starts: List[int]
    wcfg: WindowConfig
    backend: str
    elapsed_ms: float
    masks: Optional[List[List[ComplexMask]]] = None

    def __post_init__(self) -> None:
        lengths = {len(s) for s in self.sources}
        if len(lengths) > 1:
            raise ShapeError(f"separated sources differ in length: {sorted(lengths)}")

    @property
    def n_windows(self) -> int:
        return len(self.window_starts)

    def metadata(self) -> Dict[str, Any]:
        return {
            'backend': self.backend,
            'window_s': self.wcfg.window,
            'hop_s': self.wcfg.hop,
            'blend': self.wcfg.blend,
            'window_starts': list(self.window_starts),
            'n_sources': len(self.sources),
            'n_samples': len(self.sources[0]) if self.sources else 0,
            'elapsed_ms': round(self.elapsed_ms, 3),
        }


@dataclass
class WindowInput:
    """One analysis window: mixture spectrum and visuals of each speaker."""
    start: int
    length: int
    X: ComplexSpectrogram
    visuals: List[FaceTrackInput] = field(default_factory=list)


# ==================== Window Geometry ====================

def window_starts(n_samples: int, window: int, hop: int) -> List[int]:
    """Start samples at hop intervals; the final window ends exactly at n_samples."""
    if window <= 0 or hop <= 0:
        raise InvalidInput("window and hop must be positive")
    if n_samples < window:
        raise ClipTooShort(f"clip of {n_samples} samples is shorter than one window ({window})")
    starts = list(range(0, n_samples - window + 1, hop))
    if starts[-1] + window < n_samples:
        starts.append(n_samples - window)
    return starts


def _taper(window: int) -> np.ndarray:
    # Half-sample shifted Hann so no weight is exactly zero
    n = np.arange(window)
    return np.sin(np.pi * (n + 0.5) / window) ** 2


def blend_weights(starts: Sequence[int], window: int, n_samples: int, blend: str) -> List[np.ndarray]:
    """Per-window weights, normalized so they sum to one at every sample."""
    if blend not in BLEND_MODES:
        raise InvalidInput(f"unknown blend '{blend}'")
    raw = []
    for k, start in enumerate(starts):
        if blend == 'overlap_average':
            w = np.ones(window)
        else:
            w = _taper(window)
            if k == 0:
                w[:window // 2] = 1.0
            if k == len(starts) - 1:
                w[window // 2:] = 1.0
        raw.append(w)

    total = np.zeros(n_samples)
    for start, w in zip(starts, raw):
        total[start:start + window] += w
    weights = [w / total[start:start + window] for start, w in zip(starts, raw)]

    check = np.zeros(n_samples)
    for start, w in zip(starts, weights):
        check[start:start + window] += w
    deviation = float(np.max(np.abs(check - 1.0)))
    if deviation > PARTITION_TOLERANCE:
        raise ShapeError(f"blend weights deviate from one by {deviation:.2e}")
    return weights


# ==================== Backends ====================

class SeparationBackend(ABC):
    """Produces one complex mask per target speaker for a window.

    New backends are registered in BACKENDS and selected by name.
    """

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @property
    @abstractmethod
    def n_speakers(self) -> Optional[int]:
        """Visual streams the backend expects, or None if it ignores visuals."""
        pass

    @property
    def ordered(self) -> bool:
        """Whether mask k always belongs to the same speaker from window to window."""
        return True

    @abstractmethod
    def masks(self, window: WindowInput) -> List[ComplexMask]:
        pass


class ModelBackend(SeparationBackend):
    """Masks predicted by a trained separator."""

    def __init__(self, model: AudioVisualSeparator, single_speaker: bool = False):
        self.model = model
        self.single_speaker = single_speaker

    @property
    def name(self) -> str:
        return 'model'

    @property
    def n_speakers(self) -> Optional[int]:
        if self.model.cfg.dedicated:
            return 2
        return 1 if self.single_speaker else None

    @property
    def needs_visuals(self) -> bool:
        return not self.model.cfg.audio_only

    @property
    def ordered(self) -> bool:
        return not self.model.cfg.audio_only

    def masks(self, window: WindowInput) -> List[ComplexMask]:
        if self.model.cfg.audio_only:
            return predict_masks(window.X, None, None, self.model)
        if self.model.cfg.dedicated:
            return predict_masks(window.X, window.visuals[0], window.visuals[1], self.model)
        # General mode: one forward pass per speaker
        return [predict_masks(window.X, visual, None, self.model)[0] for visual in window.visuals]


class OracleBackend(SeparationBackend):
    """Ground-truth complex ratio masks computed from the clean sources."""

    def __init__(self, sources: Sequence[Waveform], seg: SegmentSpec):
        if not sources:
            raise InvalidInput("oracle backend needs at least one source")
        self.sources = list(sources)
        self.seg = seg

    @property
    def name(self) -> str:
        return 'oracle'

    @property
    def n_speakers(self) -> Optional[int]:
        return None

    def masks(self, window: WindowInput) -> List[ComplexMask]:
        stop = window.start + window.length
        return [
            compute_cirm(stft(source.slice(window.start, stop), self.seg.stft), window.X, self.seg.mask_bound)
            for source in self.sources
        ]


class MixtureBackend(SeparationBackend):
    """Identity masks: every estimate is the mixture itself."""

    def __init__(self, n_sources: int = 2, bound: float = 5.0):
        self.n_sources = n_sources
        self.bound = bound

    @property
    def name(self) -> str:
        return 'mixture'

    @property
    def n_speakers(self) -> Optional[int]:
        return None

    def masks(self, window: WindowInput) -> List[ComplexMask]:
        return [ComplexMask.identity(window.X.shape, self.bound) for _ in range(self.n_sources)]


BACKENDS: Dict[str, Type[SeparationBackend]] = {
    'model': ModelBackend,
    'oracle': OracleBackend,
    'mixture': MixtureBackend,
}


def get_backend(name: str, *args: Any, **kwargs: Any) -> SeparationBackend:
    try:
        backend = BACKENDS[name]
    except KeyError:
        raise ConfigError(f"unknown backend '{name}' (choose from {', '.join(sorted(BACKENDS))})")
    return backend(*args, **kwargs)


# ==================== Operations ====================

def _window_visuals(tracks: Sequence[FaceTrack], faces: Sequence[np.ndarray], start: int,
                    seg: SegmentSpec) -> List[FaceTrackInput]:
    frame = int(round(start / seg.samples_per_frame))
    return [
        FaceTrackInput(crop_rois(track.segment(frame, seg.n_frames), seg.roi_size), face)
        for track, face in zip(tracks, faces)
    ]


def _continuity_permutation(estimates: Sequence[np.ndarray], outputs: Sequence[np.ndarray],
                            start: int, previous_end: int) -> Tuple[int, ...]:
    """Order of this window's estimates that best continues the blended outputs over the overlap."""
    if len(estimates) > MAX_PIT_SOURCES:
        raise InvalidInput(f"exhaustive assignment supports up to {MAX_PIT_SOURCES} sources")
    overlap = previous_end - start

    def agreement(perm: Tuple[int, ...]) -> float:
        return sum(float(np.dot(estimates[p][:overlap], outputs[k][start:previous_end]))
                   for k, p in enumerate(perm))

    return max(permutations(range(len(estimates))), key=agreement)


def separate_clip(mixture: Waveform, visuals: Sequence[FaceTrack], backend: SeparationBackend,
                  wcfg: WindowConfig, seg: SegmentSpec, face_seed: Optional[int] = None,
                  keep_masks: bool = False) -> SeparationResult:
    """Separate every speaker whose visual stream is given (or every oracle source).

    The face image of each speaker is the central face crop unless
    face_seed asks for a random one.

    Raises:
        ClipTooShort: Clip shorter than one window
        AlignmentError: A visual stream and the audio differ by more than one hop
        ConfigError: Speaker count does not fit the backend
    """
    started = time.perf_counter()
    expected = backend.n_speakers
    if expected is not None and len(visuals) != expected:
        raise ConfigError(f"{backend.name} backend expects {expected} visual stream(s), got {len(visuals)}")
    if isinstance(backend, ModelBackend) and backend.needs_visuals and not visuals:
        raise ConfigError("model backend needs at least one visual stream")
    tolerance = wcfg.hop
    for track in visuals:
        track.check_alignment(mixture.duration, tolerance)

    win, hop = wcfg.samples(mixture.sample_rate)
    if win != seg.segment_samples:
        raise ConfigError(f"window of {win} samples does not match the model segment ({seg.segment_samples})")
    n = len(mixture)
    starts = window_starts(n, win, hop)
    weights = blend_weights(starts, win, n, wcfg.blend)
    rng = np.random.default_rng(face_seed) if face_seed is not None else None
    faces = [track.face(seg.face_size, rng) for track in visuals]

    outputs: Optional[List[np.ndarray]] = None
    kept: List[List[ComplexMask]] = []
    previous_end = 0
    for start, weight in zip(starts, weights):
        X = stft(mixture.slice(start, start + win), seg.stft)
        window = WindowInput(start, win, X, _window_visuals(visuals, faces, start, seg))
        masks = backend.masks(window)
        estimates = [istft(apply_mask(X, mask), seg.stft, win, mixture.sample_rate).samples for mask in masks]
        if outputs is None:
            outputs = [np.zeros(n) for _ in masks]
        elif not backend.ordered and previous_end > start:
            perm = _continuity_permutation(estimates, outputs, start, previous_end)
            estimates = [estimates[p] for p in perm]
            masks = [masks[p] for p in perm]
        for k, estimate in enumerate(estimates):
            outputs[k][start:start + win] += weight * estimate
        previous_end = start + win
        if keep_masks:
            kept.append(masks)

    elapsed = 1000.0 * (time.perf_counter() - started)
    logger.debug(f"[Inference] {len(starts)} window(s), {len(outputs)} source(s) in {elapsed:.1f} ms")
    return SeparationResult(
        sources=[Waveform(o, mixture.sample_rate) for o in outputs],
        window_starts=starts,
        wcfg=wcfg,
        backend=backend.name,
        elapsed_ms=elapsed,
        masks=kept if keep_masks else None,
    )


def enhance_clip(mixture: Waveform, target: FaceTrack, backend: SeparationBackend,
                 wcfg: WindowConfig, seg: SegmentSpec, face_seed: Optional[int] = None) -> SeparationResult:
    """Single output stream for the target speaker only."""
    if isinstance(backend, ModelBackend) and backend.model.cfg.dedicated:
        raise ConfigError("enhancement needs a general_single_speaker model")
    if isinstance(backend, ModelBackend) and backend.model.cfg.audio_only:
        raise ConfigError("enhancement needs a visually conditioned model to pick the target speaker")
    result = separate_clip(mixture, [target], backend, wcfg, seg, face_seed)
    result.sources = result.sources[:1]
    return result


def assign_best_permutation(estimates: Sequence[Waveform], references: Sequence[Waveform]) -> Tuple[int, ...]:
    """perm[k] is the estimate assigned to reference k, maximizing mean SDR."""
    if len(estimates) != len(references):
        raise ShapeError(f"{len(estimates)} estimates for {len(references)} references")
    if len(estimates) > MAX_PIT_SOURCES:
        raise InvalidInput(f"exhaustive assignment supports up to {MAX_PIT_SOURCES} sources")
    best_perm, best_score = None, -np.inf
    for perm in permutations(range(len(references))):
        metrics = bss_eval(references, [estimates[p] for p in perm])
        score = float(np.mean([m.sdr for m in metrics]))
        if score > best_score:
            best_perm, best_score = perm, score
    return tuple(best_perm)


def write_outputs(result: SeparationResult, clip_id: str, out_dir: Path,
                  extra: Optional[Dict[str, Any]] = None) -> List[Path]:
    """Write `<clip_id>.spk<k>.wav` per source and a `<clip_id>.json` sidecar."""
    out_dir = Path(out_dir)
    paths = [write_wav(out_dir / f"{clip_id}.spk{k}.wav", source) for k, source in enumerate(result.sources)]
    PersistenceService.save_sidecar(out_dir / f"{clip_id}.json", {
        'clip_id': clip_id,
        'outputs': [p.name for p in paths],
        **result.metadata(),
        **(extra or {}),
    })
    logger.info(f"[Inference] Wrote {len(paths)} source(s) for {clip_id} to {out_dir}")
    return paths
