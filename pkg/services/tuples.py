"""Two-mixture training tuples: sampling, enhancement noise, and batching.

A tuple holds x1 = sA1 + g1*sB and x2 = sA2 + g2*sB, where sA1 and sA2 come
from the same video and sB from a different one, together with the four
ground-truth complex masks and the visual inputs of each speaker.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.config import RunConfig
from core.errors import DegenerateSource, InvalidInput, SamplingExhausted
from services.dsp import (
    ComplexMask,
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    compute_cirm,
    mix_waveforms,
    stft,
)
from services.manifest import Manifest, ManifestEntry
from services.visuals import (
    CorruptionSpec,
    FaceTrack,
    FaceTrackInput,
    corrupt_rois,
    crop_rois,
    stack_faces,
    stack_rois,
)
from utils.audio_io import read_wav

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int]]
MASK_ORDER = ('A1', 'A2', 'B1', 'B2')


# ==================== Data Classes ====================

@dataclass(frozen=True)
class SegmentSpec:
    """Segment geometry shared by the data engine and the separator."""
    n_frames: int = 64
    fps: int = 25
    sample_rate: int = 16000
    stft: StftConfig = field(default_factory=StftConfig)
    roi_size: int = 88
    face_size: int = 224
    mask_bound: float = 5.0

    @property
    def spec_frames(self) -> int:
        return 4 * self.n_frames

    @property
    def segment_samples(self) -> int:
        """(4N - 1) * hop samples, i.e. 40800 at the default geometry."""
        return (self.spec_frames - 1) * self.stft.hop

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate // self.fps

    @property
    def duration(self) -> float:
        return self.segment_samples / self.sample_rate

    @classmethod
    def from_config(cls, run: RunConfig) -> 'SegmentSpec':
        return cls(
            n_frames=run['model.n_frames'],
            fps=run['data.fps'],
            sample_rate=run['data.sample_rate'],
            stft=StftConfig.from_settings(run.section('stft')),
            roi_size=run['model.roi_size'],
            face_size=run['model.face_size'],
            mask_bound=run['model.mask_bound'],
        )


@dataclass
class SamplingOptions:
    """Knobs for sample_training_tuple."""
    snr_range_db: Tuple[float, float] = (-2.5, 2.5)
    corruption: bool = False
    max_shift: float = 1.0
    max_occlusion: float = 1.0
    augment: bool = True
    max_retries: int = 20

    @classmethod
    def from_config(cls, run: RunConfig) -> 'SamplingOptions':
        return cls(
            snr_range_db=(run['data.mix_snr_low'], run['data.mix_snr_high']),
            corruption=run['data.corruption'],
            max_shift=run['data.max_shift'],
            max_occlusion=run['data.max_occlusion'],
            augment=run['data.augment'],
            max_retries=run['data.max_retries'],
        )


@dataclass(frozen=True)
class TrainingTuple:
    """Two mixtures sharing speaker B, with sources, spectra and target masks."""
    x1: Waveform
    x2: Waveform
    sA1: Waveform
    sA2: Waveform
    sB: Waveform
    b_gains: Tuple[float, float]
    X1: ComplexSpectrogram
    X2: ComplexSpectrogram
    gt_masks: Dict[str, ComplexMask]
    faces_A: Tuple[FaceTrackInput, FaceTrackInput]
    faces_B: Tuple[FaceTrackInput, FaceTrackInput]
    noise: Optional[Tuple[Waveform, Waveform]] = None
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def sB1(self) -> Waveform:
        return self.sB.scaled(self.b_gains[0])

    @property
    def sB2(self) -> Waveform:
        return self.sB.scaled(self.b_gains[1])

    def masks_in_order(self) -> List[ComplexMask]:
        return [self.gt_masks[k] for k in MASK_ORDER]


@dataclass
class _Cut:
    entry: ManifestEntry
    start_frame: int
    audio: Waveform
    track: FaceTrack


# ==================== Clip Access ====================

@lru_cache(maxsize=256)
def load_clip(entry: ManifestEntry, sample_rate: int, fps: int) -> Tuple[Waveform, FaceTrack]:
    """Audio and visual stream of a clip (cached; treat results as read-only)."""
    return read_wav(entry.audio_path, sample_rate), FaceTrack.load(entry.roi_dir, entry.face_dir, fps)


def _max_start_frame(audio: Waveform, track: FaceTrack, seg: SegmentSpec) -> int:
    by_audio = (len(audio) - seg.segment_samples) // seg.samples_per_frame
    by_video = track.rois.shape[0] - seg.n_frames
    return min(by_audio, by_video)


def _frames_per_segment(seg: SegmentSpec) -> int:
    return -(-seg.segment_samples // seg.samples_per_frame)


def _cut(entry: ManifestEntry, start_frame: int, audio: Waveform, track: FaceTrack,
         seg: SegmentSpec) -> _Cut:
    start = start_frame * seg.samples_per_frame
    return _Cut(entry, start_frame, audio.slice(start, start + seg.segment_samples), track)


def _visual_input(cut: _Cut, seg: SegmentSpec, rng: np.random.Generator,
                  options: SamplingOptions) -> FaceTrackInput:
    frames = cut.track.segment(cut.start_frame, seg.n_frames)
    rois = crop_rois(frames, seg.roi_size, rng if options.augment else None)
    # One face image randomly sampled from the face track
    face = cut.track.face(seg.face_size, rng)
    visual = FaceTrackInput(rois, face)
    if options.corruption:
        spec = CorruptionSpec.sample(rng, options.max_shift, options.max_occlusion)
        visual = corrupt_rois(visual, spec, int(rng.integers(2 ** 31)), seg.fps)
    return visual


def _seed_sequence(manifest: Manifest, rng_seed: SeedLike) -> np.random.SeedSequence:
    seeds = [rng_seed] if isinstance(rng_seed, (int, np.integer)) else list(rng_seed)
    return np.random.SeedSequence([int(manifest.digest[:16], 16)] + [int(s) for s in seeds])


def _cut_two_from_video(clips: List[ManifestEntry], seg: SegmentSpec,
                        rng: np.random.Generator) -> Optional[Tuple[_Cut, _Cut]]:
    if len(clips) >= 2:
        first, second = (clips[i] for i in rng.choice(len(clips), size=2, replace=False))
        cuts = []
        for entry in (first, second):
            audio, track = load_clip(entry, seg.sample_rate, seg.fps)
            limit = _max_start_frame(audio, track, seg)
            if limit < 0:
                return None
            cuts.append(_cut(entry, int(rng.integers(limit + 1)), audio, track, seg))
        return cuts[0], cuts[1]

    entry = clips[0]
    audio, track = load_clip(entry, seg.sample_rate, seg.fps)
    limit = _max_start_frame(audio, track, seg)
    gap = _frames_per_segment(seg)
    if limit < gap:
        return None
    start1 = int(rng.integers(limit - gap + 1))
    start2 = int(rng.integers(start1 + gap, limit + 1))
    return _cut(entry, start1, audio, track, seg), _cut(entry, start2, audio, track, seg)


def _cut_one_from_video(clips: List[ManifestEntry], seg: SegmentSpec,
                        rng: np.random.Generator) -> Optional[_Cut]:
    entry = clips[int(rng.integers(len(clips)))]
    audio, track = load_clip(entry, seg.sample_rate, seg.fps)
    limit = _max_start_frame(audio, track, seg)
    if limit < 0:
        return None
    return _cut(entry, int(rng.integers(limit + 1)), audio, track, seg)


def _masks(sources: Dict[str, Waveform], X1: ComplexSpectrogram, X2: ComplexSpectrogram,
           seg: SegmentSpec) -> Dict[str, ComplexMask]:
    mixture_of = {'A1': X1, 'B1': X1, 'A2': X2, 'B2': X2}
    return {
        key: compute_cirm(stft(sources[key], seg.stft), mixture_of[key], seg.mask_bound)
        for key in MASK_ORDER
    }


# ==================== Operations ====================

def sample_training_tuple(manifest: Manifest, rng_seed: SeedLike,
                          options: Optional[SamplingOptions] = None,
                          seg: Optional[SegmentSpec] = None) -> TrainingTuple:
    """Draw one training tuple; deterministic given (manifest digest, rng_seed).

    Raises:
        InvalidInput: Fewer than two videos in the manifest
        SamplingExhausted: No usable material after options.max_retries attempts
    """
    options = options or SamplingOptions()
    seg = seg or SegmentSpec()
    videos = manifest.video_ids
    if len(videos) < 2:
        raise InvalidInput(f"need at least 2 distinct video_ids, manifest has {len(videos)}")

    rng = np.random.default_rng(_seed_sequence(manifest, rng_seed))
    for attempt in range(options.max_retries):
        video_a = videos[int(rng.integers(len(videos)))]
        others = [v for v in videos if v != video_a]
        video_b = others[int(rng.integers(len(others)))]

        pair = _cut_two_from_video(manifest.by_video[video_a], seg, rng)
        cut_b = _cut_one_from_video(manifest.by_video[video_b], seg, rng)
        if pair is None or cut_b is None:
            logger.debug(f"[Sampler] Attempt {attempt}: insufficient material in {video_a}/{video_b}")
            continue
        cut_a1, cut_a2 = pair

        low, high = options.snr_range_db
        try:
            x1, g1 = mix_waveforms(cut_a1.audio, cut_b.audio, float(rng.uniform(low, high)))
            x2, g2 = mix_waveforms(cut_a2.audio, cut_b.audio, float(rng.uniform(low, high)))
        except DegenerateSource:
            logger.debug(f"[Sampler] Attempt {attempt}: silent segment in {video_b}")
            continue

        visual_a1 = _visual_input(cut_a1, seg, rng, options)
        visual_a2 = _visual_input(cut_a2, seg, rng, options)
        visual_b = _visual_input(cut_b, seg, rng, options)

        X1, X2 = stft(x1, seg.stft), stft(x2, seg.stft)
        sources = {
            'A1': cut_a1.audio,
            'A2': cut_a2.audio,
            'B1': cut_b.audio.scaled(g1),
            'B2': cut_b.audio.scaled(g2),
        }
        return TrainingTuple(
            x1=x1, x2=x2,
            sA1=cut_a1.audio, sA2=cut_a2.audio, sB=cut_b.audio,
            b_gains=(g1, g2),
            X1=X1, X2=X2,
            gt_masks=_masks(sources, X1, X2, seg),
            faces_A=(visual_a1, visual_a2),
            faces_B=(visual_b, visual_b),
            meta={
                'video_a': video_a,
                'video_b': video_b,
                'clips': [cut_a1.entry.clip_id, cut_a2.entry.clip_id, cut_b.entry.clip_id],
                'start_frames': [cut_a1.start_frame, cut_a2.start_frame, cut_b.start_frame],
            },
        )

    raise SamplingExhausted(f"no usable tuple after {options.max_retries} attempts")


def add_enhancement_noise(t: TrainingTuple, noise_pool: Sequence[Waveform],
                          snr_db: Optional[float], rng_seed: SeedLike,
                          seg: Optional[SegmentSpec] = None,
                          snr_range_db: Tuple[float, float] = (-5.0, 5.0)) -> TrainingTuple:
    """Add an independent non-speech noise segment to each mixture.

    snr_db is relative to the speech mixture; +inf leaves the tuple unchanged
    and None draws it uniformly from snr_range_db per mixture. Target masks
    are recomputed against the noisy mixtures.
    """
    if snr_db is not None and np.isposinf(snr_db):
        return t
    if not noise_pool:
        raise InvalidInput("noise pool is empty")
    seg = seg or SegmentSpec()
    n = len(t.x1)
    if any(len(clip) < n for clip in noise_pool):
        raise InvalidInput(f"noise clips must hold at least {n} samples")

    seeds = [rng_seed] if isinstance(rng_seed, (int, np.integer)) else list(rng_seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(s) for s in seeds] + [0x6E6F697365]))
    noisy: List[Waveform] = []
    scaled_noise: List[Waveform] = []
    for mixture in (t.x1, t.x2):
        clip = noise_pool[int(rng.integers(len(noise_pool)))]
        offset = int(rng.integers(len(clip) - n + 1))
        segment = clip.slice(offset, offset + n)
        level = float(rng.uniform(*snr_range_db)) if snr_db is None else float(snr_db)
        mixed, gain = mix_waveforms(mixture, segment, level)
        noisy.append(mixed)
        scaled_noise.append(segment.scaled(gain))

    X1, X2 = stft(noisy[0], seg.stft), stft(noisy[1], seg.stft)
    sources = {'A1': t.sA1, 'A2': t.sA2, 'B1': t.sB1, 'B2': t.sB2}
    return replace(
        t,
        x1=noisy[0], x2=noisy[1],
        X1=X1, X2=X2,
        gt_masks=_masks(sources, X1, X2, seg),
        noise=(scaled_noise[0], scaled_noise[1]),
    )


def load_noise_pool(paths: Sequence[str], sample_rate: int = 16000) -> List[Waveform]:
    pool = [read_wav(p, sample_rate) for p in paths]
    logger.info(f"[Sampler] Loaded {len(pool)} noise clip(s)")
    return pool


# ==================== Batching ====================

@dataclass
class TupleBatch:
    """Stacked arrays for one optimization step.

    Visual and mask axes follow the order A1, B1, A2, B2: the speaker pairs
    of mixture 1 then mixture 2.
    """
    X1: np.ndarray        # B x 2 x F x T
    X2: np.ndarray        # B x 2 x F x T
    gt: np.ndarray        # B x 4 x 2 x F x T, order A1, B1, A2, B2
    rois: np.ndarray      # B x 4 x N x H x W
    faces: np.ndarray     # B x 4 x 3 x S x S

    def __len__(self) -> int:
        return int(self.X1.shape[0])


BATCH_ORDER = ('A1', 'B1', 'A2', 'B2')


def collate_tuples(tuples: Sequence[TrainingTuple]) -> TupleBatch:
    if not tuples:
        raise InvalidInput("cannot collate an empty batch")
    gt, rois, faces = [], [], []
    for t in tuples:
        visuals = {'A1': t.faces_A[0], 'A2': t.faces_A[1], 'B1': t.faces_B[0], 'B2': t.faces_B[1]}
        gt.append(np.stack([t.gt_masks[k].stacked() for k in BATCH_ORDER]))
        rois.append(stack_rois([visuals[k] for k in BATCH_ORDER]))
        faces.append(stack_faces([visuals[k] for k in BATCH_ORDER]))
    return TupleBatch(
        X1=np.stack([t.X1.stacked() for t in tuples]).astype(np.float32),
        X2=np.stack([t.X2.stacked() for t in tuples]).astype(np.float32),
        gt=np.stack(gt).astype(np.float32),
        rois=np.stack(rois).astype(np.float32),
        faces=np.stack(faces).astype(np.float32),
    )
