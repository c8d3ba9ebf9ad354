"""Visual inputs: mouth-ROI sequences, face crops, and lip corruption."""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from core.errors import AlignmentError, InvalidInput, ShapeError
from utils.audio_io import list_images, load_gray_frames, load_rgb

DEFAULT_FPS = 25


# ==================== Data Classes ====================

@dataclass(frozen=True)
class CorruptionSpec:
    """Time shift and occlusion applied to a mouth-ROI segment.

    occlusion_start of None lets corrupt_rois draw it from its seed.
    """
    time_shift: float = 0.0
    occlusion_duration: float = 0.0
    occlusion_start: Optional[int] = 0
    enabled: bool = False

    def validate(self, n_frames: int, fps: int) -> None:
        segment = n_frames / fps
        if not 0.0 <= self.time_shift <= segment:
            raise InvalidInput(f"time_shift {self.time_shift}s outside [0, {segment:.2f}]")
        if not 0.0 <= self.occlusion_duration <= segment:
            raise InvalidInput(f"occlusion_duration {self.occlusion_duration}s outside [0, {segment:.2f}]")
        if self.occlusion_start is not None and not 0 <= self.occlusion_start < n_frames:
            raise InvalidInput(f"occlusion_start {self.occlusion_start} outside [0, {n_frames})")

    @classmethod
    def sample(cls, rng: np.random.Generator, max_shift: float = 1.0,
               max_occlusion: float = 1.0) -> 'CorruptionSpec':
        """Draw shift and occlusion uniformly up to the given bounds (seconds)."""
        return cls(
            time_shift=float(rng.uniform(0.0, max_shift)),
            occlusion_duration=float(rng.uniform(0.0, max_occlusion)),
            occlusion_start=None,
            enabled=True,
        )


@dataclass(frozen=True)
class FaceTrackInput:
    """Visual conditioning for one speaker over one segment."""
    mouth_rois: np.ndarray          # N x H x W, [0, 1]
    face_image: np.ndarray          # 3 x S x S, [0, 1]
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)

    def __post_init__(self) -> None:
        if self.mouth_rois.ndim != 3:
            raise ShapeError(f"mouth_rois must be N x H x W, got {self.mouth_rois.shape}")
        if self.face_image.ndim != 3 or self.face_image.shape[0] != 3:
            raise ShapeError(f"face_image must be 3 x S x S, got {self.face_image.shape}")

    @property
    def n_frames(self) -> int:
        return int(self.mouth_rois.shape[0])


@dataclass
class FaceTrack:
    """Full-clip visual stream: every ROI frame and the face-crop paths."""
    rois: np.ndarray
    face_paths: List[str]
    fps: int = DEFAULT_FPS

    @classmethod
    def load(cls, roi_dir: str, face_dir: str, fps: int = DEFAULT_FPS) -> 'FaceTrack':
        faces = [str(p) for p in list_images(face_dir)]
        if not faces:
            raise InvalidInput(f"{face_dir}: no face images")
        return cls(load_gray_frames(roi_dir), faces, fps)

    @property
    def duration(self) -> float:
        return self.rois.shape[0] / self.fps

    def check_alignment(self, audio_duration: float, tolerance: float) -> None:
        if abs(self.duration - audio_duration) > tolerance:
            raise AlignmentError(
                f"visual stream {self.duration:.3f}s vs audio {audio_duration:.3f}s "
                f"differs by more than {tolerance:.3f}s"
            )

    def segment(self, start_frame: int, n_frames: int) -> np.ndarray:
        """n_frames ROIs from start_frame; a short tail repeats the last frame."""
        frames = self.rois[start_frame:start_frame + n_frames]
        if frames.shape[0] == 0:
            frames = self.rois[-1:]
        if frames.shape[0] < n_frames:
            pad = np.repeat(frames[-1:], n_frames - frames.shape[0], axis=0)
            frames = np.concatenate([frames, pad])
        return frames

    def face(self, face_size: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Central face crop, or a random one when rng is given."""
        if rng is None:
            index = len(self.face_paths) // 2
        else:
            index = int(rng.integers(len(self.face_paths)))
        return load_rgb(self.face_paths[index], face_size)


# ==================== ROI Preprocessing ====================

def crop_rois(frames: np.ndarray, size: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Crop N x H x W frames to size x size.

    With rng: random crop plus random horizontal flip (training). Without:
    center crop (evaluation and inference).
    """
    n, height, width = frames.shape
    if height < size or width < size:
        raise ShapeError(f"ROI frames {height}x{width} smaller than crop {size}")
    if rng is None:
        top, left = (height - size) // 2, (width - size) // 2
        return np.ascontiguousarray(frames[:, top:top + size, left:left + size])
    top = int(rng.integers(height - size + 1))
    left = int(rng.integers(width - size + 1))
    cropped = frames[:, top:top + size, left:left + size]
    if rng.random() < 0.5:
        cropped = cropped[:, :, ::-1]
    return np.ascontiguousarray(cropped)


def corrupt_rois(f: FaceTrackInput, spec: CorruptionSpec, rng_seed: int = 0,
                 fps: int = DEFAULT_FPS) -> FaceTrackInput:
    """Shift mouth ROIs circularly in time and occlude a span with the mean frame.

    The face image is left untouched. A disabled spec returns the input.
    """
    if not spec.enabled:
        return f
    n = f.n_frames
    spec.validate(n, fps)
    frames = np.roll(f.mouth_rois, int(round(spec.time_shift * fps)), axis=0)

    occluded = min(int(round(spec.occlusion_duration * fps)), n)
    if occluded > 0:
        start = spec.occlusion_start
        if start is None:
            rng = np.random.default_rng(rng_seed)
            start = int(rng.integers(n - occluded + 1))
        start = min(start, n - occluded)
        mean_frame = frames.mean(axis=0, keepdims=True)
        frames = frames.copy()
        frames[start:start + occluded] = mean_frame
    return replace(f, mouth_rois=frames.astype(f.mouth_rois.dtype, copy=False), corruption=spec)


def stack_rois(inputs: Sequence[FaceTrackInput]) -> np.ndarray:
    """B x N x H x W batch of ROI sequences."""
    return np.stack([i.mouth_rois for i in inputs]).astype(np.float32)


def stack_faces(inputs: Sequence[FaceTrackInput]) -> np.ndarray:
    """B x 3 x S x S batch of face images."""
    return np.stack([i.face_image for i in inputs]).astype(np.float32)
