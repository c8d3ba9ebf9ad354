"""WAV and image I/O for clips, mouth ROIs and face crops."""

import logging
from functools import lru_cache
from pathlib import Path
from typing import List, Union

import numpy as np
import soundfile as sf
from PIL import Image

from core.errors import InvalidInput, IoError, MissingAsset
from services.dsp import Waveform

logger = logging.getLogger(__name__)

REQUIRED_SAMPLE_RATE = 16000
IMAGE_SUFFIXES = {'.png', '.jpg', '.jpeg', '.bmp'}

PathLike = Union[str, Path]


# ==================== Audio ====================

def read_wav(path: PathLike, sample_rate: int = REQUIRED_SAMPLE_RATE) -> Waveform:
    """Read a PCM16 mono WAV at the required rate."""
    path = Path(path)
    if not path.exists():
        raise MissingAsset([str(path)])
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise InvalidInput(f"{path}: not a readable WAV file ({e})")
    if info.samplerate != sample_rate:
        raise InvalidInput(f"{path}: sample rate {info.samplerate} Hz, expected {sample_rate} Hz")
    if info.channels != 1:
        raise InvalidInput(f"{path}: {info.channels} channels, expected mono")
    if info.subtype != 'PCM_16':
        raise InvalidInput(f"{path}: subtype {info.subtype}, expected PCM_16")
    samples, _ = sf.read(str(path), dtype='float64', always_2d=False)
    return Waveform(samples, sample_rate)


def write_wav(path: PathLike, waveform: Waveform) -> Path:
    """Write as PCM16; samples outside [-1, 1] are clipped by quantization."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        clipped = np.clip(waveform.samples, -1.0, 1.0)
        if np.any(clipped != waveform.samples):
            logger.warning(f"[AudioIO] Clipping {path.name} to [-1, 1]")
        sf.write(str(path), clipped, waveform.sample_rate, subtype='PCM_16')
    except OSError as e:
        raise IoError(f"failed to write {path}: {e}")
    return path


# ==================== Images ====================

def list_images(directory: PathLike) -> List[Path]:
    """Image files of a directory in lexicographic filename order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingAsset([str(directory)])
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@lru_cache(maxsize=4096)
def _load_image(path: str, mode: str) -> np.ndarray:
    with Image.open(path) as img:
        array = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    array.setflags(write=False)
    return array


def load_gray(path: PathLike) -> np.ndarray:
    """8-bit grayscale image as H x W float32 in [0, 1] (read-only, cached)."""
    return _load_image(str(path), 'L')


def load_rgb(path: PathLike, size: int = 0) -> np.ndarray:
    """8-bit RGB image as 3 x S x S float32 in [0, 1], resized when size is given."""
    image = _load_image(str(path), 'RGB')
    if size and image.shape[:2] != (size, size):
        image = _resize_rgb(str(path), size)
    return np.ascontiguousarray(image.transpose(2, 0, 1))


@lru_cache(maxsize=1024)
def _resize_rgb(path: str, size: int) -> np.ndarray:
    with Image.open(path) as img:
        resized = img.convert('RGB').resize((size, size), Image.Resampling.BILINEAR)
        array = np.asarray(resized, dtype=np.float32) / 255.0
    array.setflags(write=False)
    return array


def load_gray_frames(directory: PathLike) -> np.ndarray:
    """All ROI frames of a directory stacked as N x H x W."""
    frames = list_images(directory)
    if not frames:
        raise MissingAsset([f"{directory} (no images)"])
    return np.stack([load_gray(p) for p in frames])


def save_gray(path: PathLike, frame: np.ndarray) -> None:
    _save_image(path, np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8))


def save_rgb(path: PathLike, image_hwc: np.ndarray) -> None:
    _save_image(path, np.clip(np.rint(image_hwc * 255.0), 0, 255).astype(np.uint8))


def _save_image(path: PathLike, pixels: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(str(path), format='PNG', optimize=False)
    except OSError as e:
        raise IoError(f"failed to write {path}: {e}")
