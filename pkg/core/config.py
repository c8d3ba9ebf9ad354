"""Configuration constants, environment variable loading, and run settings."""

import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

from core.errors import ConfigError, ParseError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Process-wide configuration loaded from environment variables."""

    # Fixture cache used by `fixture` when no output directory is given
    CACHE_DIR: str = os.getenv('AVSEP_CACHE', '.avsep_cache')
    LOG_LEVEL: str = os.getenv('AVSEP_LOG_LEVEL', 'INFO').upper()
    DEFAULT_WORKERS: int = int(os.getenv('AVSEP_WORKERS', '0'))

    # Artifact names
    TRAIN_LOG_FILE: str = 'train_log.jsonl'
    LAST_CHECKPOINT_FILE: str = 'last.ckpt'
    BEST_CHECKPOINT_FILE: str = 'best.ckpt'
    MANIFEST_FILE: str = 'manifest.jsonl'

    @classmethod
    def validate(cls) -> bool:
        """Validate environment-derived settings."""
        ok = True
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL), int):
            print(f"Error: AVSEP_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level", file=sys.stderr)
            ok = False
        if cls.DEFAULT_WORKERS < 0:
            print("Error: AVSEP_WORKERS must be >= 0", file=sys.stderr)
            ok = False
        cache = Path(cls.CACHE_DIR)
        if cache.exists() and not cache.is_dir():
            print(f"Warning: AVSEP_CACHE '{cache}' exists and is not a directory", file=sys.stderr)
        return ok

    @classmethod
    def configure_logging(cls, level: Optional[str] = None) -> None:
        """Install a single stderr handler; component tags live in the messages."""
        root = logging.getLogger()
        for handler in list(root.handlers):
            root.removeHandler(handler)
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(message)s', '%H:%M:%S'))
        root.addHandler(handler)
        root.setLevel(level or cls.LOG_LEVEL)


# ==================== Run Settings ====================

DEFAULTS: Dict[str, Any] = {
    'seed': 0,
    # Separator shapes (full-scale values)
    'model.n_frames': 64,
    'model.roi_size': 88,
    'model.face_size': 224,
    'model.lip_channels': 512,
    'model.face_dim': 128,
    'model.audio_channels': 512,
    'model.mask_bound': 5.0,
    'model.mode': 'general_single_speaker',
    'model.channel_scale': 1.0,
    'model.visual_feature': 'both',
    'model.normalization': 'batch',
    # STFT
    'stft.window_length': 400,
    'stft.hop': 160,
    'stft.fft_size': 512,
    'stft.window': 'hann',
    'stft.center_pad': True,
    # Data engine
    'data.sample_rate': 16000,
    'data.fps': 25,
    'data.mix_snr_low': -2.5,
    'data.mix_snr_high': 2.5,
    'data.noise_snr_low': -5.0,
    'data.noise_snr_high': 5.0,
    'data.corruption': False,
    'data.max_shift': 1.0,
    'data.max_occlusion': 1.0,
    'data.enhancement': False,
    'data.noise_dir': '',
    'data.augment': True,
    'data.max_retries': 20,
    'data.val_fraction': 0.1,
    # Objectives
    'loss.lambda1': 0.01,
    'loss.lambda2': 0.01,
    'loss.margin': 0.5,
    'loss.mask': True,
    'loss.cross_modal': True,
    'loss.consistency': True,
    'loss.mask_reduction': 'mean',
    # Training
    'train.learning_rate': 1e-4,
    'train.weight_decay': 1e-4,
    'train.batch_size': 128,
    'train.max_steps': 5000,
    'train.checkpoint_interval': 500,
    'train.lr_decay_every': 0,
    'train.lr_decay_factor': 0.1,
    'train.divergence_limit': 1e6,
    'train.workers': 0,
    # Inference (hop 0 means half a window)
    'infer.hop': 0.0,
    'infer.blend': 'crossfade_hann',
    # Evaluation
    'eval.n_pairs': 50,
    'eval.protocol': 'unseen_unheard',
}

PRESETS: Dict[str, Dict[str, Any]] = {
    'paper': {},
    'desk': {
        'model.channel_scale': 0.25,
        'train.batch_size': 8,
    },
    'tiny': {
        'model.channel_scale': 0.1,
        'model.n_frames': 8,
        'model.roi_size': 24,
        'model.face_size': 32,
        'model.face_dim': 16,
        'train.batch_size': 2,
        'train.max_steps': 20,
        'train.checkpoint_interval': 10,
        'eval.n_pairs': 4,
    },
}


def _coerce(key: str, value: Any) -> Any:
    """Coerce a value (possibly a CLI string) to the type of its default."""
    default = DEFAULTS[key]
    if isinstance(value, type(default)) and not (isinstance(default, int) and isinstance(value, bool)):
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ('1', 'true', 'yes', 'on'):
                    return True
                if lowered in ('0', 'false', 'no', 'off'):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"setting '{key}' expects {type(default).__name__}, got {value!r}")


class RunConfig:
    """Effective flat settings for one run.

    Built from a preset or JSON file, then flag overrides. Every key must
    be one of DEFAULTS; the digest identifies the effective settings.
    """

    def __init__(self, settings: Optional[Mapping[str, Any]] = None):
        merged = dict(DEFAULTS)
        for key, value in (settings or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown setting '{key}'")
            merged[key] = _coerce(key, value)
        self._settings = merged

    @classmethod
    def from_preset(cls, name: str) -> 'RunConfig':
        if name not in PRESETS:
            raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(sorted(PRESETS))})")
        return cls(PRESETS[name])

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        """Load a JSON object of flat dotted keys, optionally naming a base preset."""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON in {path}: {e.msg}", line=e.lineno)
        if not isinstance(data, dict):
            raise ParseError(f"config file {path} must contain a JSON object")
        base = data.pop('preset', None)
        settings = dict(PRESETS[base]) if base in PRESETS else {}
        if base is not None and base not in PRESETS:
            raise ConfigError(f"unknown preset '{base}' in {path}")
        settings.update(data)
        return cls(settings)

    @classmethod
    def resolve(cls, spec: str) -> 'RunConfig':
        """Accept either a preset name or a path to a JSON config file."""
        if spec in PRESETS:
            return cls.from_preset(spec)
        return cls.from_file(spec)

    def with_overrides(self, overrides: Mapping[str, Any]) -> 'RunConfig':
        merged = dict(self._settings)
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown setting '{key}'")
            merged[key] = value
        return RunConfig(merged)

    def __getitem__(self, key: str) -> Any:
        if key not in self._settings:
            raise ConfigError(f"unknown setting '{key}'")
        return self._settings[key]

    def section(self, prefix: str) -> Dict[str, Any]:
        """Settings under `prefix.` with the prefix stripped."""
        head = prefix + '.'
        return {k[len(head):]: v for k, v in self._settings.items() if k.startswith(head)}

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._settings)

    @property
    def seed(self) -> int:
        return int(self._settings['seed'])

    @property
    def digest(self) -> str:
        return settings_digest(self._settings)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RunConfig) and other._settings == self._settings

    def __repr__(self) -> str:
        return f"RunConfig(digest={self.digest[:12]})"


def settings_digest(settings: Mapping[str, Any]) -> str:
    """SHA-256 over canonical JSON (sorted keys, no whitespace)."""
    canonical = json.dumps(dict(settings), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
