"""Persistence service for checkpoints, JSON artifacts and JSON-Lines logs."""

import json
import logging
import os
import pickle
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import torch

from core.errors import IncompatibleCheckpoint, IoError, MissingAsset, ParseError
from core.config import settings_digest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
CHECKPOINT_FORMAT = 'avsep-checkpoint/1'
CHECKPOINT_KEYS = ('format', 'config_digest', 'model_config', 'step', 'model', 'optimizer', 'rng')


class PersistenceService:
    """Handles all on-disk artifact operations."""

    # ==================== Checkpoints ====================

    @staticmethod
    def save_checkpoint(payload: Dict[str, Any], path: PathLike) -> Path:
        """Write a checkpoint container atomically.

        The payload must carry the model config and its digest; the digest
        is re-derived on load to detect edited or mismatched files.
        """
        path = Path(path)
        missing = [k for k in CHECKPOINT_KEYS if k != 'format' and k not in payload]
        if missing:
            raise ParseError(f"checkpoint payload lacks {', '.join(missing)}")
        data = dict(payload, format=CHECKPOINT_FORMAT)
        tmp = path.with_suffix(path.suffix + '.tmp')
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(data, str(tmp))
            os.replace(tmp, path)
        except OSError as e:
            raise IoError(f"failed to write checkpoint {path}: {e}")
        logger.debug(f"[Persistence] Saved checkpoint at step {payload['step']} to {path}")
        return path

    @staticmethod
    def load_checkpoint(path: PathLike, expected_digest: Optional[str] = None) -> Dict[str, Any]:
        """Read and validate a checkpoint container.

        Raises:
            MissingAsset: File does not exist
            ParseError: File is not a readable checkpoint
            IncompatibleCheckpoint: Stored digest does not match the stored
                config, or differs from expected_digest
        """
        path = Path(path)
        if not path.exists():
            raise MissingAsset([str(path)])
        try:
            data = torch.load(str(path), map_location='cpu', weights_only=False)
        except (RuntimeError, EOFError, pickle.UnpicklingError, ValueError) as e:
            raise ParseError(f"{path}: not a readable checkpoint ({e})")
        if not isinstance(data, dict) or data.get('format') != CHECKPOINT_FORMAT:
            raise ParseError(f"{path}: unknown checkpoint format")
        missing = [k for k in CHECKPOINT_KEYS if k not in data]
        if missing:
            raise ParseError(f"{path}: checkpoint lacks {', '.join(missing)}")

        recomputed = settings_digest(data['model_config'])
        if recomputed != data['config_digest']:
            raise IncompatibleCheckpoint(
                f"{path}: stored digest {data['config_digest'][:12]} does not match its config ({recomputed[:12]})"
            )
        if expected_digest is not None and expected_digest != data['config_digest']:
            raise IncompatibleCheckpoint(
                f"{path}: trained with config {data['config_digest'][:12]}, requested {expected_digest[:12]}"
            )
        return data

    # ==================== JSON Artifacts ====================

    @staticmethod
    def save_json(path: PathLike, data: Dict[str, Any]) -> Path:
        """Write canonical JSON (sorted keys, two-space indent)."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, sort_keys=True)
                f.write('\n')
        except OSError as e:
            raise IoError(f"failed to write {path}: {e}")
        return path

    @staticmethod
    def load_json(path: PathLike) -> Dict[str, Any]:
        path = Path(path)
        if not path.exists():
            raise MissingAsset([str(path)])
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON in {path}: {e.msg}", line=e.lineno)

    @staticmethod
    def save_sidecar(path: PathLike, data: Dict[str, Any]) -> Optional[Path]:
        """Best-effort metadata write; failures are logged, not raised."""
        try:
            return PersistenceService.save_json(path, data)
        except IoError as e:
            logger.warning(f"[Persistence] Skipping sidecar: {e}")
            return None

    # ==================== JSON Lines ====================

    @staticmethod
    def append_jsonl(path: PathLike, record: Dict[str, Any]) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(record, sort_keys=True) + '\n')
        except OSError as e:
            raise IoError(f"failed to append to {path}: {e}")

    @staticmethod
    def iter_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
        path = Path(path)
        if not path.exists():
            raise MissingAsset([str(path)])
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, raw in enumerate(f, start=1):
                if not raw.strip():
                    continue
                try:
                    yield json.loads(raw)
                except json.JSONDecodeError as e:
                    raise ParseError(f"invalid JSON: {e.msg}", line=line_no)

    @staticmethod
    def load_jsonl(path: PathLike) -> List[Dict[str, Any]]:
        return list(PersistenceService.iter_jsonl(path))

    @staticmethod
    def truncate_jsonl(path: PathLike, max_step: int) -> None:
        """Drop log records past max_step (used when resuming from an older checkpoint)."""
        path = Path(path)
        if not path.exists():
            return
        kept = [r for r in PersistenceService.iter_jsonl(path) if r.get('step', 0) <= max_step]
        try:
            with open(path, 'w', encoding='utf-8') as f:
                for record in kept:
                    f.write(json.dumps(record, sort_keys=True) + '\n')
        except OSError as e:
            raise IoError(f"failed to rewrite {path}: {e}")
