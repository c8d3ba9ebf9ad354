"""Manifest loading, validation and video-level splits."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import soundfile as sf

from core.errors import DuplicateId, InvalidInput, MissingAsset, ParseError

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ('clip_id', 'audio_path', 'roi_dir', 'face_dir', 'video_id')


# ==================== Data Classes ====================

@dataclass(frozen=True)
class ManifestEntry:
    """One clip: audio, mouth-ROI frames and face crops of a single speaker."""
    clip_id: str
    audio_path: str
    roi_dir: str
    face_dir: str
    video_id: str

    def to_json(self) -> Dict[str, str]:
        return asdict(self)


@dataclass
class Manifest:
    """Immutable-after-load list of entries with a per-video index."""
    entries: List[ManifestEntry]
    digest: str
    source: Optional[Path] = None
    by_video: Dict[str, List[ManifestEntry]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.by_video:
            for entry in self.entries:
                self.by_video.setdefault(entry.video_id, []).append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> ManifestEntry:
        return self.entries[index]

    @property
    def video_ids(self) -> List[str]:
        return sorted(self.by_video)

    def subset(self, video_ids: Sequence[str]) -> 'Manifest':
        """Entries of the given videos; the digest covers the kept entries."""
        keep = set(video_ids)
        entries = [e for e in self.entries if e.video_id in keep]
        return Manifest(entries, self._derived_digest(sorted(keep)), self.source)

    def filter(self, clip_ids: Sequence[str]) -> 'Manifest':
        keep = set(clip_ids)
        entries = [e for e in self.entries if e.clip_id in keep]
        return Manifest(entries, self._derived_digest(sorted(keep)), self.source)

    def _derived_digest(self, keys: List[str]) -> str:
        payload = self.digest + '|' + ','.join(keys)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


# ==================== Loading ====================

def entries_digest(entries: Sequence[ManifestEntry]) -> str:
    """Digest over entries as written (independent of where the corpus lives)."""
    hasher = hashlib.sha256()
    for entry in entries:
        hasher.update(json.dumps(entry.to_json(), sort_keys=True).encode('utf-8'))
        hasher.update(b'\n')
    return hasher.hexdigest()


def _parse_line(raw: str, line_no: int) -> Dict[str, str]:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=line_no)
    if not isinstance(record, dict):
        raise ParseError("expected a JSON object", line=line_no)
    for name in MANIFEST_FIELDS:
        if name not in record:
            raise ParseError(f"missing field '{name}'", line=line_no, field=name)
        if not isinstance(record[name], str) or not record[name]:
            raise ParseError(f"field '{name}' must be a non-empty string", line=line_no, field=name)
    extra = sorted(set(record) - set(MANIFEST_FIELDS))
    if extra:
        raise ParseError(f"unexpected field '{extra[0]}'", line=line_no, field=extra[0])
    return record


def load_manifest(path: str, check_media: bool = True, min_duration: float = 0.0) -> Manifest:
    """Load a JSON Lines manifest.

    Relative media paths are resolved against the manifest's directory.

    Args:
        path: Manifest file
        check_media: Verify that every referenced file/directory exists
        min_duration: Reject clips with less audio than this (seconds)

    Returns:
        Manifest with entries in file order and a per-video index

    Raises:
        ParseError: Malformed line or missing field (with line number)
        DuplicateId: Two entries share a clip_id
        MissingAsset: Referenced media does not exist (all paths listed)
    """
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise MissingAsset([str(manifest_path)])
    base = manifest_path.parent

    raw_entries: List[ManifestEntry] = []
    resolved: List[ManifestEntry] = []
    seen: Dict[str, int] = {}
    with open(manifest_path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            record = _parse_line(raw, line_no)
            entry = ManifestEntry(**{name: record[name] for name in MANIFEST_FIELDS})
            if entry.clip_id in seen:
                raise DuplicateId(
                    f"clip_id '{entry.clip_id}' on line {line_no} duplicates line {seen[entry.clip_id]}"
                )
            seen[entry.clip_id] = line_no
            raw_entries.append(entry)
            resolved.append(ManifestEntry(
                clip_id=entry.clip_id,
                audio_path=str(base / entry.audio_path),
                roi_dir=str(base / entry.roi_dir),
                face_dir=str(base / entry.face_dir),
                video_id=entry.video_id,
            ))

    if check_media:
        missing: List[str] = []
        for entry in resolved:
            if not Path(entry.audio_path).is_file():
                missing.append(entry.audio_path)
            for directory in (entry.roi_dir, entry.face_dir):
                if not Path(directory).is_dir():
                    missing.append(directory)
        if missing:
            raise MissingAsset(missing)
        if min_duration > 0:
            short = [e.clip_id for e in resolved if audio_duration(e.audio_path) < min_duration]
            if short:
                raise InvalidInput(
                    f"{len(short)} clip(s) shorter than {min_duration:.2f}s: {', '.join(short[:5])}"
                )

    manifest = Manifest(resolved, entries_digest(raw_entries), manifest_path)
    logger.info(f"[Manifest] Loaded {len(manifest)} clip(s) from {len(manifest.by_video)} video(s)")
    return manifest


def audio_duration(path: str) -> float:
    info = sf.info(path)
    return info.frames / info.samplerate


def write_manifest(path: Path, entries: Sequence[ManifestEntry]) -> None:
    """Write entries as JSON Lines with keys in the canonical order."""
    with open(path, 'w', encoding='utf-8') as f:
        for entry in entries:
            f.write(json.dumps({name: getattr(entry, name) for name in MANIFEST_FIELDS}) + '\n')


# ==================== Splits ====================

def _video_bucket(video_id: str) -> float:
    digest = hashlib.sha256(video_id.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') / float(1 << 64)


def split_manifest(manifest: Manifest, fraction: float = 0.1) -> Tuple[Manifest, Manifest]:
    """Hold out roughly `fraction` of videos by hash of video_id.

    At least one video is held out when fraction > 0 and more than two videos
    exist, and at least two videos always stay in the training part.
    """
    videos = manifest.video_ids
    held = [v for v in videos if _video_bucket(v) < fraction]
    if fraction > 0 and not held and len(videos) > 2:
        held = [min(videos, key=_video_bucket)]
    while len(videos) - len(held) < 2 and held:
        held.pop()
    train = [v for v in videos if v not in set(held)]
    return manifest.subset(train), manifest.subset(held)


def split_seen_heard(manifest: Manifest, clips_per_video: int = 1) -> Tuple[Manifest, Manifest]:
    """Hold out the last `clips_per_video` clips of every video with more than that many.

    The held-out part shares speakers with the training part ("seen-heard").
    """
    train_ids: List[str] = []
    test_ids: List[str] = []
    for video in manifest.video_ids:
        clips = sorted(manifest.by_video[video], key=lambda e: e.clip_id)
        if len(clips) > clips_per_video:
            train_ids.extend(e.clip_id for e in clips[:-clips_per_video])
            test_ids.extend(e.clip_id for e in clips[-clips_per_video:])
        else:
            train_ids.extend(e.clip_id for e in clips)
    return manifest.filter(train_ids), manifest.filter(test_ids)
