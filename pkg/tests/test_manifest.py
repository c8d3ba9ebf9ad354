"""Tests for manifest loading, validation and splits."""

import json

import pytest

from core.errors import DuplicateId, InvalidInput, MissingAsset, ParseError
from services.manifest import (
    Manifest,
    ManifestEntry,
    entries_digest,
    load_manifest,
    split_manifest,
    split_seen_heard,
    write_manifest,
)


def _entry(clip_id: str, video_id: str) -> ManifestEntry:
    return ManifestEntry(clip_id, f"audio/{clip_id}.wav", f"roi/{clip_id}", f"face/{clip_id}", video_id)


def _offline(n_videos: int, clips: int = 1) -> Manifest:
    entries = [_entry(f"v{v}_c{c}", f"v{v}") for v in range(n_videos) for c in range(clips)]
    return Manifest(entries, entries_digest(entries))


class TestLoad:
    def test_loads_fixture(self, corpus):
        assert len(corpus) == 8
        assert corpus.video_ids == ['spk00', 'spk01', 'spk02', 'spk03']
        assert len(corpus.by_video['spk02']) == 2

    def test_paths_resolved_against_manifest(self, corpus, corpus_dir):
        assert corpus[0].audio_path.startswith(str(corpus_dir))

    def test_digest_independent_of_location(self, corpus_dir, tmp_path):
        lines = (corpus_dir / 'manifest.jsonl').read_text()
        (tmp_path / 'manifest.jsonl').write_text(lines)
        moved = load_manifest(str(tmp_path / 'manifest.jsonl'), check_media=False)
        assert moved.digest == load_manifest(str(corpus_dir / 'manifest.jsonl')).digest

    def test_missing_field_reports_line(self, tmp_path):
        path = tmp_path / 'm.jsonl'
        good = _entry('a', 'v').to_json()
        bad = {k: v for k, v in good.items() if k != 'face_dir'}
        path.write_text(json.dumps(good) + '\n' + json.dumps(bad) + '\n')
        with pytest.raises(ParseError, match='line 2') as info:
            load_manifest(str(path), check_media=False)
        assert info.value.field == 'face_dir'

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'm.jsonl'
        path.write_text('{"clip_id": \n')
        with pytest.raises(ParseError, match='line 1'):
            load_manifest(str(path), check_media=False)

    def test_unexpected_field(self, tmp_path):
        path = tmp_path / 'm.jsonl'
        record = dict(_entry('a', 'v').to_json(), speaker='x')
        path.write_text(json.dumps(record) + '\n')
        with pytest.raises(ParseError, match="unexpected field 'speaker'"):
            load_manifest(str(path), check_media=False)

    def test_duplicate_clip_id(self, tmp_path):
        path = tmp_path / 'm.jsonl'
        write_manifest(path, [_entry('a', 'v1'), _entry('a', 'v2')])
        with pytest.raises(DuplicateId, match='line 2'):
            load_manifest(str(path), check_media=False)

    def test_missing_media_lists_every_path(self, tmp_path):
        path = tmp_path / 'm.jsonl'
        write_manifest(path, [_entry('a', 'v1'), _entry('b', 'v2')])
        with pytest.raises(MissingAsset) as info:
            load_manifest(str(path))
        assert len(info.value.paths) == 6

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingAsset):
            load_manifest(str(tmp_path / 'absent.jsonl'))

    def test_min_duration(self, corpus_dir):
        with pytest.raises(InvalidInput, match='shorter than'):
            load_manifest(str(corpus_dir / 'manifest.jsonl'), min_duration=3.0)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / 'm.jsonl'
        path.write_text('\n' + json.dumps(_entry('a', 'v').to_json()) + '\n\n')
        assert len(load_manifest(str(path), check_media=False)) == 1


class TestSplits:
    def test_split_is_disjoint_by_video(self):
        manifest = _offline(30, clips=2)
        train, held = split_manifest(manifest, 0.2)
        assert set(train.video_ids).isdisjoint(held.video_ids)
        assert len(train) + len(held) == len(manifest)
        assert held.video_ids

    def test_split_is_deterministic(self):
        manifest = _offline(30)
        assert split_manifest(manifest, 0.2)[1].video_ids == split_manifest(manifest, 0.2)[1].video_ids

    def test_split_keeps_two_training_videos(self):
        train, held = split_manifest(_offline(2), 0.9)
        assert len(train.video_ids) == 2
        assert len(held) == 0

    def test_zero_fraction_holds_nothing(self):
        train, held = split_manifest(_offline(10), 0.0)
        assert len(held) == 0
        assert len(train) == 10

    def test_seen_heard_shares_speakers(self):
        train, test = split_seen_heard(_offline(5, clips=3))
        assert train.video_ids == test.video_ids
        assert len(test) == 5
        assert len(train) == 10

    def test_seen_heard_keeps_single_clip_videos_for_training(self):
        train, test = split_seen_heard(_offline(3, clips=1))
        assert len(test) == 0
        assert len(train) == 3

    def test_subset_digest_differs(self):
        manifest = _offline(4)
        assert manifest.subset(['v0', 'v1']).digest != manifest.digest
