"""Shared fixtures: a tiny synthetic corpus and the matching run settings."""

from pathlib import Path

import pytest

from core.config import RunConfig
from services.fixtures import make_synthetic_fixture
from services.manifest import load_manifest
from services.tuples import SegmentSpec


@pytest.fixture(scope='session')
def tiny_run() -> RunConfig:
    return RunConfig.from_preset('tiny')


@pytest.fixture(scope='session')
def tiny_seg(tiny_run) -> SegmentSpec:
    return SegmentSpec.from_config(tiny_run)


@pytest.fixture(scope='session')
def corpus_dir(tmp_path_factory) -> Path:
    """Four speakers, two clips each, 2 s per clip, plus two noise clips."""
    root = tmp_path_factory.mktemp('corpus')
    make_synthetic_fixture(7, 4, 2, root, duration=2.0, noise_clips=2)
    return root


@pytest.fixture(scope='session')
def corpus(corpus_dir):
    return load_manifest(str(corpus_dir / 'manifest.jsonl'))
