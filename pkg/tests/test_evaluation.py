"""Tests for evaluation protocols, separation reports and embedding export."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from core.errors import ConfigError, InvalidInput
from services.evaluation import (
    PROTOCOLS,
    backend_factory,
    build_test_pairs,
    evaluate_separation,
    evaluate_verification,
    export_embeddings,
    mix_pair,
    protocol_manifest,
)
from services.networks import ModelConfig, build_separator


@pytest.fixture(scope='module')
def model(tiny_run):
    return build_separator(ModelConfig.from_config(tiny_run), seed=0).eval()


@pytest.fixture(scope='module')
def level_run(tiny_run):
    return tiny_run.with_overrides({'data.mix_snr_low': 0.0, 'data.mix_snr_high': 0.0})


# ---------------------------------------------------------------------------
# Protocols and pairs
# ---------------------------------------------------------------------------

class TestProtocols:
    def test_all_is_whole_manifest(self, corpus):
        assert len(protocol_manifest(corpus, 'all')) == len(corpus)

    def test_seen_heard_keeps_every_speaker(self, corpus):
        test = protocol_manifest(corpus, 'seen_heard')
        assert len(test) > 0
        assert set(test.video_ids) <= set(corpus.video_ids)

    def test_unseen_unheard_is_disjoint_from_training(self, corpus):
        held = protocol_manifest(corpus, 'unseen_unheard')
        assert 0 < len(held.video_ids) < len(corpus.video_ids)

    def test_unknown_protocol(self, corpus):
        with pytest.raises(ConfigError, match='unknown protocol'):
            protocol_manifest(corpus, 'cross_lingual')

    def test_protocol_names(self):
        assert PROTOCOLS == ('all', 'seen_heard', 'unseen_unheard')


class TestPairs:
    def test_seeded(self, corpus):
        a = build_test_pairs(corpus, 5, seed=3, snr_range_db=(-2.5, 2.5))
        b = build_test_pairs(corpus, 5, seed=3, snr_range_db=(-2.5, 2.5))
        assert a == b
        assert [p.pair_id for p in a] == list(range(5))

    def test_different_videos(self, corpus):
        for pair in build_test_pairs(corpus, 10, seed=0):
            assert pair.clip_a.video_id != pair.clip_b.video_id
            assert pair.snr_db == 0.0

    def test_needs_two_videos(self, corpus):
        with pytest.raises(InvalidInput, match='2 videos'):
            build_test_pairs(corpus.subset(['spk00']), 1, seed=0)

    def test_mix_pair_cuts_to_shorter_clip(self, corpus, tiny_seg):
        pair = build_test_pairs(corpus, 1, seed=0)[0]
        mixture, refs, tracks = mix_pair(pair, tiny_seg)
        assert all(len(r) == len(mixture) for r in refs)
        np.testing.assert_allclose(refs[0].samples + refs[1].samples, mixture.samples, atol=1e-9)
        assert len(tracks) == 2

    def test_model_backend_needs_model(self, tiny_seg):
        with pytest.raises(ConfigError, match='checkpoint'):
            backend_factory('model', tiny_seg)

    def test_unknown_backend(self, tiny_seg):
        with pytest.raises(ConfigError):
            backend_factory('ideal_binary', tiny_seg)


# ---------------------------------------------------------------------------
# Separation reports
# ---------------------------------------------------------------------------

class TestEvaluateSeparation:
    def test_oracle_report(self, corpus, level_run):
        report = evaluate_separation(corpus, level_run, backend='oracle', protocol='all', n_pairs=2)
        assert report['n_pairs'] == 2
        assert [p['pair_id'] for p in report['per_pair']] == [0, 1]
        assert report['aggregate']['sdr'] >= 15.0
        assert report['aggregate']['sdri'] > 10.0
        assert report['aggregate']['pesq'] is None
        assert report['config_digest'] == level_run.digest

    def test_mixture_baseline_has_no_improvement(self, corpus, level_run):
        report = evaluate_separation(corpus, level_run, backend='mixture', protocol='all', n_pairs=2)
        assert report['aggregate']['sdri'] == pytest.approx(0.0, abs=1e-3)
        assert all(p['permutation'] is not None for p in report['per_pair'])

    def test_workers_do_not_change_results(self, corpus, level_run):
        serial = evaluate_separation(corpus, level_run, backend='oracle', protocol='all', n_pairs=3)
        pooled = evaluate_separation(corpus, level_run, backend='oracle', protocol='all', n_pairs=3, workers=2)
        assert serial['per_pair'] == pooled['per_pair']

    def test_model_backend(self, corpus, level_run, model):
        report = evaluate_separation(corpus, level_run, backend='model', model=model, protocol='all', n_pairs=1)
        assert report['backend'] == 'model'
        assert np.isfinite(report['aggregate']['sdr'])
        assert report['per_pair'][0]['permutation'] is None

    def test_audio_only_model_scored_under_best_assignment(self, corpus, level_run, model):
        audio_only = build_separator(replace(model.cfg, visual_feature='none'), seed=0).eval()
        report = evaluate_separation(corpus, level_run, backend='model', model=audio_only, protocol='all',
                                     n_pairs=1)
        permutation = report['per_pair'][0]['permutation']
        assert sorted(permutation) == [0, 1]
        assert np.isfinite(report['aggregate']['sdr'])

    def test_extreme_pairs(self, corpus, level_run):
        report = evaluate_separation(corpus, level_run, backend='oracle', protocol='all', n_pairs=4)
        assert len(report['best_pairs']) == 3
        assert len(report['worst_pairs']) == 3

    def test_seen_heard_protocol(self, corpus, level_run):
        report = evaluate_separation(corpus, level_run, backend='oracle', protocol='seen_heard', n_pairs=1)
        assert report['protocol'] == 'seen_heard'
        assert report['per_pair'][0]['clip_a'].endswith('_c01')


# ---------------------------------------------------------------------------
# Verification and embeddings
# ---------------------------------------------------------------------------

class TestEmbeddings:
    def test_verification_report(self, corpus, model, tiny_seg):
        report = evaluate_verification(corpus, model, tiny_seg)
        assert report.n_pairs == len(corpus) ** 2
        assert 0.0 <= report.auc <= 1.0
        assert 0.0 <= report.eer <= 1.0

    def test_verification_needs_face_stream(self, corpus, tiny_run, tiny_seg):
        cfg = ModelConfig.from_config(tiny_run.with_overrides({'model.visual_feature': 'lip_motion'}))
        with pytest.raises(ConfigError, match='facial'):
            evaluate_verification(corpus, build_separator(cfg).eval(), tiny_seg)

    def test_export_csv(self, corpus, model, tiny_seg, tmp_path):
        out = tmp_path / 'emb.csv'
        rows = export_embeddings(model, corpus, out, tiny_seg, 'abc123', 7)
        assert rows == 2 * len(corpus)
        lines = out.read_text().splitlines()
        assert lines[0] == '# config_digest=abc123 seed=7'
        table = list(csv.reader(lines[1:]))
        assert table[0][:3] == ['clip_id', 'video_id', 'modality']
        assert len(table[0]) == 3 + model.cfg.embed_dim
        assert {row[2] for row in table[1:]} == {'face', 'voice'}
        values = np.array([float(v) for v in table[1][3:]])
        assert np.linalg.norm(values) == pytest.approx(1.0, abs=1e-5)
