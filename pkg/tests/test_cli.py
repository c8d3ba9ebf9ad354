"""End-to-end tests for the command dispatcher."""

import csv
import json
from typing import get_type_hints

import pytest

from core.cli import EXIT_DOMAIN_ERROR, EXIT_OK, EXIT_USAGE, Dispatcher, dispatch
from core.errors import ConfigError
from modules.separation import PreparedClip, SeparationCommands
from services.fixtures import make_synthetic_fixture
from services.manifest import load_manifest
from services.trainer import load_checkpoint


@pytest.fixture(scope='module')
def trained(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp('train')
    code = dispatch(['train', '--config', 'tiny', '--manifest', str(corpus_dir / 'manifest.jsonl'),
                     '--out', str(out), '--steps', '1', '--seed', '0'])
    assert code == EXIT_OK
    return out / 'last.ckpt'


class TestDispatcher:
    def test_help(self, capsys):
        assert dispatch(['--help']) == EXIT_OK
        assert 'eval-sep' in capsys.readouterr().out

    def test_no_command(self):
        assert dispatch([]) == EXIT_USAGE

    def test_unknown_command(self):
        assert dispatch(['transcribe']) == EXIT_USAGE

    def test_missing_required_flag(self):
        assert dispatch(['train', '--out', 'x']) == EXIT_USAGE

    def test_every_command_registered(self):
        assert set(Dispatcher().commands) == {
            'fixture', 'sample', 'train', 'check', 'separate', 'enhance',
            'eval-sep', 'eval-verify', 'export-embeddings',
        }

    def test_prepare_return_type(self):
        assert get_type_hints(SeparationCommands._prepare)['return'] == PreparedClip

    def test_parse_overrides(self):
        assert Dispatcher.parse_overrides(['a.b=1', 'c = x ']) == {'a.b': '1', 'c': 'x'}
        with pytest.raises(ConfigError):
            Dispatcher.parse_overrides(['novalue'])

    def test_bad_override_is_domain_error(self, tmp_path, capsys):
        code = dispatch(['fixture', '--out', str(tmp_path), '--set', 'model.no_such_key=1'])
        assert code == EXIT_DOMAIN_ERROR
        assert capsys.readouterr().err.startswith('[Error]')


class TestDataCommands:
    def test_fixture(self, tmp_path, capsys):
        code = dispatch(['fixture', '--out', str(tmp_path), '--speakers', '3', '--clips', '2',
                         '--duration', '2.0', '--seed', '5'])
        assert code == EXIT_OK
        manifest = load_manifest(tmp_path / 'manifest.jsonl')
        assert len(manifest) == 6
        assert 'Fixture: 6 clip(s) from 3 speaker(s)' in capsys.readouterr().out

    def test_sample(self, corpus_dir, tmp_path):
        code = dispatch(['sample', '--config', 'tiny', '--manifest', str(corpus_dir / 'manifest.jsonl'),
                         '--out', str(tmp_path)])
        assert code == EXIT_OK
        assert (tmp_path / 'x1.wav').exists()

    def test_clips_shorter_than_a_segment_are_rejected(self, tmp_path, capsys):
        make_synthetic_fixture(1, 2, 1, tmp_path, duration=0.2)
        manifest = str(tmp_path / 'manifest.jsonl')
        code = dispatch(['sample', '--config', 'tiny', '--manifest', manifest, '--out', str(tmp_path / 'x')])
        assert code == EXIT_DOMAIN_ERROR
        assert 'shorter than 0.31s' in capsys.readouterr().err
        code = dispatch(['eval-sep', '--config', 'tiny', '--manifest', manifest, '--oracle-masks',
                         '--out', str(tmp_path / 'r.json'), '--protocol', 'all'])
        assert code == EXIT_DOMAIN_ERROR


class TestTrainedModel:
    def test_eval_sep_with_checkpoint(self, trained, corpus_dir, tmp_path):
        out = tmp_path / 'report.json'
        code = dispatch(['eval-sep', '--manifest', str(corpus_dir / 'manifest.jsonl'), '--checkpoint', str(trained),
                         '--out', str(out), '--protocol', 'all', '--pairs', '1', '--xlsx'])
        assert code == EXIT_OK
        report = json.loads(out.read_text())
        assert report['backend'] == 'model'
        assert report['n_pairs'] == 1
        assert out.with_suffix('.xlsx').exists()

    def test_eval_sep_oracle(self, corpus_dir, tmp_path):
        out = tmp_path / 'report.json'
        code = dispatch(['eval-sep', '--config', 'tiny', '--manifest', str(corpus_dir / 'manifest.jsonl'),
                         '--oracle-masks', '--out', str(out), '--protocol', 'all', '--pairs', '1'])
        assert code == EXIT_OK
        assert json.loads(out.read_text())['backend'] == 'oracle'

    def test_eval_verify(self, trained, corpus_dir, tmp_path):
        out = tmp_path / 'verify.json'
        code = dispatch(['eval-verify', '--manifest', str(corpus_dir / 'manifest.jsonl'),
                         '--checkpoint', str(trained), '--out', str(out)])
        assert code == EXIT_OK
        assert 0.0 <= json.loads(out.read_text())['aggregate']['auc'] <= 1.0

    def test_export_embeddings(self, trained, corpus_dir, tmp_path):
        out = tmp_path / 'emb.csv'
        code = dispatch(['export-embeddings', '--manifest', str(corpus_dir / 'manifest.jsonl'),
                         '--checkpoint', str(trained), '--out', str(out)])
        assert code == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0].startswith('# config_digest=')
        assert next(csv.reader(lines[1:2]))[:3] == ['clip_id', 'video_id', 'modality']

    def test_separate(self, trained, corpus, tmp_path):
        a, b = corpus.by_video['spk00'][0], corpus.by_video['spk01'][0]
        code = dispatch(['separate', '--checkpoint', str(trained), '--audio', a.audio_path,
                         '--roi', a.roi_dir, '--face', a.face_dir, '--roi', b.roi_dir, '--face', b.face_dir,
                         '--out', str(tmp_path), '--clip-id', 'mix'])
        assert code == EXIT_OK
        assert (tmp_path / 'mix.spk0.wav').exists()
        assert (tmp_path / 'mix.spk1.wav').exists()
        assert json.loads((tmp_path / 'mix.json').read_text())['n_sources'] == 2

    def test_enhance_rejects_two_speakers(self, trained, corpus, tmp_path):
        a, b = corpus.by_video['spk00'][0], corpus.by_video['spk01'][0]
        code = dispatch(['enhance', '--checkpoint', str(trained), '--audio', a.audio_path,
                         '--roi', a.roi_dir, '--face', a.face_dir, '--roi', b.roi_dir, '--face', b.face_dir,
                         '--out', str(tmp_path)])
        assert code == EXIT_DOMAIN_ERROR

    def test_checkpoint_with_other_config(self, trained, corpus_dir, tmp_path):
        code = dispatch(['export-embeddings', '--config', 'desk', '--manifest', str(corpus_dir / 'manifest.jsonl'),
                         '--checkpoint', str(trained), '--out', str(tmp_path / 'e.csv')])
        assert code == EXIT_DOMAIN_ERROR


class TestAudioOnly:
    def test_train_and_evaluate(self, corpus_dir, tmp_path):
        manifest = str(corpus_dir / 'manifest.jsonl')
        code = dispatch(['train', '--config', 'tiny', '--audio-only', '--manifest', manifest,
                         '--out', str(tmp_path), '--steps', '2', '--seed', '0'])
        assert code == EXIT_OK
        state = load_checkpoint(tmp_path / 'last.ckpt')
        assert state.step == 2
        assert state.model_config.visual_feature == 'none'

        out = tmp_path / 'report.json'
        code = dispatch(['eval-sep', '--manifest', manifest, '--checkpoint', str(tmp_path / 'last.ckpt'),
                         '--out', str(out), '--protocol', 'all', '--pairs', '1'])
        assert code == EXIT_OK
        assert json.loads(out.read_text())['per_pair'][0]['permutation'] is not None

        separated = tmp_path / 'separated'
        code = dispatch(['separate', '--checkpoint', str(tmp_path / 'last.ckpt'), '--audio',
                         str(corpus_dir / 'audio' / 'spk00_c00.wav'), '--out', str(separated), '--clip-id', 'mix'])
        assert code == EXIT_OK
        assert json.loads((separated / 'mix.json').read_text())['n_sources'] == 2

    def test_excludes_other_visual_ablations(self, corpus_dir, tmp_path):
        code = dispatch(['train', '--config', 'tiny', '--audio-only', '--lip-motion-only',
                         '--manifest', str(corpus_dir / 'manifest.jsonl'), '--out', str(tmp_path)])
        assert code == EXIT_USAGE


class TestCheck:
    @pytest.mark.slow
    def test_self_check_passes(self, capsys):
        assert dispatch(['check', '--params', '10']) == EXIT_OK
        out = capsys.readouterr().out
        assert 'FAIL' not in out
        assert 'PASS oracle-masks' in out

    def test_self_check_without_oracle(self, capsys):
        code = dispatch(['check', '--params', '5', '--skip-oracle'])
        out = capsys.readouterr().out
        assert 'PASS dsp-round-trip' in out
        assert code in (EXIT_OK, EXIT_DOMAIN_ERROR)
