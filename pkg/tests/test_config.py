"""Tests for run settings: presets, overrides, coercion and digests."""

import json

import pytest

from core.config import DEFAULTS, PRESETS, RunConfig, settings_digest
from core.errors import ConfigError, ParseError


class TestRunConfig:
    def test_defaults_when_empty(self):
        run = RunConfig()
        assert run.as_dict() == DEFAULTS
        assert run.seed == 0

    def test_tiny_preset_shapes(self):
        run = RunConfig.from_preset('tiny')
        assert run['model.n_frames'] == 8
        assert run['model.roi_size'] == 24
        assert run['model.channel_scale'] == pytest.approx(0.1)
        assert run['train.batch_size'] == 2

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match='unknown preset'):
            RunConfig.from_preset('huge')

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown setting 'model.depth'"):
            RunConfig({'model.depth': 3})

    def test_string_values_coerced(self):
        run = RunConfig().with_overrides({'seed': '11', 'data.corruption': 'true', 'infer.hop': '0.5'})
        assert run.seed == 11
        assert run['data.corruption'] is True
        assert run['infer.hop'] == pytest.approx(0.5)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match='expects int'):
            RunConfig({'train.max_steps': 'many'})

    def test_none_override_ignored(self):
        run = RunConfig.from_preset('desk')
        assert run.with_overrides({'seed': None}) == run

    def test_section_strips_prefix(self):
        stft = RunConfig().section('stft')
        assert stft == {'window_length': 400, 'hop': 160, 'fft_size': 512,
                        'window': 'hann', 'center_pad': True}


class TestDigest:
    def test_digest_is_stable(self):
        assert RunConfig.from_preset('tiny').digest == RunConfig.from_preset('tiny').digest

    def test_digest_tracks_settings(self):
        assert RunConfig().digest != RunConfig({'seed': 1}).digest

    def test_digest_ignores_key_order(self):
        assert settings_digest({'a': 1, 'b': 2}) == settings_digest({'b': 2, 'a': 1})

    def test_presets_are_valid(self):
        for name in PRESETS:
            RunConfig.from_preset(name)


class TestConfigFile:
    def test_file_with_base_preset(self, tmp_path):
        path = tmp_path / 'run.json'
        path.write_text(json.dumps({'preset': 'tiny', 'seed': 5}))
        run = RunConfig.resolve(str(path))
        assert run.seed == 5
        assert run['model.n_frames'] == 8

    def test_malformed_file(self, tmp_path):
        path = tmp_path / 'run.json'
        path.write_text('{"seed": ')
        with pytest.raises(ParseError):
            RunConfig.from_file(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match='not found'):
            RunConfig.from_file(str(tmp_path / 'absent.json'))
