"""Tests for window geometry, blending, backends and clip separation."""

import json
from dataclasses import replace

import numpy as np
import pytest

from core.errors import AlignmentError, ClipTooShort, ConfigError, InvalidInput
from services.dsp import Waveform, mix_waveforms
from services.inference import (
    MixtureBackend,
    ModelBackend,
    OracleBackend,
    WindowConfig,
    assign_best_permutation,
    blend_weights,
    enhance_clip,
    get_backend,
    separate_clip,
    window_starts,
    write_outputs,
)
from services.metrics import bss_eval
from services.networks import ModelConfig, build_separator
from services.tuples import SegmentSpec, load_clip
from services.visuals import FaceTrack


@pytest.fixture(scope='module')
def wcfg(tiny_run):
    return WindowConfig.from_config(tiny_run)


@pytest.fixture(scope='module')
def scene(corpus, tiny_seg):
    """Two speakers from different videos mixed at 0 dB."""
    audio_a, track_a = load_clip(corpus.by_video['spk00'][0], tiny_seg.sample_rate, tiny_seg.fps)
    audio_b, track_b = load_clip(corpus.by_video['spk01'][0], tiny_seg.sample_rate, tiny_seg.fps)
    mixture, gain = mix_waveforms(audio_a, audio_b, 0.0)
    return mixture, [audio_a, audio_b.scaled(gain)], [track_a, track_b]


@pytest.fixture(scope='module')
def model(tiny_run):
    return build_separator(ModelConfig.from_config(tiny_run), seed=0).eval()


class _FlippingOracle(OracleBackend):
    """Oracle masks whose speaker order flips on every other window."""

    def __init__(self, sources, seg):
        super().__init__(sources, seg)
        self.calls = 0

    @property
    def ordered(self):
        return False

    def masks(self, window):
        masks = super().masks(window)
        self.calls += 1
        return masks[::-1] if self.calls % 2 == 0 else masks


# ---------------------------------------------------------------------------
# Window geometry
# ---------------------------------------------------------------------------

class TestWindows:
    def test_ten_second_clip_at_default_geometry(self):
        # 10.2 s, 2.55 s windows, half-window hop
        starts = window_starts(163200, 40800, 20400)
        assert len(starts) == 7
        assert starts[-1] + 40800 == 163200

    def test_final_window_right_aligned(self):
        starts = window_starts(1000, 300, 200)
        assert starts == [0, 200, 400, 600, 700]

    def test_single_window(self):
        assert window_starts(300, 300, 150) == [0]

    def test_too_short(self):
        with pytest.raises(ClipTooShort):
            window_starts(299, 300, 150)

    @pytest.mark.parametrize('blend', ['crossfade_hann', 'overlap_average'])
    def test_partition_of_unity(self, blend):
        n, win = 1000, 300
        starts = window_starts(n, win, 120)
        total = np.zeros(n)
        for start, w in zip(starts, blend_weights(starts, win, n, blend)):
            total[start:start + win] += w
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_crossfade_is_smooth_inside_overlaps(self):
        starts = [0, 150]
        weights = blend_weights(starts, 300, 450, 'crossfade_hann')
        assert weights[0][0] == pytest.approx(1.0)
        assert weights[1][-1] == pytest.approx(1.0)
        assert 0.0 < weights[0][200] < 1.0

    def test_unknown_blend(self):
        with pytest.raises(InvalidInput):
            blend_weights([0], 10, 10, 'max')


class TestWindowConfig:
    def test_half_window_default_hop(self, wcfg, tiny_seg):
        assert wcfg.window == pytest.approx(tiny_seg.duration)
        assert wcfg.hop == pytest.approx(tiny_seg.duration / 2)
        assert wcfg.samples(16000) == (4960, 2480)

    def test_explicit_hop(self, tiny_run):
        wcfg = WindowConfig.from_config(tiny_run.with_overrides({'infer.hop': 0.1}))
        assert wcfg.hop == pytest.approx(0.1)

    def test_hop_beyond_window(self):
        with pytest.raises(InvalidInput, match='hop'):
            WindowConfig(window=1.0, hop=2.0)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class TestBackends:
    def test_registry(self, tiny_seg):
        assert get_backend('mixture', 3).n_speakers is None
        assert get_backend('oracle', [Waveform(np.ones(10))], tiny_seg).name == 'oracle'

    def test_unknown_backend(self):
        with pytest.raises(ConfigError, match='unknown backend'):
            get_backend('ensemble')

    def test_oracle_needs_sources(self, tiny_seg):
        with pytest.raises(InvalidInput):
            OracleBackend([], tiny_seg)


# ---------------------------------------------------------------------------
# Separation
# ---------------------------------------------------------------------------

class TestSeparateClip:
    def test_oracle_masks_reach_20_db(self, scene, wcfg, tiny_seg):
        mixture, references, tracks = scene
        result = separate_clip(mixture, tracks, OracleBackend(references, tiny_seg), wcfg, tiny_seg)
        metrics = bss_eval(references, result.sources)
        assert min(m.sdr for m in metrics) >= 20.0

    def test_unordered_masks_stay_with_their_speaker(self, scene, wcfg, tiny_seg):
        mixture, references, tracks = scene
        backend = _FlippingOracle(references, tiny_seg)
        result = separate_clip(mixture, tracks, backend, wcfg, tiny_seg)
        assert backend.calls >= 3
        metrics = bss_eval(references, result.sources)
        assert min(m.sdr for m in metrics) >= 20.0

    def test_audio_only_model_needs_no_visuals(self, scene, wcfg, tiny_seg, model):
        mixture, _, _ = scene
        audio_only = build_separator(replace(model.cfg, visual_feature='none')).eval()
        result = separate_clip(mixture, [], ModelBackend(audio_only), wcfg, tiny_seg)
        assert len(result.sources) == 2
        assert all(len(s) == len(mixture) for s in result.sources)

    def test_enhance_rejects_audio_only_model(self, scene, wcfg, tiny_seg, model):
        mixture, _, tracks = scene
        audio_only = build_separator(replace(model.cfg, visual_feature='none')).eval()
        with pytest.raises(ConfigError, match='visually conditioned'):
            enhance_clip(mixture, tracks[0], ModelBackend(audio_only), wcfg, tiny_seg)

    def test_mixture_backend_returns_mixture(self, scene, wcfg, tiny_seg):
        mixture, references, tracks = scene
        result = separate_clip(mixture, tracks, MixtureBackend(2), wcfg, tiny_seg)
        for source in result.sources:
            np.testing.assert_allclose(source.samples, mixture.samples, atol=1e-6)

    def test_model_backend_outputs(self, scene, wcfg, tiny_seg, model):
        mixture, _, tracks = scene
        result = separate_clip(mixture, tracks, ModelBackend(model), wcfg, tiny_seg, keep_masks=True)
        assert len(result.sources) == 2
        assert all(len(s) == len(mixture) for s in result.sources)
        assert result.n_windows == len(window_starts(len(mixture), 4960, 2480))
        assert len(result.masks) == result.n_windows

    def test_deterministic(self, scene, wcfg, tiny_seg, model):
        mixture, _, tracks = scene
        a = separate_clip(mixture, tracks, ModelBackend(model), wcfg, tiny_seg)
        b = separate_clip(mixture, tracks, ModelBackend(model), wcfg, tiny_seg)
        np.testing.assert_array_equal(a.sources[0].samples, b.sources[0].samples)

    def test_misaligned_visuals(self, scene, wcfg, tiny_seg, model):
        mixture, _, tracks = scene
        short = FaceTrack(tracks[0].rois[:20], tracks[0].face_paths, tracks[0].fps)
        with pytest.raises(AlignmentError):
            separate_clip(mixture, [short, tracks[1]], ModelBackend(model), wcfg, tiny_seg)

    def test_clip_shorter_than_window(self, scene, wcfg, tiny_seg):
        mixture, references, tracks = scene
        clip = mixture.slice(0, 4000)
        track = FaceTrack(tracks[0].rois[:7], tracks[0].face_paths, tracks[0].fps)
        with pytest.raises(ClipTooShort):
            separate_clip(clip, [track], MixtureBackend(1), wcfg, tiny_seg)

    def test_window_must_match_segment(self, scene, tiny_seg):
        mixture, references, tracks = scene
        with pytest.raises(ConfigError, match='segment'):
            separate_clip(mixture, tracks, MixtureBackend(2), WindowConfig(window=1.0, hop=0.5), tiny_seg)

    def test_dedicated_needs_two_speakers(self, scene, wcfg, tiny_seg, model):
        mixture, _, tracks = scene
        dedicated = build_separator(replace(model.cfg, mode='dedicated_two_speaker')).eval()
        with pytest.raises(ConfigError, match='expects 2'):
            separate_clip(mixture, tracks[:1], ModelBackend(dedicated), wcfg, tiny_seg)

    def test_enhance_returns_target_only(self, scene, wcfg, tiny_seg, model):
        mixture, _, tracks = scene
        result = enhance_clip(mixture, tracks[0], ModelBackend(model, single_speaker=True), wcfg, tiny_seg)
        assert len(result.sources) == 1

    def test_random_face_frame_is_seeded(self, scene, wcfg, tiny_seg, model):
        mixture, _, tracks = scene
        a = separate_clip(mixture, tracks, ModelBackend(model), wcfg, tiny_seg, face_seed=4)
        b = separate_clip(mixture, tracks, ModelBackend(model), wcfg, tiny_seg, face_seed=4)
        np.testing.assert_array_equal(a.sources[1].samples, b.sources[1].samples)


class TestOutputs:
    def test_best_permutation(self, scene):
        _, references, _ = scene
        assert assign_best_permutation(references[::-1], references) == (1, 0)

    def test_write_outputs(self, scene, wcfg, tiny_seg, tmp_path):
        mixture, references, tracks = scene
        result = separate_clip(mixture, tracks, OracleBackend(references, tiny_seg), wcfg, tiny_seg)
        paths = write_outputs(result, 'clip', tmp_path, {'seed': 0})
        assert [p.name for p in paths] == ['clip.spk0.wav', 'clip.spk1.wav']
        sidecar = json.loads((tmp_path / 'clip.json').read_text())
        assert sidecar['backend'] == 'oracle'
        assert sidecar['n_sources'] == 2
        assert sidecar['seed'] == 0
        assert sidecar['window_starts'] == result.window_starts
