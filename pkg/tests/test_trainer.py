"""Tests for the training harness: steps, checkpoints, resume and the gradient check."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from core.config import RunConfig
from core.errors import Diverged, IncompatibleCheckpoint, InvalidInput
from services.evaluation import protocol_manifest
from services.networks import ModelConfig
from services.objectives import LossWeights
from services.persistence import PersistenceService
from services.trainer import (
    BatchSampler,
    TrainConfig,
    compute_losses,
    gradient_check,
    init_state,
    load_checkpoint,
    random_batch,
    save_checkpoint,
    train,
    train_step,
    training_manifests,
)


@pytest.fixture
def state(tiny_run):
    return init_state(tiny_run)


@pytest.fixture
def tiny_cfg(tiny_run):
    return TrainConfig.from_config(tiny_run)


def _params(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestTrainConfig:
    def test_from_tiny_preset(self, tiny_cfg):
        assert tiny_cfg.batch_size == 2
        assert tiny_cfg.max_steps == 20
        assert tiny_cfg.checkpoint_interval == 10

    def test_step_decay(self):
        cfg = TrainConfig(learning_rate=1e-3, lr_decay_every=10, lr_decay_factor=0.5)
        assert cfg.learning_rate_at(9) == pytest.approx(1e-3)
        assert cfg.learning_rate_at(10) == pytest.approx(5e-4)
        assert cfg.learning_rate_at(25) == pytest.approx(2.5e-4)

    def test_rejects_zero_learning_rate(self):
        with pytest.raises(InvalidInput):
            TrainConfig(learning_rate=0.0)


# ---------------------------------------------------------------------------
# Loss computation and steps
# ---------------------------------------------------------------------------

class TestSteps:
    def test_losses_for_random_batch(self, state):
        batch = random_batch(state.model_config, np.random.default_rng(0), size=2)
        total, breakdown, extras = compute_losses(state.model, batch, LossWeights())
        assert extras['masks'].shape == (2, 4, 2, 257, 32)
        assert extras['voices'].shape == (4, 2, state.model_config.embed_dim)
        assert float(total) == pytest.approx(breakdown.total)

    def test_dedicated_mode_losses(self, tiny_run):
        run = tiny_run.with_overrides({'model.mode': 'dedicated_two_speaker'})
        state = init_state(run)
        batch = random_batch(state.model_config, np.random.default_rng(0), size=2)
        _, breakdown, extras = compute_losses(state.model, batch, LossWeights())
        assert extras['masks'].shape == (2, 4, 2, 257, 32)
        assert breakdown.mask_prediction > 0

    def test_lip_only_variant_drops_cross_modal(self, tiny_run):
        state = init_state(tiny_run.with_overrides({'model.visual_feature': 'lip_motion'}))
        batch = random_batch(state.model_config, np.random.default_rng(0), size=2)
        _, breakdown, extras = compute_losses(state.model, batch, LossWeights())
        assert extras['face_a'] is None
        assert breakdown.cross_modal == 0.0

    def test_audio_only_losses_use_best_assignment(self, tiny_run):
        state = init_state(tiny_run.with_overrides({'model.visual_feature': 'none'}))
        batch = random_batch(state.model_config, np.random.default_rng(0), size=2)
        like = next(state.model.parameters())
        gt = torch.as_tensor(batch.gt, dtype=like.dtype)
        swapped = gt[:, [1, 0, 3, 2]]
        _, breakdown, extras = compute_losses(state.model, batch, LossWeights(), gt_override=gt)
        _, breakdown_swapped, extras_swapped = compute_losses(state.model, batch, LossWeights(),
                                                              gt_override=swapped)
        assert extras['masks'].shape == (2, 4, 2, 257, 32)
        assert extras['face_a'] is None
        assert breakdown.cross_modal == 0.0
        assert breakdown.mask_prediction == pytest.approx(breakdown_swapped.mask_prediction, rel=1e-6)
        torch.testing.assert_close(extras['masks'], extras_swapped['masks'][:, [1, 0, 3, 2]])

    def test_step_updates_parameters(self, state, tiny_cfg, corpus, tiny_run):
        before = _params(state.model).clone()
        batch = BatchSampler(corpus, tiny_run).batch(0, 2)
        state, breakdown = train_step(state, batch, tiny_cfg)
        assert state.step == 1
        assert np.isfinite(breakdown.total)
        assert not torch.equal(before, _params(state.model))

    def test_divergence_guard(self, state, tiny_cfg, corpus, tiny_run):
        batch = BatchSampler(corpus, tiny_run).batch(0, 2)
        with pytest.raises(Diverged):
            train_step(state, batch, replace(tiny_cfg, divergence_limit=1e-12))

    def test_empty_batch(self, state, tiny_cfg):
        with pytest.raises(InvalidInput, match='empty'):
            train_step(state, [], tiny_cfg)

    def test_sampler_streams_are_deterministic(self, corpus, tiny_run):
        a = BatchSampler(corpus, tiny_run).batch(3, 2)
        b = BatchSampler(corpus, tiny_run, workers=2).batch(3, 2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.x1.samples, y.x1.samples)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoints:
    def test_round_trip(self, state, tmp_path):
        state.step = 7
        path = save_checkpoint(state, tmp_path / 'c.ckpt')
        restored = load_checkpoint(path, state.model_config)
        assert restored.step == 7
        assert torch.equal(_params(restored.model), _params(state.model))
        assert RunConfig(restored.run_settings) == RunConfig(state.run_settings)

    def test_config_mismatch(self, state, tmp_path):
        path = save_checkpoint(state, tmp_path / 'c.ckpt')
        other = replace(state.model_config, mask_bound=4.0)
        with pytest.raises(IncompatibleCheckpoint, match='requested'):
            load_checkpoint(path, other)

    def test_tampered_digest(self, state, tmp_path):
        path = save_checkpoint(state, tmp_path / 'c.ckpt')
        data = torch.load(str(path), weights_only=False)
        data['model_config']['mask_bound'] = 3.0
        torch.save(data, str(path))
        with pytest.raises(IncompatibleCheckpoint, match='does not match its config'):
            load_checkpoint(path)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class TestTrainLoop:
    def test_log_records(self, tiny_run, corpus, tmp_path):
        summary = train(tiny_run, corpus, tmp_path, max_steps=2)
        records = PersistenceService.load_jsonl(summary.log_path)
        assert [r['step'] for r in records] == [1, 2]
        assert set(records[0]) == {'step', 'losses', 'lr', 'wall_ms', 'config_digest', 'seed'}
        assert records[0]['config_digest'] == tiny_run.digest
        assert summary.checkpoint.exists()

    def test_resume_matches_uninterrupted_run(self, tiny_run, corpus, tmp_path):
        straight = train(tiny_run, corpus, tmp_path / 'straight', max_steps=4)
        train(tiny_run, corpus, tmp_path / 'split', max_steps=2)
        resumed = train(tiny_run, corpus, tmp_path / 'split', resume=tmp_path / 'split' / 'last.ckpt',
                        max_steps=4)

        def losses(path):
            return [(r['step'], r['losses']) for r in PersistenceService.load_jsonl(path)]

        assert losses(straight.log_path) == losses(resumed.log_path)
        a = load_checkpoint(straight.checkpoint)
        b = load_checkpoint(resumed.checkpoint)
        assert a.step == b.step == 4
        assert torch.equal(_params(a.model), _params(b.model))

    def test_resume_with_other_model_config(self, tiny_run, corpus, tmp_path):
        train(tiny_run, corpus, tmp_path, max_steps=1)
        other = tiny_run.with_overrides({'model.mask_bound': 4.0})
        with pytest.raises(IncompatibleCheckpoint):
            train(other, corpus, tmp_path, resume=tmp_path / 'last.ckpt', max_steps=2)

    def test_audio_only_trains(self, tiny_run, corpus, tmp_path):
        run = tiny_run.with_overrides({'model.visual_feature': 'none'})
        summary = train(run, corpus, tmp_path, max_steps=2)
        assert summary.steps == 2
        assert summary.last.cross_modal == 0.0
        assert np.isfinite(summary.last.mask_prediction)
        assert load_checkpoint(summary.checkpoint).model_config.audio_only

    def test_training_excludes_seen_heard_clips(self, tiny_run, corpus):
        val_fraction = TrainConfig.from_config(tiny_run).val_fraction
        train_part, _ = training_manifests(corpus, val_fraction)
        held = {e.clip_id for e in protocol_manifest(corpus, 'seen_heard', val_fraction)}
        assert held
        assert held.isdisjoint(e.clip_id for e in train_part)

    def test_sampled_tuples_avoid_seen_heard_clips(self, tiny_run, corpus):
        val_fraction = TrainConfig.from_config(tiny_run).val_fraction
        train_part, _ = training_manifests(corpus, val_fraction)
        held = {e.clip_id for e in protocol_manifest(corpus, 'seen_heard', val_fraction)}
        for t in BatchSampler(train_part, tiny_run).batch(0, 4):
            assert held.isdisjoint(t.meta['clips'])

    def test_rerun_rewrites_last_checkpoint(self, tiny_run, corpus, tmp_path):
        train(tiny_run, corpus, tmp_path, max_steps=2)
        summary = train(tiny_run, corpus, tmp_path, max_steps=0)
        assert summary.steps == 0
        assert load_checkpoint(summary.checkpoint).step == 0

    @pytest.mark.slow
    def test_overfits_one_batch(self, tiny_run, corpus):
        run = tiny_run.with_overrides({'train.learning_rate': 1e-3})
        state = init_state(run)
        cfg = TrainConfig.from_config(run)
        batch = BatchSampler(corpus, run).batch(0, 2)
        losses = []
        for _ in range(60):
            state, breakdown = train_step(state, batch, cfg)
            losses.append(breakdown.mask_prediction)
        assert losses[-1] < 0.5 * losses[0]


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

class TestGradientCheck:
    def test_gradients_match_central_differences(self, tiny_run):
        report = gradient_check(tiny_run, seed=0, n_params=30)
        assert report.n_checked == 30
        assert report.max_rel_error < 1e-3
        assert report.passed

    def test_zero_loss_has_zero_gradient(self, tiny_run):
        report = gradient_check(tiny_run, seed=0, n_params=10, zero_loss=True)
        assert report.max_abs_grad < 1e-6
        assert report.passed

    def test_requires_small_model(self):
        with pytest.raises(InvalidInput, match='channel_scale'):
            gradient_check(RunConfig.from_preset('desk'), seed=0, n_params=1)

    def test_report_json(self, tiny_run):
        data = gradient_check(tiny_run, seed=1, n_params=5).to_json()
        assert data['n_requested'] == 5
        assert data['passed'] in (True, False)
