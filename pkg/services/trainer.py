"""Training harness: batched loss computation, optimization loop, checkpoints, gradient check."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from core.config import Config, RunConfig
from core.errors import Diverged, InvalidInput, NumericalError
from services.dsp import Waveform
from services.manifest import Manifest, split_manifest, split_seen_heard
from services.networks import AudioVisualSeparator, ModelConfig, VisualBatch, build_separator
from services.objectives import (
    LossBreakdown,
    LossWeights,
    consistency_loss,
    cross_modal_loss,
    mask_prediction_loss,
    pit_mask_loss,
    weighted_total,
)
from services.persistence import PersistenceService
from services.tuples import (
    SamplingOptions,
    SegmentSpec,
    TrainingTuple,
    TupleBatch,
    add_enhancement_noise,
    collate_tuples,
    load_noise_pool,
    sample_training_tuple,
)

logger = logging.getLogger(__name__)

VALIDATION_SEED_OFFSET = 1_000_003
VALIDATION_BATCHES = 2


# ==================== Data Classes ====================

@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings of one run."""
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_steps: int = 5000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    corruption: bool = False
    enhancement: bool = False
    checkpoint_interval: int = 500
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.1
    divergence_limit: float = 1e6
    workers: int = 0
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidInput("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.max_steps < 0 or self.checkpoint_interval < 1:
            raise InvalidInput("batch_size and checkpoint_interval must be positive")

    @classmethod
    def from_config(cls, run: RunConfig) -> 'TrainConfig':
        train = run.section('train')
        return cls(
            learning_rate=train['learning_rate'],
            weight_decay=train['weight_decay'],
            batch_size=train['batch_size'],
            max_steps=train['max_steps'],
            seed=run.seed,
            weights=LossWeights.from_config(run),
            corruption=run['data.corruption'],
            enhancement=run['data.enhancement'],
            checkpoint_interval=train['checkpoint_interval'],
            lr_decay_every=train['lr_decay_every'],
            lr_decay_factor=train['lr_decay_factor'],
            divergence_limit=train['divergence_limit'],
            workers=train['workers'] or Config.DEFAULT_WORKERS,
            val_fraction=run['data.val_fraction'],
        )

    def learning_rate_at(self, step: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (step // self.lr_decay_every)


@dataclass
class TrainState:
    """Everything needed to resume: step, parameters, optimizer moments, RNG."""
    step: int
    model: AudioVisualSeparator
    optimizer: torch.optim.Optimizer
    run_settings: Dict[str, Any]
    best_val_loss: Optional[float] = None
    rng_state: Optional[torch.Tensor] = None

    @property
    def model_config(self) -> ModelConfig:
        return self.model.cfg


@dataclass
class TrainSummary:
    steps: int
    first: Optional[LossBreakdown]
    last: Optional[LossBreakdown]
    best_val_loss: Optional[float]
    checkpoint: Path
    log_path: Path


# ==================== Setup ====================

def configure_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = False


def make_optimizer(model: AudioVisualSeparator, cfg: TrainConfig) -> torch.optim.Optimizer:
    # Decoupled weight decay
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def init_state(run: RunConfig) -> TrainState:
    configure_determinism(run.seed)
    model = build_separator(ModelConfig.from_config(run), run.seed)
    cfg = TrainConfig.from_config(run)
    return TrainState(0, model, make_optimizer(model, cfg), run.as_dict())


# ==================== Loss Computation ====================

def _to_tensor(array: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(array, dtype=like.dtype, device=like.device)


def _role(array: np.ndarray, index: int) -> np.ndarray:
    return array[:, index]


def _pit_order(masks: torch.Tensor, gt: torch.Tensor, reduction: str = 'mean') -> torch.Tensor:
    """Reorder unordered audio-only masks to their best-matching targets.

    masks is 2B x 4 x F x T (mixture 1 rows, then mixture 2); gt is
    B x 4 x 2 x F x T in role order A1, B1, A2, B2.
    """
    b = gt.shape[0]
    rows = []
    for i in range(b):
        roles = []
        for mix in range(2):
            candidates = masks[mix * b + i].view(2, 2, *masks.shape[2:])
            targets = gt[i, 2 * mix:2 * mix + 2]
            _, perm = pit_mask_loss(candidates, targets, reduction)
            roles.extend(candidates[p] for p in perm)
        rows.append(torch.stack(roles))
    return torch.stack(rows)


def compute_losses(model: AudioVisualSeparator, batch: TupleBatch, weights: LossWeights,
                   gt_override: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, LossBreakdown, Dict[str, torch.Tensor]]:
    """Forward both mixtures, embed the masked spectrograms, and combine the loss terms.

    Batch role order is A1, B1, A2, B2. Returns the differentiable total,
    its breakdown, and intermediate tensors (masks B x 4 x 2 x F x T,
    voice and face embeddings). An audio-only model is scored under the
    best assignment of its two masks to the speakers of each mixture.
    """
    like = next(model.parameters())
    b = len(batch)
    X1, X2 = _to_tensor(batch.X1, like), _to_tensor(batch.X2, like)
    rois = [_to_tensor(_role(batch.rois, k), like) for k in range(4)]
    faces = [_to_tensor(_role(batch.faces, k), like) for k in range(4)]

    gt = gt_override if gt_override is not None else _to_tensor(batch.gt, like)
    if model.cfg.audio_only:
        masks, _ = model(torch.cat([X1, X2]))
        pred = _pit_order(masks, gt, weights.mask_reduction)
        face_a = face_b = None
    elif model.cfg.dedicated:
        spec = torch.cat([X1, X2])
        visual_a = VisualBatch(torch.cat([rois[0], rois[2]]), torch.cat([faces[0], faces[2]]))
        visual_b = VisualBatch(torch.cat([rois[1], rois[3]]), torch.cat([faces[1], faces[3]]))
        masks, face_embs = model(spec, visual_a, visual_b)
        # rows: mixture 1 then mixture 2; channels: A then B
        pred = torch.stack([masks[:b, :2], masks[:b, 2:], masks[b:, :2], masks[b:, 2:]], dim=1)
        face_a = face_embs[0][:b] if face_embs[0] is not None else None
        face_b = face_embs[1][:b] if face_embs[1] is not None else None
    else:
        spec = torch.cat([X1, X1, X2, X2])
        visual = VisualBatch(torch.cat(rois), torch.cat(faces))
        masks, face_embs = model(spec, visual)
        pred = masks.view(4, b, *masks.shape[1:]).transpose(0, 1)
        face_a = face_embs[0][:b] if face_embs[0] is not None else None
        face_b = face_embs[0][b:2 * b] if face_embs[0] is not None else None

    mask_term = mask_prediction_loss(pred, gt, weights.mask_reduction)

    specs_by_role = torch.cat([X1, X1, X2, X2])
    flat_masks = pred.transpose(0, 1).reshape(4 * b, *pred.shape[2:])
    zero = torch.zeros((), dtype=like.dtype, device=like.device)
    voices = None
    if weights.uses_cross_modal or weights.uses_consistency:
        voices = model.embed_voice(specs_by_role, flat_masks).view(4, b, -1)
    cross_term = zero
    if weights.uses_cross_modal and voices is not None and face_a is not None:
        cross_term = cross_modal_loss(voices[0], voices[2], voices[1], voices[3],
                                      face_a, face_b, weights.margin).mean()
    consistency_term = zero
    if weights.uses_consistency and voices is not None:
        consistency_term = consistency_loss(voices[0], voices[2], voices[1], voices[3], weights.margin).mean()

    if face_a is None and weights.uses_cross_modal:
        # No face stream, so the cross-modal term has nothing to match against
        weights = replace(weights, cross_modal=False)
    total, breakdown = weighted_total(mask_term, cross_term, consistency_term, weights)
    return total, breakdown, {'masks': pred, 'voices': voices, 'face_a': face_a, 'face_b': face_b}


# ==================== Operations ====================

def _set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group['lr'] = lr


def train_step(state: TrainState, batch: Sequence[TrainingTuple],
               cfg: TrainConfig) -> Tuple[TrainState, LossBreakdown]:
    """One AdamW update on a batch of tuples.

    Raises:
        InvalidInput: Empty batch
        NumericalError: A loss term is non-finite
        Diverged: Total loss above cfg.divergence_limit
    """
    if not batch:
        raise InvalidInput("training batch is empty")
    model = state.model
    model.train()
    _set_learning_rate(state.optimizer, cfg.learning_rate_at(state.step))
    state.optimizer.zero_grad(set_to_none=True)
    total, breakdown, _ = compute_losses(model, collate_tuples(batch), cfg.weights)
    if breakdown.total > cfg.divergence_limit:
        raise Diverged(f"loss {breakdown.total:.3e} exceeded {cfg.divergence_limit:.1e} at step {state.step}")
    total.backward()
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def assert_finite_parameters(model: AudioVisualSeparator) -> None:
    for name, param in model.named_parameters():
        if not torch.all(torch.isfinite(param)):
            raise NumericalError(f"parameter {name}", float('nan'))


def evaluate_loss(model: AudioVisualSeparator, tuples: Sequence[TrainingTuple],
                  weights: LossWeights) -> LossBreakdown:
    """Loss breakdown without updating anything."""
    model.eval()
    with torch.no_grad():
        _, breakdown, _ = compute_losses(model, collate_tuples(tuples), weights)
    return breakdown


# ==================== Checkpoints ====================

def save_checkpoint(state: TrainState, path: Path) -> Path:
    model_config = state.model_config.to_dict()
    return PersistenceService.save_checkpoint({
        'config_digest': state.model_config.digest,
        'model_config': model_config,
        'run_settings': state.run_settings,
        'run_digest': RunConfig(state.run_settings).digest,
        'seed': int(state.run_settings.get('seed', 0)),
        'step': state.step,
        'best_val_loss': state.best_val_loss,
        'model': state.model.state_dict(),
        'optimizer': state.optimizer.state_dict(),
        'rng': {'torch': torch.get_rng_state()},
    }, path)


def load_checkpoint(path: Path, expected: Optional[ModelConfig] = None) -> TrainState:
    """Restore a TrainState; with `expected`, the model config must match exactly."""
    data = PersistenceService.load_checkpoint(path, expected.digest if expected is not None else None)
    model = AudioVisualSeparator(ModelConfig.from_dict(data['model_config']))
    model.load_state_dict(data['model'])
    run_settings = data.get('run_settings', {})
    optimizer = make_optimizer(model, TrainConfig.from_config(RunConfig(run_settings)))
    optimizer.load_state_dict(data['optimizer'])
    rng_state = data['rng'].get('torch')
    if rng_state is not None:
        torch.set_rng_state(rng_state)
    logger.info(f"[Trainer] Loaded checkpoint {path} at step {data['step']}")
    return TrainState(int(data['step']), model, optimizer, run_settings,
                      data.get('best_val_loss'), rng_state)


# ==================== Batches ====================

class BatchSampler:
    """Draws tuples from disjoint seed streams (seed, step, index)."""

    def __init__(self, manifest: Manifest, run: RunConfig, noise_pool: Optional[List[Waveform]] = None,
                 workers: int = 0):
        self.manifest = manifest
        self.seg = SegmentSpec.from_config(run)
        self.options = SamplingOptions.from_config(run)
        self.noise_pool = noise_pool
        self.noise_range = (run['data.noise_snr_low'], run['data.noise_snr_high'])
        self.seed = run.seed
        self.workers = workers

    def _one(self, stream: Tuple[int, int, int]) -> TrainingTuple:
        t = sample_training_tuple(self.manifest, stream, self.options, self.seg)
        if self.noise_pool:
            t = add_enhancement_noise(t, self.noise_pool, None, stream, self.seg, self.noise_range)
        return t

    def batch(self, step: int, size: int, offset: int = 0) -> List[TrainingTuple]:
        streams = [(self.seed + offset, step, index) for index in range(size)]
        if self.workers > 0:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(self._one, streams))
        return [self._one(s) for s in streams]


def noise_pool_from(run: RunConfig) -> Optional[List[Waveform]]:
    if not run['data.enhancement']:
        return None
    directory = Path(run['data.noise_dir'])
    paths = sorted(directory.glob('*.wav')) if run['data.noise_dir'] else []
    if not paths:
        raise InvalidInput(f"enhancement mode needs noise WAVs in data.noise_dir ('{run['data.noise_dir']}')")
    return load_noise_pool([str(p) for p in paths], run['data.sample_rate'])


# ==================== Training Loop ====================

def training_manifests(manifest: Manifest, val_fraction: float) -> Tuple[Manifest, Manifest]:
    """Clips to optimize on and the held-out validation videos.

    The last clip of every training video is kept back for the seen_heard
    evaluation protocol and never sampled for training.
    """
    train_part, val_part = split_manifest(manifest, val_fraction)
    return split_seen_heard(train_part)[0], val_part


def train(run: RunConfig, manifest: Manifest, out_dir: Path, resume: Optional[Path] = None,
          max_steps: Optional[int] = None) -> TrainSummary:
    """Optimize from scratch or a checkpoint, writing the step log and checkpoints to out_dir."""
    cfg = TrainConfig.from_config(run)
    steps = cfg.max_steps if max_steps is None else max_steps
    out_dir = Path(out_dir)
    log_path = out_dir / Config.TRAIN_LOG_FILE
    last_path = out_dir / Config.LAST_CHECKPOINT_FILE

    train_part, val_part = training_manifests(manifest, cfg.val_fraction)
    if len(train_part.video_ids) < 2:
        raise InvalidInput("training needs at least 2 videos after the validation split")
    pool = noise_pool_from(run)
    sampler = BatchSampler(train_part, run, pool, cfg.workers)
    val_sampler = BatchSampler(val_part, run, pool) if len(val_part.video_ids) >= 2 else None

    if resume is not None:
        state = load_checkpoint(resume, ModelConfig.from_config(run))
        state.run_settings = run.as_dict()
        PersistenceService.truncate_jsonl(log_path, state.step)
    else:
        state = init_state(run)
        if log_path.exists():
            log_path.unlink()
    logger.info(
        f"[Trainer] Training {len(train_part)} clip(s) / {len(train_part.video_ids)} video(s), "
        f"steps {state.step}->{steps}, batch {cfg.batch_size}, digest {run.digest[:12]}"
    )

    first: Optional[LossBreakdown] = None
    last: Optional[LossBreakdown] = None
    while state.step < steps:
        started = time.perf_counter()
        batch = sampler.batch(state.step, cfg.batch_size)
        state, breakdown = train_step(state, batch, cfg)
        first = first or breakdown
        last = breakdown
        PersistenceService.append_jsonl(log_path, {
            'step': state.step,
            'losses': breakdown.to_json(),
            'lr': cfg.learning_rate_at(state.step - 1),
            'wall_ms': round(1000.0 * (time.perf_counter() - started), 3),
            'config_digest': run.digest,
            'seed': run.seed,
        })
        if state.step % cfg.checkpoint_interval == 0 or state.step == steps:
            _checkpoint(state, cfg, out_dir, val_sampler)
            logger.info(f"[Trainer] Step {state.step}: total {breakdown.total:.4f} "
                        f"(mask {breakdown.mask_prediction:.4f})")

    save_checkpoint(state, last_path)
    return TrainSummary(state.step, first, last, state.best_val_loss, last_path, log_path)


def _checkpoint(state: TrainState, cfg: TrainConfig, out_dir: Path,
                val_sampler: Optional[BatchSampler]) -> None:
    assert_finite_parameters(state.model)
    if val_sampler is not None:
        tuples = [t for k in range(VALIDATION_BATCHES)
                  for t in val_sampler.batch(k, cfg.batch_size, offset=VALIDATION_SEED_OFFSET)]
        val = evaluate_loss(state.model, tuples, cfg.weights).total
        logger.info(f"[Trainer] Validation loss {val:.4f} at step {state.step}")
        if state.best_val_loss is None or val < state.best_val_loss:
            state.best_val_loss = val
            save_checkpoint(state, out_dir / Config.BEST_CHECKPOINT_FILE)
    state.rng_state = torch.get_rng_state()
    save_checkpoint(state, out_dir / Config.LAST_CHECKPOINT_FILE)


# ==================== Gradient Check ====================

@dataclass
class GradientReport:
    seed: int
    n_requested: int
    n_checked: int
    n_skipped: int
    max_rel_error: float
    max_abs_grad: float
    tolerance: float
    zero_loss: bool

    @property
    def passed(self) -> bool:
        if self.zero_loss:
            return self.max_abs_grad < 1e-6
        return self.n_checked >= self.n_requested and self.max_rel_error < self.tolerance

    def to_json(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'n_requested': self.n_requested,
            'n_checked': self.n_checked,
            'n_skipped': self.n_skipped,
            'max_rel_error': self.max_rel_error,
            'max_abs_grad': self.max_abs_grad,
            'tolerance': self.tolerance,
            'zero_loss': self.zero_loss,
            'passed': self.passed,
        }


def random_batch(cfg: ModelConfig, rng: np.random.Generator, size: int = 1) -> TupleBatch:
    """Synthetic inputs of the right shapes; targets drawn inside the mask bound."""
    f, t = cfg.stft.freq_bins, cfg.spec_frames
    return TupleBatch(
        X1=rng.standard_normal((size, 2, f, t)),
        X2=rng.standard_normal((size, 2, f, t)),
        gt=rng.uniform(-1.0, 1.0, (size, 4, 2, f, t)),
        rois=rng.uniform(0.0, 1.0, (size, 4, cfg.n_frames, cfg.roi_size, cfg.roi_size)),
        faces=rng.uniform(0.0, 1.0, (size, 4, 3, cfg.face_size, cfg.face_size)),
    )


def _hinge_margins(extras: Dict[str, torch.Tensor], margin: float) -> List[float]:
    voices, face_a, face_b = extras['voices'], extras['face_a'], extras['face_b']
    if voices is None:
        return []

    def d(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return 1.0 - (x * y).sum(-1)

    a1, b1, a2, b2 = voices[0], voices[1], voices[2], voices[3]
    z = [d(a1, a2) - d(a1, b1) + margin, d(a1, a2) - d(a1, b2) + margin]
    if face_a is not None:
        z += [d(a1, face_a) - d(a1, face_b) + margin, d(a2, face_a) - d(a2, face_b) + margin,
              d(b1, face_b) - d(b1, face_a) + margin, d(b2, face_b) - d(b2, face_a) + margin]
    return [float(v) for row in z for v in row.detach().reshape(-1)]


def gradient_check(run: RunConfig, seed: int, n_params: int = 200, zero_loss: bool = False,
                   step: float = 1e-5, tolerance: float = 1e-3, floor: float = 1e-5) -> GradientReport:
    """Compare autograd parameter gradients of the total loss with central differences.

    Runs in float64 on random inputs. Coordinates whose one-sided slopes
    disagree (activation kinks) are skipped and replaced. With zero_loss
    the targets are set to the predictions and the embedding terms are
    switched off, so every gradient should vanish. Relative error uses
    max(|analytic|, |numeric|, floor) as the denominator.
    """
    cfg = ModelConfig.from_config(run)
    if cfg.channel_scale > 0.1:
        raise InvalidInput(f"gradient check needs channel_scale <= 0.1, got {cfg.channel_scale}")
    configure_determinism(seed)
    model = build_separator(cfg, seed).double()
    model.eval()
    weights = LossWeights.from_config(run)
    if zero_loss:
        weights = replace(weights, lambda1=0.0, lambda2=0.0)

    rng = np.random.default_rng(seed)
    batch = random_batch(cfg, rng)
    gt_override = None
    for _ in range(10):
        with torch.no_grad():
            _, _, extras = compute_losses(model, batch, weights)
        if zero_loss:
            gt_override = extras['masks'].detach().clone()
            break
        if all(abs(z) > 1e-3 for z in _hinge_margins(extras, weights.margin)):
            break
        batch = random_batch(cfg, rng)

    def loss_value() -> float:
        with torch.no_grad():
            value, _, _ = compute_losses(model, batch, weights, gt_override)
        return float(value)

    model.zero_grad(set_to_none=True)
    total, _, _ = compute_losses(model, batch, weights, gt_override)
    total.backward()

    params = [p for p in model.parameters() if p.grad is not None]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(int(offsets[-1]))

    base = loss_value()
    checked, skipped = 0, 0
    max_rel, max_abs = 0.0, 0.0
    for flat in order:
        if checked >= n_params:
            break
        which = int(np.searchsorted(offsets, flat, side='right') - 1)
        param = params[which]
        index = int(flat - offsets[which])
        view = param.data.view(-1)
        analytic = float(param.grad.view(-1)[index])
        original = float(view[index])

        view[index] = original + step
        plus = loss_value()
        view[index] = original - step
        minus = loss_value()
        view[index] = original

        numeric = (plus - minus) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        forward, backward = (plus - base) / step, (base - minus) / step
        # A kink inside [-h, h] splits the one-sided slopes by more than the mismatch
        if rel >= tolerance and abs(forward - backward) > abs(analytic - numeric):
            skipped += 1
            continue
        max_rel = max(max_rel, rel)
        max_abs = max(max_abs, abs(analytic))
        checked += 1

    report = GradientReport(seed, n_params, checked, skipped, max_rel, max_abs, tolerance, zero_loss)
    logger.info(f"[Trainer] Gradient check: {checked} checked, {skipped} skipped, "
                f"max rel err {max_rel:.2e}, max |g| {max_abs:.2e}")
    return report
