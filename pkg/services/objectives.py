"""Training objectives: mask prediction, cross-modal matching, speaker consistency, PIT.

Every loss accepts torch tensors (batched on the leading axis) or
Embedding/ComplexMask values, and returns a tensor so it can be
back-propagated. Hinges use a zero subgradient at the boundary.
"""

from dataclasses import asdict, dataclass
from itertools import permutations
from typing import Dict, Sequence, Tuple, Union

import numpy as np
import torch

from core.config import RunConfig
from core.errors import InvalidInput, NumericalError, ShapeError
from services.dsp import ComplexMask
from services.networks import Embedding

UNIT_NORM_TOLERANCE = 1e-4
MAX_PIT_SOURCES = 3

EmbeddingLike = Union[Embedding, torch.Tensor, np.ndarray]
MaskLike = Union[ComplexMask, torch.Tensor, np.ndarray]


# ==================== Data Classes ====================

@dataclass(frozen=True)
class LossWeights:
    """Weights, margin and per-term switches of the overall objective."""
    lambda1: float = 0.01
    lambda2: float = 0.01
    margin: float = 0.5
    mask: bool = True
    cross_modal: bool = True
    consistency: bool = True
    mask_reduction: str = 'mean'

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidInput("loss weights must be non-negative")
        if self.margin < 0:
            raise InvalidInput("margin must be non-negative")
        if self.mask_reduction not in ('mean', 'sum'):
            raise InvalidInput(f"mask_reduction must be 'mean' or 'sum', got '{self.mask_reduction}'")

    @classmethod
    def from_config(cls, run: RunConfig) -> 'LossWeights':
        return cls(**run.section('loss'))

    @property
    def uses_cross_modal(self) -> bool:
        return self.cross_modal and self.lambda1 > 0

    @property
    def uses_consistency(self) -> bool:
        return self.consistency and self.lambda2 > 0


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values; disabled terms are reported as 0."""
    mask_prediction: float
    cross_modal: float
    consistency: float
    total: float

    def to_json(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, items: Sequence['LossBreakdown']) -> 'LossBreakdown':
        n = len(items)
        return cls(
            mask_prediction=sum(i.mask_prediction for i in items) / n,
            cross_modal=sum(i.cross_modal for i in items) / n,
            consistency=sum(i.consistency for i in items) / n,
            total=sum(i.total for i in items) / n,
        )


# ==================== Helpers ====================

def _as_tensor(x: Union[EmbeddingLike, MaskLike]) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, Embedding):
        return torch.as_tensor(x.values, dtype=torch.float64)
    if isinstance(x, ComplexMask):
        return torch.as_tensor(x.stacked(), dtype=torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _require_unit(x: torch.Tensor, name: str) -> None:
    norms = torch.linalg.vector_norm(x.detach(), dim=-1)
    worst = float(torch.max(torch.abs(norms - 1.0)))
    if worst > UNIT_NORM_TOLERANCE:
        raise InvalidInput(f"{name} is not unit-norm (deviation {worst:.2e})")


def hinge(z: torch.Tensor) -> torch.Tensor:
    """max(0, z) with gradient 0 at z = 0."""
    return torch.where(z > 0, z, torch.zeros_like(z))


# ==================== Embedding Losses ====================

def cosine_distance(a: EmbeddingLike, b: EmbeddingLike) -> torch.Tensor:
    """1 - <a, b> for unit vectors, in [0, 2]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"embedding widths {a.shape[-1]} and {b.shape[-1]} differ")
    _require_unit(a, "first embedding")
    _require_unit(b, "second embedding")
    return 1.0 - torch.sum(a * b, dim=-1)


def triplet_loss(anchor: EmbeddingLike, pos: EmbeddingLike, neg: EmbeddingLike,
                 m: float = 0.5) -> torch.Tensor:
    """max{0, D(anchor, pos) - D(anchor, neg) + m}"""
    return hinge(cosine_distance(anchor, pos) - cosine_distance(anchor, neg) + m)


def cross_modal_loss(aA1: EmbeddingLike, aA2: EmbeddingLike, aB1: EmbeddingLike, aB2: EmbeddingLike,
                     iA: EmbeddingLike, iB: EmbeddingLike, m: float = 0.5) -> torch.Tensor:
    """Each voice embedding should sit closer to its own face than to the other face."""
    return (triplet_loss(aA1, iA, iB, m) + triplet_loss(aA2, iA, iB, m)
            + triplet_loss(aB1, iB, iA, m) + triplet_loss(aB2, iB, iA, m))


def consistency_loss(aA1: EmbeddingLike, aA2: EmbeddingLike, aB1: EmbeddingLike, aB2: EmbeddingLike,
                     m: float = 0.5) -> torch.Tensor:
    """The two segments of speaker A should embed closer to each other than to B."""
    return triplet_loss(aA1, aA2, aB1, m) + triplet_loss(aA1, aA2, aB2, m)


# ==================== Mask Losses ====================

def _stack_masks(masks: Union[Sequence[MaskLike], torch.Tensor]) -> torch.Tensor:
    if isinstance(masks, torch.Tensor):
        return masks
    return torch.stack([_as_tensor(m) for m in masks])


def _per_mask(diff: torch.Tensor, reduction: str) -> torch.Tensor:
    squared = diff * diff
    if reduction == 'sum':
        return squared.sum(dim=(-3, -2, -1))
    return squared.mean(dim=(-3, -2, -1))


def mask_prediction_loss(pred: Union[Sequence[MaskLike], torch.Tensor],
                         gt: Union[Sequence[MaskLike], torch.Tensor],
                         reduction: str = 'mean') -> torch.Tensor:
    """Squared error per mask (mean or sum over 2 x F x T), summed over masks.

    Tensors are M x 2 x F x T, or B x M x 2 x F x T in which case the result
    is averaged over the batch.
    """
    pred, gt = _stack_masks(pred), _stack_masks(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"predicted masks {tuple(pred.shape)} vs targets {tuple(gt.shape)}")
    if pred.dim() < 4:
        raise ShapeError(f"masks must be M x 2 x F x T, got {tuple(pred.shape)}")
    per_mask = _per_mask(pred - gt.to(pred.dtype), reduction)
    total = per_mask.sum(dim=-1)
    return total.mean() if total.dim() > 0 else total


def pit_mask_loss(preds: Union[Sequence[MaskLike], torch.Tensor],
                  gts: Union[Sequence[MaskLike], torch.Tensor],
                  reduction: str = 'mean') -> Tuple[torch.Tensor, Tuple[int, ...]]:
    """Minimum mask loss over assignments; perm[k] is the prediction matched to target k."""
    preds, gts = _stack_masks(preds), _stack_masks(gts)
    if preds.shape[0] != gts.shape[0]:
        raise ShapeError(f"{preds.shape[0]} predictions for {gts.shape[0]} targets")
    if preds.shape[1:] != gts.shape[1:]:
        raise ShapeError(f"mask shapes {tuple(preds.shape[1:])} and {tuple(gts.shape[1:])} differ")
    n = preds.shape[0]
    if n > MAX_PIT_SOURCES:
        raise InvalidInput(f"exhaustive PIT supports up to {MAX_PIT_SOURCES} sources, got {n}")

    gts = gts.to(preds.dtype)
    cost = torch.stack([
        torch.stack([_per_mask(preds[i] - gts[j], reduction) for j in range(n)])
        for i in range(n)
    ])
    best_value, best_perm = None, None
    for perm in permutations(range(n)):
        value = sum(cost[perm[k], k] for k in range(n))
        if best_value is None or float(value) < float(best_value):
            best_value, best_perm = value, perm
    return best_value, best_perm


# ==================== Overall Objective ====================

def weighted_total(mask_term: torch.Tensor, cross_term: torch.Tensor, consistency_term: torch.Tensor,
                   w: LossWeights) -> Tuple[torch.Tensor, LossBreakdown]:
    """Differentiable total plus its breakdown.

    Raises:
        NumericalError: Any term is NaN or infinite
    """
    terms = {
        'mask_prediction': (mask_term, w.mask, 1.0),
        'cross_modal': (cross_term, w.uses_cross_modal, w.lambda1),
        'consistency': (consistency_term, w.uses_consistency, w.lambda2),
    }
    total = None
    reported: Dict[str, float] = {}
    for name, (value, enabled, weight) in terms.items():
        value = _as_tensor(value)
        scalar = float(value.detach())
        if not np.isfinite(scalar):
            raise NumericalError(name, scalar)
        if not enabled:
            reported[name] = 0.0
            continue
        reported[name] = scalar
        contribution = value * weight
        total = contribution if total is None else total + contribution
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total, LossBreakdown(total=float(total.detach()), **reported)


def total_loss(parts: Sequence[Union[float, torch.Tensor]], w: LossWeights) -> LossBreakdown:
    """Breakdown of (mask_prediction, cross_modal, consistency) under the weights."""
    if len(parts) != 3:
        raise InvalidInput(f"expected 3 loss parts, got {len(parts)}")
    mask_term, cross_term, consistency_term = (_as_tensor(p) for p in parts)
    _, breakdown = weighted_total(mask_term, cross_term, consistency_term, w)
    return breakdown

