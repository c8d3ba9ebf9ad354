"""Separation quality, intelligibility and cross-modal verification metrics."""

from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pystoi import stoi as stoi_score
from sklearn.metrics import roc_auc_score, roc_curve

from core.errors import DegenerateReference, InvalidInput, ShapeError, SilentReference
from services.dsp import Waveform
from services.networks import Embedding
from services.objectives import UNIT_NORM_TOLERANCE

DB_CAP = 100.0

# pystoi works at 10 kHz on 256-sample frames with a 50% hop and scores
# 30-frame spans; shorter inputs get a placeholder score of 1e-5
STOI_SAMPLE_RATE = 10000
STOI_FRAME = 256
STOI_SPAN_FRAMES = 30
STOI_DEGENERATE = 1e-5
MIN_STOI_SECONDS = (STOI_FRAME + STOI_SPAN_FRAMES * STOI_FRAME // 2) / STOI_SAMPLE_RATE

EmbeddingRows = Union[Sequence[Embedding], np.ndarray]


# ==================== Data Classes ====================

@dataclass(frozen=True)
class BssMetrics:
    """SDR, SIR and SAR of one estimate in dB, capped at +-100."""
    sdr: float
    sir: float
    sar: float

    def to_json(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class VerificationReport:
    auc: float
    eer: float
    n_pairs: int
    threshold_at_eer: float

    def to_json(self) -> Dict[str, float]:
        return asdict(self)


# ==================== Separation ====================

def _db(numerator: float, denominator: float) -> float:
    if numerator <= 0.0:
        return -DB_CAP
    if denominator <= 0.0:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(numerator / denominator), -DB_CAP, DB_CAP))


def _signals(waveforms: Sequence[Waveform], what: str) -> np.ndarray:
    if not waveforms:
        raise InvalidInput(f"no {what} given")
    lengths = {len(w) for w in waveforms}
    if len(lengths) > 1:
        raise ShapeError(f"{what} differ in length: {sorted(lengths)}")
    return np.stack([w.samples for w in waveforms])


def bss_eval(references: Sequence[Waveform], estimates: Sequence[Waveform]) -> List[BssMetrics]:
    """Projection-based SDR/SIR/SAR of each estimate against the reference set.

    s_target is the projection of the estimate onto its own reference,
    e_interf the rest of its projection onto the span of all references,
    and e_artif the residual.

    Raises:
        ShapeError: Counts or lengths differ
        DegenerateReference: A reference has zero energy
    """
    refs = _signals(references, "references")
    ests = _signals(estimates, "estimates")
    if refs.shape != ests.shape:
        raise ShapeError(f"{refs.shape[0]} references x {refs.shape[1]} samples vs "
                         f"{ests.shape[0]} estimates x {ests.shape[1]} samples")
    energies = np.sum(refs ** 2, axis=1)
    silent = [k for k, e in enumerate(energies) if e == 0.0]
    if silent:
        raise DegenerateReference(f"reference(s) {silent} have zero energy")

    results = []
    for k, estimate in enumerate(ests):
        s_target = (estimate @ refs[k]) / energies[k] * refs[k]
        coeffs, *_ = np.linalg.lstsq(refs.T, estimate, rcond=None)
        projection = refs.T @ coeffs
        e_interf = projection - s_target
        e_artif = estimate - projection

        target_energy = float(s_target @ s_target)
        results.append(BssMetrics(
            sdr=_db(target_energy, float(np.sum((e_interf + e_artif) ** 2))),
            sir=_db(target_energy, float(e_interf @ e_interf)),
            sar=_db(float(np.sum((s_target + e_interf) ** 2)), float(e_artif @ e_artif)),
        ))
    return results


def sdr_improvement(references: Sequence[Waveform], estimates: Sequence[Waveform],
                    mixture: Waveform) -> List[float]:
    """SDR of each estimate minus the SDR of the mixture used as that estimate."""
    separated = bss_eval(references, estimates)
    floor = bss_eval(references, [mixture] * len(references))
    return [s.sdr - f.sdr for s, f in zip(separated, floor)]


# ==================== Intelligibility ====================

def stoi(clean: Waveform, processed: Waveform) -> float:
    """Short-time objective intelligibility of processed against clean speech.

    Raises:
        ShapeError: Lengths or sample rates differ
        InvalidInput: Less than MIN_STOI_SECONDS of signal, or too few
            non-silent frames left to score
        SilentReference: Clean signal is all zeros
    """
    if len(clean) != len(processed):
        raise ShapeError(f"clean has {len(clean)} samples, processed has {len(processed)}")
    if clean.sample_rate != processed.sample_rate:
        raise ShapeError(f"sample rates {clean.sample_rate} and {processed.sample_rate} differ")
    if clean.duration < MIN_STOI_SECONDS:
        raise InvalidInput(f"STOI needs at least {MIN_STOI_SECONDS * 1000:.0f} ms, got {clean.duration * 1000:.0f} ms")
    if not np.any(clean.samples):
        raise SilentReference("clean signal is entirely silent")
    score = float(stoi_score(clean.samples, processed.samples, clean.sample_rate, extended=False))
    if score == STOI_DEGENERATE:
        raise InvalidInput(
            f"STOI needs {STOI_SPAN_FRAMES} non-silent frames ({MIN_STOI_SECONDS * 1000:.0f} ms of active speech)"
        )
    return score


# ==================== Verification ====================

def _rows(embeddings: EmbeddingRows) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.atleast_2d(embeddings).astype(np.float64)
    return np.stack([e.values if isinstance(e, Embedding) else np.asarray(e) for e in embeddings])


def equal_error_rate(scores: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """(eer, threshold) where false-accept and false-reject rates cross, interpolated linearly."""
    fpr, tpr, thresholds = roc_curve(labels, scores)
    fnr = 1.0 - tpr
    diff = fpr - fnr
    i = int(np.argmax(diff >= 0.0))
    finite = np.where(np.isfinite(thresholds), thresholds, np.max(scores))
    if diff[i] == 0.0 or i == 0:
        return float(fpr[i]), float(finite[i])
    t = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = fpr[i - 1] + t * (fpr[i] - fpr[i - 1])
    threshold = finite[i - 1] + t * (finite[i] - finite[i - 1])
    return float(eer), float(threshold)


def verification_from_scores(scores: Sequence[float], labels: Sequence[bool]) -> VerificationReport:
    """AUC (ties count one half) and EER of same-person scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores for {labels.size} labels")
    if labels.all() or not labels.any():
        raise InvalidInput("verification needs both same-person and different-person pairs")
    eer, threshold = equal_error_rate(scores, labels)
    return VerificationReport(
        auc=float(roc_auc_score(labels, scores)),
        eer=eer,
        n_pairs=int(labels.size),
        threshold_at_eer=threshold,
    )


def verification_scores(face_embs: EmbeddingRows, voice_embs: EmbeddingRows,
                        labels: Sequence[bool]) -> VerificationReport:
    """Score each face-voice pair as 1 - cosine_distance / 2 and summarize.

    Raises:
        ShapeError: Counts or widths differ
        InvalidInput: Only one class present, or embeddings not unit-norm
    """
    faces, voices = _rows(face_embs), _rows(voice_embs)
    if faces.shape != voices.shape:
        raise ShapeError(f"face embeddings {faces.shape} vs voice embeddings {voices.shape}")
    if len(labels) != faces.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {faces.shape[0]} pairs")
    for name, rows in (('face', faces), ('voice', voices)):
        deviation = np.max(np.abs(np.linalg.norm(rows, axis=1) - 1.0))
        if deviation > UNIT_NORM_TOLERANCE:
            raise InvalidInput(f"{name} embeddings are not unit-norm (deviation {deviation:.2e})")
    distance = 1.0 - np.sum(faces * voices, axis=1)
    return verification_from_scores(1.0 - distance / 2.0, labels)
