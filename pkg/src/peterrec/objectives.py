"""Training losses: next-item and masked-item pre-training, CE and BPR fine-tuning.

Both pre-training objectives reduce to a weighted cross-entropy over a
{0,1} position mask; they differ only in how the batch is built. PAD
positions never contribute to any loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .backbone import ReservedIds
from .errors import DataError
from .tensor import Tensor, pick, reduce_mean, reshape, softmax_cross_entropy, softplus


class LossKind(Enum):
    CE = "ce"
    BPR = "bpr"


@dataclass(frozen=True)
class PretrainBatch:
    inputs: np.ndarray  # int[b, n]
    targets: np.ndarray  # int[b, n], PAD where no target
    mask: np.ndarray  # {0,1}[b, n], 1 where the loss applies


@dataclass(frozen=True)
class FinetuneBatch:
    inputs: np.ndarray  # int[b, n], marker tokens already placed
    labels: np.ndarray  # int[b]
    negatives: np.ndarray | None = None  # int[b], required for BPR

    def __post_init__(self):
        if self.negatives is not None and (np.asarray(self.negatives) == np.asarray(self.labels)).any():
            raise DataError("negative label equals the true label")


def ar_batch(sequences: np.ndarray) -> PretrainBatch:
    """Next-item targets: position t predicts item t+1.

    The final position has no target. A position whose own input is PAD
    is excluded even when its target is real: the left-padded layout
    puts such positions before the first item, where the causal context
    is pure padding and carries no user signal.
    """
    seqs = np.asarray(sequences)
    targets = np.full_like(seqs, ReservedIds.PAD)
    targets[:, :-1] = seqs[:, 1:]
    mask = ((targets != ReservedIds.PAD) & (seqs != ReservedIds.PAD)).astype(np.int8)
    return PretrainBatch(inputs=seqs, targets=targets, mask=mask)


def mask_sequence(seq: np.ndarray, rate: float, rng: np.random.Generator):
    """Replace ceil(rate * #non-PAD) distinct non-PAD positions with MASK.

    Returns (masked copy, chosen positions). At least one position is
    always masked; PAD positions never are.
    """
    seq = np.asarray(seq)
    candidates = np.flatnonzero(seq != ReservedIds.PAD)
    if candidates.size == 0:
        raise DataError("cannot mask an all-PAD sequence")
    count = max(1, math.ceil(rate * candidates.size))
    positions = rng.choice(candidates, size=count, replace=False)
    masked = seq.copy()
    masked[positions] = ReservedIds.MASK
    return masked, np.sort(positions)


def masked_batch(sequences: np.ndarray, rate: float, rng: np.random.Generator) -> PretrainBatch:
    """Masked-item targets: recover the original item at each MASK position."""
    seqs = np.asarray(sequences)
    inputs = seqs.copy()
    targets = np.full_like(seqs, ReservedIds.PAD)
    mask = np.zeros_like(seqs, dtype=np.int8)
    for i in range(seqs.shape[0]):
        masked, positions = mask_sequence(seqs[i], rate, rng)
        inputs[i] = masked
        targets[i, positions] = seqs[i, positions]
        mask[i, positions] = 1
    return PretrainBatch(inputs=inputs, targets=targets, mask=mask)


def _masked_ce(logits: Tensor, batch: PretrainBatch) -> Tensor:
    total = int(batch.mask.sum())
    if total == 0:
        raise DataError("loss mask selects no positions")
    b, n, v = logits.shape
    flat = reshape(logits, (b * n, v))
    weights = batch.mask.reshape(-1).astype(np.float64) / total
    return softmax_cross_entropy(flat, batch.targets.reshape(-1), weights=weights)


def ar_loss(logits: Tensor, batch: PretrainBatch) -> Tensor:
    """Mean CE over next-item positions; logits [b, n, vocab]."""
    return _masked_ce(logits, batch)


def masked_loss(logits: Tensor, batch: PretrainBatch) -> Tensor:
    """Mean CE over masked positions; logits [b, n, vocab]."""
    return _masked_ce(logits, batch)


def bpr_loss(score_pos: Tensor, score_neg: Tensor) -> Tensor:
    """-log sigmoid(pos - neg), stabilized as softplus(neg - pos); mean over elements."""
    return reduce_mean(softplus(score_neg - score_pos))


def sample_negatives(labels: np.ndarray, num_labels: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw from the label set minus the true label, per row."""
    labels = np.asarray(labels)
    if num_labels < 2:
        raise DataError("negative sampling needs at least 2 labels")
    draw = rng.integers(0, num_labels - 1, size=labels.shape)
    return draw + (draw >= labels)


def finetune_loss(model, batch: FinetuneBatch, loss_kind: LossKind, task_kind: str | None = None) -> Tensor:
    """Task loss on label scores: CE over all labels, or BPR against one negative.

    The conventional pairing is CE for classification and BPR for item
    recommendation; other pairings run but warn.
    """
    if task_kind is not None:
        expected = LossKind.CE if task_kind == "classification" else LossKind.BPR
        if loss_kind is not expected:
            warnings.warn(f"{loss_kind.value} loss on a {task_kind} task; conventional choice is {expected.value}")
    scores = model.scores(batch.inputs)
    if loss_kind is LossKind.CE:
        return softmax_cross_entropy(scores, batch.labels)
    if batch.negatives is None:
        raise DataError("BPR needs a sampled negative per instance")
    return bpr_loss(pick(scores, batch.labels), pick(scores, batch.negatives))
