"""Metrics, the sampled-negative ranking protocol, and the ablation bench.

Every comparison the package makes (pre-trained vs from-scratch, patch
vs full fine-tune vs head-only, insertion layouts, limited data) runs
through one experiment entry point so the only thing that differs
between two runs is the plan.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import rng as rng_mod
from .adapters import FinetuneModel, HeadMode, InsertionMode, ParameterPartition, count_parameters
from .backbone import BackboneConfig, ReservedIds, SequenceModel
from .corpus import SourceDataset, TargetDataset, build_finetune_inputs, take_fraction
from .errors import ConfigError, DataError
from .objectives import (
    FinetuneBatch,
    LossKind,
    ar_batch,
    ar_loss,
    finetune_loss,
    masked_batch,
    masked_loss,
    sample_negatives,
)
from .optim import Adam
from .tensor import Tape


# -- metrics --


def mrr_at_k(rank: int, k: int = 5) -> float:
    """Reciprocal rank, zeroed outside the top k. rank is 1-based."""
    if rank < 1:
        raise DataError(f"rank is 1-based, got {rank}")
    return 1.0 / rank if rank <= k else 0.0


def hr_at_k(rank: int, k: int = 5) -> float:
    if rank < 1:
        raise DataError(f"rank is 1-based, got {rank}")
    return 1.0 if rank <= k else 0.0


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise DataError("accuracy of an empty prediction set is undefined")
    return float(np.count_nonzero(preds == labels)) / preds.size


class MajorityLabel:
    """Constant predictor of the most frequent training label."""

    def __init__(self, label: int):
        self.label = int(label)

    def predict(self, count: int) -> np.ndarray:
        return np.full(count, self.label, dtype=np.int64)

    def accuracy_on(self, labels) -> float:
        labels = np.asarray(labels)
        return accuracy(self.predict(labels.size), labels)


def labelcs_baseline(train_labels) -> MajorityLabel:
    labels = np.asarray(train_labels)
    if labels.size == 0:
        raise DataError("majority baseline needs at least one training label")
    return MajorityLabel(np.bincount(labels).argmax())


# -- ranking protocol --


def sample_candidates(true_label: int, num_labels: int, negatives: int, gen: np.random.Generator):
    """True label plus ``negatives`` distinct sampled negatives, shuffled.

    Returns (candidate labels, index of the true label in them). The
    shuffle fixes the tie-breaking order before any scores are seen.
    """
    if negatives + 1 > num_labels:
        raise ConfigError(f"cannot sample {negatives} distinct negatives from {num_labels} labels")
    draw = gen.choice(num_labels - 1, size=negatives, replace=False)
    negs = draw + (draw >= true_label)
    cands = np.concatenate(([true_label], negs))
    perm = gen.permutation(negatives + 1)
    cands = cands[perm]
    true_pos = int(np.nonzero(perm == 0)[0][0])
    return cands, true_pos


def rank_in_candidates(scores: np.ndarray, true_pos: int) -> int:
    """1-based rank of the true candidate; ties keep candidate order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return int(np.nonzero(order == true_pos)[0][0]) + 1


def _batched_scores(model: FinetuneModel, inputs: np.ndarray, batch_size: int) -> np.ndarray:
    chunks = []
    for lo in range(0, len(inputs), batch_size):
        chunks.append(model.scores(inputs[lo : lo + batch_size]).data)
    return np.concatenate(chunks, axis=0)


def evaluate_ranking(
    model: FinetuneModel,
    source: SourceDataset,
    target: TargetDataset,
    seed: int,
    k: int = 5,
    negatives: int = 99,
    batch_size: int = 256,
) -> dict:
    """MRR@k and HR@k with per-instance sampled negatives."""
    inputs = build_finetune_inputs(source.sequences_for(target.user_ids), model.head_mode, model.cfg.causal)
    scores = _batched_scores(model, inputs, batch_size)
    gen = rng_mod.split(seed, "eval_negatives")
    mrr = hr = 0.0
    for i, y in enumerate(target.labels):
        cands, true_pos = sample_candidates(int(y), target.num_labels, negatives, gen)
        rank = rank_in_candidates(scores[i, cands], true_pos)
        mrr += mrr_at_k(rank, k)
        hr += hr_at_k(rank, k)
    n = len(target)
    return {f"mrr{k}": mrr / n, f"hr{k}": hr / n}


def evaluate_accuracy(model: FinetuneModel, source: SourceDataset, target: TargetDataset, batch_size: int = 256) -> float:
    inputs = build_finetune_inputs(source.sequences_for(target.user_ids), model.head_mode, model.cfg.causal)
    scores = _batched_scores(model, inputs, batch_size)
    return accuracy(scores.argmax(axis=1), target.labels)


# -- reports --


def plan_digest(plan) -> str:
    def canon(v):
        if isinstance(v, Enum):
            return v.value
        if isinstance(v, tuple):
            return list(v)
        return v

    payload = {k: canon(v) for k, v in asdict(plan).items()}
    payload["kind"] = type(plan).__name__
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunReport:
    plan: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    # the trained model and its partition ride along for callers; never serialized
    model: object = field(default=None, repr=False, compare=False)
    partition: object = field(default=None, repr=False, compare=False)

    def lines(self, timing: bool = True) -> list:
        rows = self.records + ([self.summary] if self.summary else [])
        out = []
        for row in rows:
            if not timing:
                row = {k: v for k, v in row.items() if k != "elapsed_s"}
            out.append(json.dumps(row, sort_keys=True))
        return out

    def canonical_bytes(self) -> bytes:
        """Report content with wall-clock fields removed; the determinism unit."""
        return ("\n".join(self.lines(timing=False)) + "\n").encode("utf-8")

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines()) + "\n")

    def metric_curve(self, key: str) -> list:
        return [r[key] for r in self.records if key in r]


# -- pre-training --

OBJECTIVES = ("next_item", "masked")


@dataclass(frozen=True)
class PretrainPlan:
    objective: str = "next_item"
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    mask_rate: float = 0.30
    valid_fraction: float = 0.10
    seed: int = 0
    ranking_k: int = 5

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; pick one of {OBJECTIVES}")
        if not 0 < self.valid_fraction < 1:
            raise ConfigError("valid_fraction must be in (0, 1)")
        if not 0 < self.mask_rate <= 1:
            raise ConfigError("mask_rate must be in (0, 1]")


def pretrain_validation_mrr(model: SequenceModel, val_seqs: np.ndarray, k: int = 5, batch_size: int = 64) -> float:
    """Hold out each sequence's last item and rank it against the full pool."""
    seqs = np.asarray(val_seqs)
    targets = seqs[:, -1]
    if (targets == ReservedIds.PAD).any():
        raise DataError("validation sequences must end in a real item")
    if model.cfg.causal:
        inputs = np.empty_like(seqs)
        inputs[:, 0] = ReservedIds.PAD
        inputs[:, 1:] = seqs[:, :-1]
    else:
        inputs = seqs.copy()
        inputs[:, -1] = ReservedIds.MASK
    total = 0.0
    for lo in range(0, len(seqs), batch_size):
        chunk = inputs[lo : lo + batch_size]
        scores = model.logits(model.hidden(chunk)).data[:, -1, :].astype(np.float64)
        scores[:, : ReservedIds.FIRST_ITEM] = -np.inf
        for row, y in zip(scores, targets[lo : lo + batch_size]):
            rank = 1 + int(np.count_nonzero(row > row[y]))
            total += mrr_at_k(rank, k)
    return total / len(seqs)


def pretrain(model: SequenceModel, source: SourceDataset, plan: PretrainPlan) -> RunReport:
    """Self-supervised training with a 90/10 train/validation user split."""
    if plan.objective == "masked" and model.cfg.causal:
        raise ConfigError("the masked objective needs a non-causal backbone")
    if plan.objective == "next_item" and not model.cfg.causal:
        raise ConfigError("the next-item objective needs a causal backbone")
    digest = plan_digest(plan)
    report = RunReport(plan={"kind": "pretrain", "digest": digest})
    order = rng_mod.split(plan.seed, "pretrain_split").permutation(len(source))
    n_valid = max(1, round(plan.valid_fraction * len(source)))
    valid_rows, train_rows = order[:n_valid], order[n_valid:]
    if train_rows.size == 0:
        raise DataError("no training sequences left after the validation split")
    batch_gen = rng_mod.split(plan.seed, "pretrain_batches")
    mask_gen = rng_mod.split(plan.seed, "pretrain_masking")
    opt = Adam(model.params.tensors(), lr=plan.lr)
    t0 = time.perf_counter()
    for epoch in range(1, plan.epochs + 1):
        perm = train_rows[batch_gen.permutation(train_rows.size)]
        losses = []
        for lo in range(0, perm.size, plan.batch_size):
            seqs = source.sequences[perm[lo : lo + plan.batch_size]]
            if plan.objective == "next_item":
                batch = ar_batch(seqs)
                loss_fn = ar_loss
            else:
                batch = masked_batch(seqs, plan.mask_rate, mask_gen)
                loss_fn = masked_loss
            with Tape() as tape:
                loss = loss_fn(model.logits(model.hidden(batch.inputs)), batch)
            tape.backward(loss)
            losses.append(float(loss.data))
            opt.step()
            model.params.zero_grads()
        mrr = pretrain_validation_mrr(model, source.sequences[valid_rows], k=plan.ranking_k)
        report.records.append(
            {
                "record": "epoch",
                "plan": digest,
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                f"mrr{plan.ranking_k}": mrr,
                "elapsed_s": round(time.perf_counter() - t0, 3),
            }
        )
    final = report.records[-1] if report.records else {}
    report.summary = {
        "record": "summary",
        "plan": digest,
        "objective": plan.objective,
        "epochs": plan.epochs,
        "loss": final.get("loss"),
        f"mrr{plan.ranking_k}": final.get(f"mrr{plan.ranking_k}"),
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    return report


# -- ablation matrix --


class AblationMode(Enum):
    PETERREC = "peterrec"
    PETERZERO = "peterzero"
    FINEALL = "fineall"
    FINEZERO = "finezero"
    FINECLS = "finecls"
    FINELAST1 = "finelast1"
    FINELAST2 = "finelast2"
    LABELCS = "labelcs"

    @property
    def needs_pretrained(self) -> bool:
        return self in (
            AblationMode.PETERREC,
            AblationMode.FINEALL,
            AblationMode.FINECLS,
            AblationMode.FINELAST1,
            AblationMode.FINELAST2,
        )

    @property
    def has_patches(self) -> bool:
        return self in (AblationMode.PETERREC, AblationMode.PETERZERO)


@dataclass(frozen=True)
class ExperimentPlan:
    mode: AblationMode
    head_mode: HeadMode = HeadMode.CAUSAL_END_TCL
    insertion: InsertionMode = InsertionMode.SERIAL_TWO_PER_BLOCK
    bottleneck: int | None = None
    loss: LossKind | None = None  # default: CE for classification, BPR for item_rec
    data_fraction: float = 1.0
    epochs: int = 10
    batch_size: int = 512
    lr: float = 1e-3
    tune_layernorm: bool = False
    eval_negatives: int = 99
    ranking_k: int = 5
    seed: int = 0


def build_for_mode(
    plan: ExperimentPlan, cfg: BackboneConfig, num_labels: int, pretrained=None
) -> tuple:
    """Construct the fine-tune model and partition an ablation mode implies."""
    mode = plan.mode
    if mode is AblationMode.LABELCS:
        raise ConfigError("the majority baseline has no model to build")
    if mode.needs_pretrained and pretrained is None:
        raise ConfigError(f"mode {mode.value} needs a pre-trained checkpoint")
    model = FinetuneModel(
        cfg,
        num_labels,
        plan.head_mode,
        insertion=plan.insertion if mode.has_patches else None,
        bottleneck=plan.bottleneck,
        source=pretrained if mode.needs_pretrained else None,
        seed=plan.seed,
    )
    if mode.has_patches:
        partition = model.peterrec_partition(plan.tune_layernorm)
    elif mode in (AblationMode.FINEALL, AblationMode.FINEZERO):
        partition = model.all_tunable_partition()
    elif mode is AblationMode.FINECLS:
        partition = model.head_only_partition()
    else:
        partition = model.last_layers_partition(1 if mode is AblationMode.FINELAST1 else 2)
    return model, partition


def _epoch_metrics(plan, model, source, test):
    if test.task_kind == "classification":
        return {"acc": evaluate_accuracy(model, source, test, batch_size=plan.batch_size)}
    return evaluate_ranking(
        model, source, test, seed=plan.seed, k=plan.ranking_k, negatives=plan.eval_negatives, batch_size=plan.batch_size
    )


def run_experiment(
    plan: ExperimentPlan,
    cfg: BackboneConfig,
    source: SourceDataset,
    train: TargetDataset,
    test: TargetDataset,
    pretrained=None,
) -> RunReport:
    """Fine-tune per plan, evaluating on the test split after every epoch."""
    digest = plan_digest(plan)
    t0 = time.perf_counter()
    report = RunReport(plan={"kind": "experiment", "digest": digest, "mode": plan.mode.value})

    if plan.mode is AblationMode.LABELCS:
        clf = labelcs_baseline(train.labels)
        metrics = {"acc": clf.accuracy_on(test.labels)}
        report.records.append(
            {"record": "epoch", "plan": digest, "epoch": 1, **metrics, "tunable_fraction": 0.0,
             "elapsed_s": round(time.perf_counter() - t0, 3)}
        )
        report.summary = {
            "record": "summary", "plan": digest, "mode": plan.mode.value, "epochs": 1, **metrics,
            "tunable": 0, "total": 0, "tunable_fraction": 0.0,
            "elapsed_s": round(time.perf_counter() - t0, 3),
        }
        return report

    train_used = take_fraction(train, plan.data_fraction, plan.seed) if plan.data_fraction < 1.0 else train
    loss_kind = plan.loss
    if loss_kind is None:
        loss_kind = LossKind.CE if train.task_kind == "classification" else LossKind.BPR
    model, partition = build_for_mode(plan, cfg, train.num_labels, pretrained)
    counts = count_parameters(model.params, partition)
    opt = Adam([model.params[n] for n in partition.tunable], lr=plan.lr)
    batch_gen = rng_mod.split(plan.seed, "finetune_batches")
    neg_gen = rng_mod.split(plan.seed, "finetune_negatives")

    seqs_all = source.sequences_for(train_used.user_ids)
    inputs_all = build_finetune_inputs(seqs_all, plan.head_mode, cfg.causal)
    for epoch in range(1, plan.epochs + 1):
        perm = batch_gen.permutation(len(train_used))
        losses = []
        for lo in range(0, perm.size, plan.batch_size):
            rows = perm[lo : lo + plan.batch_size]
            labels = train_used.labels[rows]
            negs = sample_negatives(labels, train_used.num_labels, neg_gen) if loss_kind is LossKind.BPR else None
            batch = FinetuneBatch(inputs=inputs_all[rows], labels=labels, negatives=negs)
            with Tape() as tape:
                loss = finetune_loss(model, batch, loss_kind, task_kind=train_used.task_kind)
            tape.backward(loss)
            losses.append(float(loss.data))
            opt.step()
            model.params.zero_grads()
        metrics = _epoch_metrics(plan, model, source, test)
        report.records.append(
            {
                "record": "epoch",
                "plan": digest,
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                **metrics,
                "tunable_fraction": counts.tunable_fraction,
                "elapsed_s": round(time.perf_counter() - t0, 3),
            }
        )
    final = report.records[-1]
    metric_keys = [k for k in final if k in ("acc", f"mrr{plan.ranking_k}", f"hr{plan.ranking_k}")]
    report.summary = {
        "record": "summary",
        "plan": digest,
        "mode": plan.mode.value,
        "epochs": plan.epochs,
        **{k: final[k] for k in metric_keys},
        "tunable": counts.tunable,
        "total": counts.total,
        "tunable_fraction": counts.tunable_fraction,
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    report.model = model
    report.partition = partition
    return report
