"""Datasets: ingestion, padding, splits, marker placement, synthetic generation.

Source files hold one user per line, ``userID<TAB>item,item,...``; target
files hold ``userID<TAB>label``. Sequences are left-padded so the
rightmost position is always the most recent interaction, which is what
causal heads read.

The synthetic generator plants shared latent structure: users belong to
clusters, source sequences mostly draw from the user's cluster, and the
target label is the cluster (classification) or an unseen cluster item
(recommendation). Transfer from source to target therefore must help,
which is what the experiment bench measures.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .adapters import HeadMode
from .backbone import ReservedIds
from .errors import ConfigError, DataError, ParseError, VocabularyError

TASK_KINDS = ("classification", "item_rec")


@dataclass(eq=False)
class SourceDataset:
    user_ids: np.ndarray  # int[b]
    sequences: np.ndarray  # int[b, n], left-padded
    vocab_size: int
    _row_of: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2 or len(self.user_ids) != len(self.sequences):
            raise DataError("source needs one row of items per user id")
        if self.sequences.size and self.sequences.max() >= self.vocab_size:
            raise VocabularyError(
                f"item id {int(self.sequences.max())} outside vocabulary of size {self.vocab_size}"
            )
        self._row_of = {}
        for i, u in enumerate(self.user_ids):
            self._row_of.setdefault(int(u), i)

    def __len__(self):
        return len(self.user_ids)

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    def sequences_for(self, user_ids) -> np.ndarray:
        rows = []
        for u in np.asarray(user_ids):
            i = self._row_of.get(int(u))
            if i is None:
                raise DataError(f"user {int(u)} has no source sequence")
            rows.append(i)
        return self.sequences[rows]


@dataclass(eq=False)
class TargetDataset:
    user_ids: np.ndarray  # int[b]
    labels: np.ndarray  # int[b]
    num_labels: int
    task_kind: str = "classification"

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.user_ids) != len(self.labels):
            raise DataError("target needs one label per user id")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}; pick one of {TASK_KINDS}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise VocabularyError(f"label outside [0, {self.num_labels})")

    def __len__(self):
        return len(self.user_ids)

    def take(self, indices) -> "TargetDataset":
        idx = np.asarray(indices)
        return TargetDataset(self.user_ids[idx], self.labels[idx], self.num_labels, self.task_kind)


def pad_sequence(items, length: int) -> np.ndarray:
    """Left-pad with PAD to ``length``; keep the most recent items on overflow."""
    items = np.asarray(items, dtype=np.int64)
    if items.size > length:
        items = items[-length:]
    out = np.full(length, ReservedIds.PAD, dtype=np.int64)
    if items.size:
        out[length - items.size :] = items
    return out


def load_source(path: str, seq_len: int, vocab_size: int | None = None) -> SourceDataset:
    """Parse a source file, remapping raw item ids to a dense vocabulary.

    Raw ids that are already all >= 3 are taken as-is (vocabulary size
    max+1). Otherwise ids are remapped densely from 3 upward in sorted
    raw-id order and the mapping is written to vocab.tsv beside the file.
    """
    users, raw_seqs = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected userID<TAB>items", line_no=line_no)
            try:
                uid = int(parts[0])
                items = [int(tok) for tok in parts[1].split(",")]
            except ValueError as e:
                raise ParseError(str(e), line_no=line_no) from None
            if not items or parts[1] == "":
                raise ParseError("empty item list", line_no=line_no)
            if any(i < 0 for i in items):
                raise ParseError("negative item id", line_no=line_no)
            users.append(uid)
            raw_seqs.append(items)
    if not users:
        raise DataError(f"no usable lines in {path}")

    all_raw = sorted({i for seq in raw_seqs for i in seq})
    if all_raw[0] >= ReservedIds.FIRST_ITEM:
        mapping = None
        inferred = all_raw[-1] + 1
    else:
        mapping = {raw: ReservedIds.FIRST_ITEM + j for j, raw in enumerate(all_raw)}
        inferred = ReservedIds.FIRST_ITEM + len(all_raw)
        side = os.path.join(os.path.dirname(os.path.abspath(path)), "vocab.tsv")
        with open(side, "w", encoding="utf-8") as fh:
            for raw, dense in mapping.items():
                fh.write(f"{raw}\t{dense}\n")
    if vocab_size is None:
        vocab_size = inferred
    seqs = np.stack(
        [pad_sequence([mapping[i] for i in s] if mapping else s, seq_len) for s in raw_seqs]
    )
    return SourceDataset(np.asarray(users), seqs, vocab_size)


def save_source(ds: SourceDataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, seq in zip(ds.user_ids, ds.sequences):
            items = seq[seq != ReservedIds.PAD]
            fh.write(f"{int(uid)}\t{','.join(str(int(i)) for i in items)}\n")


def load_target(
    path: str,
    task_kind: str = "classification",
    num_labels: int | None = None,
    source: SourceDataset | None = None,
    max_labels_per_user: int | None = None,
) -> TargetDataset:
    """Parse a target file; verify every user has a source sequence when given."""
    users, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected userID<TAB>label", line_no=line_no)
            try:
                users.append(int(parts[0]))
                labels.append(int(parts[1]))
            except ValueError as e:
                raise ParseError(str(e), line_no=line_no) from None
    if not users:
        raise DataError(f"no usable lines in {path}")
    if num_labels is None:
        num_labels = max(labels) + 1
    ds = TargetDataset(np.asarray(users), np.asarray(labels), num_labels, task_kind)
    if source is not None:
        source.sequences_for(ds.user_ids)
    if max_labels_per_user is not None:
        _, counts = np.unique(ds.user_ids, return_counts=True)
        if counts.max() > max_labels_per_user:
            raise DataError(f"a user has {int(counts.max())} labels, bound is {max_labels_per_user}")
    return ds


def save_target(ds: TargetDataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, y in zip(ds.user_ids, ds.labels):
            fh.write(f"{int(uid)}\t{int(y)}\n")


def split_target(ds: TargetDataset, seed: int):
    """Seeded shuffle into train 70% / valid 3% / test 27%."""
    n = len(ds)
    if n < 100:
        raise DataError(f"need at least 100 target instances to split, got {n}")
    order = rng_mod.split(seed, "target_split").permutation(n)
    n_train = round(0.70 * n)
    n_valid = round(0.03 * n)
    train = ds.take(order[:n_train])
    valid = ds.take(order[n_train : n_train + n_valid])
    test = ds.take(order[n_train + n_valid :])
    return train, valid, test


def take_fraction(ds: TargetDataset, fraction: float, seed: int) -> TargetDataset:
    """Seeded subset with ceil(fraction * n) instances, for limited-data runs."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"data fraction must be in (0, 1], got {fraction}")
    n = len(ds)
    count = max(1, math.ceil(fraction * n))
    order = rng_mod.split(seed, "data_fraction").permutation(n)
    return ds.take(np.sort(order[:count]))


# -- marker placement --


def build_finetune_inputs(sequences: np.ndarray, head_mode: HeadMode, causal: bool) -> np.ndarray:
    """Place classification markers around left-padded sequences, batched."""
    if head_mode is HeadMode.CAUSAL_START_TCL:
        raise ConfigError(
            "head mode causal_start_tcl is rejected: a leading marker under causal "
            "convolution sees nothing but itself"
        )
    if head_mode is HeadMode.CAUSAL_END_TCL and not causal:
        raise ConfigError("head mode causal_end_tcl needs a causal backbone")
    if head_mode is HeadMode.NONCAUSAL_BOTH_TCL and causal:
        raise ConfigError("head mode noncausal_both_tcl needs a non-causal backbone")
    seqs = np.asarray(sequences)
    b, n = seqs.shape
    if head_mode is HeadMode.SUM_ALL_HIDDEN:
        return seqs.copy()
    if head_mode is HeadMode.CAUSAL_END_TCL:
        out = np.empty((b, n + 1), dtype=seqs.dtype)
        out[:, :n] = seqs
        out[:, n] = ReservedIds.TCL
        return out
    out = np.full((b, n + 2), ReservedIds.PAD, dtype=seqs.dtype)
    out[:, 1 : n + 1] = seqs
    first = (seqs != ReservedIds.PAD).argmax(axis=1)
    out[np.arange(b), first] = ReservedIds.TCL
    out[:, n + 1] = ReservedIds.TCL
    return out


def build_finetune_input(seq, head_mode: HeadMode, causal: bool) -> np.ndarray:
    """Single-sequence form of build_finetune_inputs."""
    return build_finetune_inputs(np.asarray(seq)[None, :], head_mode, causal)[0]


# -- synthetic corpus --


@dataclass(frozen=True)
class SyntheticSpec:
    clusters: int = 8
    items_per_cluster: int = 50
    noise: float = 0.3
    seq_len: int = 50
    users: int = 4000
    target_users: int = 800
    task: str = "classification"
    labels_per_user: int = 1
    # Trailing fraction of every sequence drawn from a per-user decoy
    # cluster while the label stays the underlying cluster. At 0.5 the
    # two clusters tie in item counts, so any bag-of-items readout sits
    # near a coin flip and only order-aware readouts recover the label.
    drift: float = 0.0

    def __post_init__(self):
        if self.clusters < 1 or self.items_per_cluster < 1:
            raise ConfigError("clusters and items_per_cluster must be positive")
        if not 0 <= self.noise < 1:
            raise ConfigError(f"noise rate must be in [0, 1), got {self.noise}")
        if not 0 <= self.drift < 1:
            raise ConfigError(f"drift fraction must be in [0, 1), got {self.drift}")
        if self.drift > 0 and self.clusters < 2:
            raise ConfigError("drift needs a second cluster to drift toward")
        if self.seq_len < 2:
            raise ConfigError("sequences need at least 2 items")
        if self.users < self.clusters:
            raise ConfigError("need at least one user per cluster")
        if not 0 < self.target_users <= self.users:
            raise ConfigError("target_users must be in (0, users]")
        if not 1 <= self.labels_per_user <= 3:
            raise ConfigError("labels_per_user mirrors the cold-user bound g <= 3")
        if self.task not in TASK_KINDS:
            raise ConfigError(f"unknown task {self.task!r}; pick one of {TASK_KINDS}")

    @property
    def vocab_size(self) -> int:
        return ReservedIds.FIRST_ITEM + self.clusters * self.items_per_cluster

    @property
    def num_labels(self) -> int:
        return self.clusters if self.task == "classification" else self.clusters * self.items_per_cluster

    def cluster_of_user(self, user_ids) -> np.ndarray:
        return np.asarray(user_ids) % self.clusters

    def decoy_of_user(self, user_ids) -> np.ndarray:
        """Drift destination; varies across users and never equals the own cluster."""
        uids = np.asarray(user_ids)
        step = 1 + (uids // self.clusters) % (self.clusters - 1)
        return (self.cluster_of_user(uids) + step) % self.clusters

    def cluster_of_item(self, items) -> np.ndarray:
        return (np.asarray(items) - ReservedIds.FIRST_ITEM) // self.items_per_cluster


def generate_synthetic(spec: SyntheticSpec, seed: int):
    """Deterministic clustered corpus; returns (SourceDataset, TargetDataset)."""
    c, p, n = spec.clusters, spec.items_per_cluster, spec.seq_len
    users = np.arange(spec.users)
    cluster = spec.cluster_of_user(users)

    gen = rng_mod.split(seed, "synth_source")
    own = ReservedIds.FIRST_ITEM + cluster[:, None] * p + gen.integers(0, p, size=(spec.users, n))
    drifted = n - int(round(spec.drift * n))
    if drifted < n:
        # drawn only when drift is on so the drift=0 stream stays unchanged
        decoy = ReservedIds.FIRST_ITEM + spec.decoy_of_user(users)[:, None] * p
        decoy = decoy + gen.integers(0, p, size=(spec.users, n))
        own = np.where(np.arange(n) >= drifted, decoy, own)
    noise = ReservedIds.FIRST_ITEM + gen.integers(0, c * p, size=(spec.users, n))
    use_noise = gen.random((spec.users, n)) < spec.noise
    seqs = np.where(use_noise, noise, own)
    source = SourceDataset(users, seqs, spec.vocab_size)

    # a contiguous user prefix is cluster-balanced because assignment is round-robin
    t_users = users[: spec.target_users]
    if spec.task == "classification":
        target = TargetDataset(t_users, spec.cluster_of_user(t_users), spec.num_labels, spec.task)
        return source, target

    gen = rng_mod.split(seed, "synth_target")
    uids, labels = [], []
    for u in t_users:
        base = ReservedIds.FIRST_ITEM + int(cluster[u]) * p
        seen = set(seqs[u].tolist())
        fresh = [i for i in range(base, base + p) if i not in seen]
        pool = fresh if len(fresh) >= spec.labels_per_user else list(range(base, base + p))
        picked = gen.choice(len(pool), size=spec.labels_per_user, replace=False)
        for j in picked:
            uids.append(u)
            labels.append(pool[j] - ReservedIds.FIRST_ITEM)
    target = TargetDataset(np.asarray(uids), np.asarray(labels), spec.num_labels, spec.task)
    return source, target


def majority_vote_accuracy(source: SourceDataset, target: TargetDataset, spec: SyntheticSpec) -> float:
    """Ceiling for the classification task: vote item->cluster memberships."""
    if spec.task != "classification":
        raise ConfigError("the voting ceiling is defined for the classification task")
    seqs = source.sequences_for(target.user_ids)
    correct = 0
    for row, y in zip(seqs, target.labels):
        items = row[row != ReservedIds.PAD]
        votes = np.bincount(spec.cluster_of_item(items), minlength=spec.clusters)
        correct += int(votes.argmax() == y)
    return correct / len(target)
