"""Bottleneck patches grafted into a frozen backbone, plus the task head.

Fine-tuning touches only the patches, the task head, and the token
embedding for the classification marker; everything pre-trained stays
frozen. Four insertion layouts are supported, two serial and two
parallel. The parallel layouts add the patch's bottleneck branch
(without its internal shortcut) into the block's own sum; keeping the
internal shortcut there would double the trunk signal and break the
exact identity-at-initialization property.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import rng as rng_mod
from .backbone import BackboneConfig, ReservedIds, SequenceModel
from .errors import ConfigError
from .optim import ParameterStore
from .tensor import Tensor, embedding_lookup, matmul, reduce_sum, relu, select_positions


class HeadMode(Enum):
    """Where the classification marker goes and which hiddens feed the head."""

    CAUSAL_END_TCL = "causal_end_tcl"
    NONCAUSAL_BOTH_TCL = "noncausal_both_tcl"
    SUM_ALL_HIDDEN = "sum_all_hidden"
    # Constructible so the rejection is testable, never runnable: under
    # causal convolution the first position sees only itself, so a
    # leading marker's hidden state carries no user signal.
    CAUSAL_START_TCL = "causal_start_tcl"

    @property
    def uses_tcl(self) -> bool:
        return self is not HeadMode.SUM_ALL_HIDDEN


class InsertionMode(Enum):
    SERIAL_TWO_PER_BLOCK = "serial2"
    SERIAL_ONE_PER_BLOCK = "serial1"
    PARALLEL_BEFORE_LN = "parallel_ln"
    PARALLEL_AFTER_ACTIVATION = "parallel_act"

    @property
    def patches_per_block(self) -> int:
        return 1 if self is InsertionMode.SERIAL_ONE_PER_BLOCK else 2

    @property
    def known_degraded(self) -> bool:
        # converges visibly worse; kept for the insertion-sensitivity study
        return self is InsertionMode.PARALLEL_AFTER_ACTIVATION


def patch_core(params: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    """The bottleneck branch alone: up(relu(down(x))), no shortcut."""
    h = relu(matmul(x, params[f"{prefix}.down.weight"]) + params[f"{prefix}.down.bias"])
    return matmul(h, params[f"{prefix}.up.weight"]) + params[f"{prefix}.up.bias"]


def patch_forward(params: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    """Full patch: x + up(relu(down(x)))."""
    return x + patch_core(params, prefix, x)


@dataclass(frozen=True)
class ParameterPartition:
    """Disjoint, exhaustive split of a store's names into frozen and tunable."""

    frozen: tuple
    tunable: tuple

    @staticmethod
    def from_tunable(store: ParameterStore, tunable_names) -> "ParameterPartition":
        tunable_set = set(tunable_names)
        missing = tunable_set - set(store.names())
        if missing:
            raise ConfigError(f"partition names not in the model: {sorted(missing)}")
        frozen = tuple(n for n in store.names() if n not in tunable_set)
        tunable = tuple(n for n in store.names() if n in tunable_set)
        return ParameterPartition(frozen=frozen, tunable=tunable)


NEW_PARAM_PREFIXES = ("patch.", "task_head.", "tcl.")


class FinetuneModel:
    """A backbone rebuilt for a labeled task: patches, marker token, head.

    The pre-training vocabulary head is dropped; a fresh linear head over
    the task's label set replaces it. All parameters (copied backbone plus
    the new ones) live in one ordered store so checkpoints and partition
    digests cover the whole model.
    """

    def __init__(
        self,
        cfg: BackboneConfig,
        num_labels: int,
        head_mode: HeadMode,
        insertion: InsertionMode | None = None,
        bottleneck: int | None = None,
        source: ParameterStore | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        if head_mode is HeadMode.CAUSAL_START_TCL:
            raise ConfigError(
                "head mode causal_start_tcl is rejected: a leading marker under causal "
                "convolution sees nothing but itself; put the marker at the end"
            )
        if head_mode is HeadMode.CAUSAL_END_TCL and not cfg.causal:
            raise ConfigError("head mode causal_end_tcl needs a causal backbone")
        if head_mode is HeadMode.NONCAUSAL_BOTH_TCL and cfg.causal:
            raise ConfigError("head mode noncausal_both_tcl needs a non-causal backbone")
        if num_labels < 2:
            raise ConfigError(f"need at least 2 labels, got {num_labels}")
        k = cfg.embed_dim
        if insertion is not None:
            if bottleneck is None:
                bottleneck = max(1, k // 8)
            if not 1 <= bottleneck <= k:
                raise ConfigError(f"bottleneck width must be in [1, {k}], got {bottleneck}")

        self.cfg = cfg
        self.num_labels = num_labels
        self.head_mode = head_mode
        self.insertion = insertion
        self.bottleneck = bottleneck if insertion is not None else None

        if source is None:
            source = SequenceModel(cfg, seed=seed, dtype=dtype).params
        params = ParameterStore()
        for name, t in source.items():
            if name == "pretrain_head.weight":
                continue
            params.add(name, Tensor(t.data.copy()))
        self.params = params
        self.backbone = SequenceModel(cfg, params=params)

        if head_mode.uses_tcl:
            params.add("tcl.embedding", rng_mod.truncated_normal(rng_mod.split(seed, "tcl"), (k,), dtype=dtype))
        if insertion is not None:
            d = bottleneck
            slots = ("mp",) if insertion.patches_per_block == 1 else ("mp1", "mp2")
            for b in range(cfg.num_blocks):
                for slot in slots:
                    gen = rng_mod.split(seed, "patch", b, slot)
                    params.add(f"patch.block{b}.{slot}.down.weight", rng_mod.truncated_normal(gen, (k, d), dtype=dtype))
                    params.add(f"patch.block{b}.{slot}.down.bias", np.zeros(d, dtype=dtype))
                    # zero so the patched model starts as the exact pre-trained function
                    params.add(f"patch.block{b}.{slot}.up.weight", np.zeros((d, k), dtype=dtype))
                    params.add(f"patch.block{b}.{slot}.up.bias", np.zeros(k, dtype=dtype))
        params.add(
            "task_head.weight",
            rng_mod.truncated_normal(rng_mod.split(seed, "task_head"), (k, num_labels), dtype=dtype),
        )
        params.add("task_head.bias", np.zeros(num_labels, dtype=dtype))

    # -- forward --

    def _embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if "tcl.embedding" not in self.params or not (ids == ReservedIds.TCL).any():
            return self.backbone.embed(ids)
        is_tcl = ids == ReservedIds.TCL
        base = embedding_lookup(self.params["embed.items"], np.where(is_tcl, ReservedIds.PAD, ids))
        m = Tensor(is_tcl[..., None].astype(base.dtype))
        return base * (1.0 - m) + self.params["tcl.embedding"] * m

    def _half(self, block: int, half: int, x: Tensor) -> Tensor:
        bb = self.backbone
        prefix = f"patch.block{block}.mp{half}"
        for stage in self.cfg.layer_order.split("_"):
            if stage == "conv":
                y = bb.conv(block, half, x)
                if self.insertion is InsertionMode.SERIAL_TWO_PER_BLOCK:
                    y = patch_forward(self.params, prefix, y)
                elif self.insertion is InsertionMode.PARALLEL_BEFORE_LN:
                    y = y + patch_core(self.params, prefix, x)
                x = y
            elif stage == "ln":
                x = bb.ln(block, half, x)
            else:
                x = relu(x)
        return x

    def _block(self, block: int, x: Tensor) -> Tensor:
        if self.insertion is InsertionMode.PARALLEL_AFTER_ACTIVATION:
            h1 = self.backbone.half_forward(block, 1, x) + patch_core(self.params, f"patch.block{block}.mp1", x)
            f = self.backbone.half_forward(block, 2, h1) + patch_core(self.params, f"patch.block{block}.mp2", h1)
        else:
            f = self._half(block, 2, self._half(block, 1, x))
            if self.insertion is InsertionMode.SERIAL_ONE_PER_BLOCK:
                f = patch_forward(self.params, f"patch.block{block}.mp", f)
        return x + f

    def hidden(self, ids: np.ndarray) -> Tensor:
        x = self._embed(ids)
        for b in range(self.cfg.num_blocks):
            x = self._block(b, x)
        return x

    def scores(self, ids: np.ndarray) -> Tensor:
        """ids: int[batch, n] -> label scores [batch, num_labels]."""
        ids = np.asarray(ids)
        h = self.hidden(ids)
        if self.head_mode is HeadMode.CAUSAL_END_TCL:
            v = h[:, -1, :]
        elif self.head_mode is HeadMode.NONCAUSAL_BOTH_TCL:
            first = (ids != ReservedIds.PAD).argmax(axis=1)
            v = select_positions(h, first) + h[:, -1, :]
        else:
            keep = Tensor((ids != ReservedIds.PAD)[..., None].astype(h.dtype))
            v = reduce_sum(h * keep, axis=1)
        return matmul(v, self.params["task_head.weight"]) + self.params["task_head.bias"]

    # -- partitions --

    def peterrec_partition(self, tune_layernorm: bool = False) -> ParameterPartition:
        """Freeze everything pre-trained; tune patches, head, marker token."""
        tunable = [n for n in self.params.names() if n.startswith(NEW_PARAM_PREFIXES)]
        if tune_layernorm:
            tunable += [n for n in self.params.names() if ".ln" in n]
        return ParameterPartition.from_tunable(self.params, tunable)

    def head_only_partition(self) -> ParameterPartition:
        """Tune only the task head and marker token (no patches expected)."""
        tunable = [n for n in self.params.names() if n.startswith(("task_head.", "tcl."))]
        return ParameterPartition.from_tunable(self.params, tunable)

    def all_tunable_partition(self) -> ParameterPartition:
        return ParameterPartition.from_tunable(self.params, self.params.names())

    def last_layers_partition(self, trailing: int) -> ParameterPartition:
        """Tune the trailing N conv layers with their layer norms, plus head."""
        layers = [(b, h) for b in range(self.cfg.num_blocks) for h in (1, 2)]
        if not 1 <= trailing <= len(layers):
            raise ConfigError(f"trailing layer count must be in [1, {len(layers)}], got {trailing}")
        picked = layers[-trailing:]
        tunable = [n for n in self.params.names() if n.startswith(("task_head.", "tcl."))]
        for b, h in picked:
            tunable += [
                f"block{b}.conv{h}.weight",
                f"block{b}.conv{h}.bias",
                f"block{b}.ln{h}.gain",
                f"block{b}.ln{h}.bias",
            ]
        return ParameterPartition.from_tunable(self.params, tunable)


# -- accounting --


@dataclass(frozen=True)
class ParamRow:
    name: str
    shape: tuple
    size: int
    tag: str  # "frozen" | "tunable"


@dataclass(frozen=True)
class ParameterReport:
    total: int
    frozen: int
    tunable: int
    tunable_fraction: float
    rows: tuple

    def group(self, prefix: str, min_ndim: int = 0) -> int:
        """Parameter count under a name prefix; min_ndim=2 skips biases/gains."""
        return sum(r.size for r in self.rows if r.name.startswith(prefix) and len(r.shape) >= min_ndim)


def count_parameters(store: ParameterStore, partition: ParameterPartition) -> ParameterReport:
    tunable_set = set(partition.tunable)
    if tunable_set | set(partition.frozen) != set(store.names()):
        raise ConfigError("partition does not cover the model's parameters exactly")
    rows = tuple(
        ParamRow(name=n, shape=tuple(t.shape), size=int(t.size), tag="tunable" if n in tunable_set else "frozen")
        for n, t in store.items()
    )
    total = sum(r.size for r in rows)
    tunable = sum(r.size for r in rows if r.tag == "tunable")
    frozen = total - tunable
    fraction = float(np.float64(tunable) / np.float64(total)) if total else 0.0
    return ParameterReport(total=total, frozen=frozen, tunable=tunable, tunable_fraction=fraction, rows=rows)
