"""Run configuration: defaults, flat key = value files, CLI overrides.

Precedence is CLI flag > config file > PETERREC_SEED (seed only) >
built-in default. Unknown keys are rejected rather than ignored so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .adapters import HeadMode, InsertionMode
from .backbone import LAYER_ORDERS, BackboneConfig
from .errors import ConfigError, ParseError
from .evalbench import OBJECTIVES, AblationMode, ExperimentPlan, PretrainPlan
from .objectives import LossKind


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model
    k: int = 256
    kernel: int = 3
    dilations: tuple = (1, 2, 4, 8) * 4
    causal: bool = True
    max_len: int = 100
    layer_order: str = "conv_ln_relu"
    dropout: float = 0.0
    # pre-training
    objective: str = "auto"  # next_item | masked; auto follows causality
    pretrain_epochs: int = 5
    pretrain_batch: int = 0  # 0 -> 32 causal, 128 non-causal
    mask_rate: float = 0.30
    valid_fraction: float = 0.10
    lr: float = 0.001
    # fine-tuning
    mode: str = "peterrec"
    insertion: str = "serial2"
    head: str = "auto"  # auto -> end marker (causal) / both markers (non-causal)
    bottleneck: int = 0  # 0 -> k // 8
    loss: str = "auto"  # ce | bpr; auto follows the task kind
    task: str = "classification"
    finetune_epochs: int = 10
    finetune_batch: int = 512
    finetune_lr: float = 0.001
    data_fraction: float = 1.0
    tune_layernorm: bool = False
    # evaluation
    eval_negatives: int = 99
    ranking_k: int = 5

    def __post_init__(self):
        if self.objective not in OBJECTIVES + ("auto",):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.mode not in [m.value for m in AblationMode]:
            raise ConfigError(f"unknown mode {self.mode!r}; pick one of {[m.value for m in AblationMode]}")
        if self.insertion not in [m.value for m in InsertionMode]:
            raise ConfigError(f"unknown insertion {self.insertion!r}")
        if self.head != "auto" and self.head not in [m.value for m in HeadMode]:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.loss not in ("auto", "ce", "bpr"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.task not in ("classification", "item_rec"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.layer_order not in LAYER_ORDERS:
            raise ConfigError(f"unknown layer_order {self.layer_order!r}")

    # -- resolution into module-level objects --

    def backbone_config(self, vocab_size: int) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=vocab_size,
            embed_dim=self.k,
            kernel_size=self.kernel,
            dilations=self.dilations,
            causal=self.causal,
            max_len=self.max_len,
            layer_order=self.layer_order,
            dropout=self.dropout,
        )

    def resolved_objective(self) -> str:
        if self.objective != "auto":
            return self.objective
        return "next_item" if self.causal else "masked"

    def resolved_head(self) -> HeadMode:
        if self.head != "auto":
            return HeadMode(self.head)
        return HeadMode.CAUSAL_END_TCL if self.causal else HeadMode.NONCAUSAL_BOTH_TCL

    def resolved_pretrain_batch(self) -> int:
        if self.pretrain_batch > 0:
            return self.pretrain_batch
        return 32 if self.causal else 128

    def pretrain_plan(self) -> PretrainPlan:
        return PretrainPlan(
            objective=self.resolved_objective(),
            epochs=self.pretrain_epochs,
            batch_size=self.resolved_pretrain_batch(),
            lr=self.lr,
            mask_rate=self.mask_rate,
            valid_fraction=self.valid_fraction,
            seed=self.seed,
            ranking_k=self.ranking_k,
        )

    def experiment_plan(self) -> ExperimentPlan:
        return ExperimentPlan(
            mode=AblationMode(self.mode),
            head_mode=self.resolved_head(),
            insertion=InsertionMode(self.insertion),
            bottleneck=self.bottleneck if self.bottleneck > 0 else None,
            loss=None if self.loss == "auto" else LossKind(self.loss),
            data_fraction=self.data_fraction,
            epochs=self.finetune_epochs,
            batch_size=self.finetune_batch,
            lr=self.finetune_lr,
            tune_layernorm=self.tune_layernorm,
            eval_negatives=self.eval_negatives,
            ranking_k=self.ranking_k,
            seed=self.seed,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    if kind == "tuple":
        try:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
        except ValueError:
            raise ConfigError(f"{key} expects comma-separated integers, got {raw!r}") from None
    return raw


def parse_config_file(path: str) -> dict:
    """Flat UTF-8 ``key = value`` lines; # starts a comment; unknown keys rejected."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError(f"expected key = value, got {text!r}", line_no=line_no)
            key, _, raw = text.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r} at line {line_no}")
            values[key] = _coerce(key, raw)
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values, and overrides into a validated RunConfig."""
    values = {}
    if path is not None:
        values.update(parse_config_file(path))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, val) if isinstance(val, str) else val
    if "seed" not in values and os.environ.get("PETERREC_SEED"):
        try:
            values["seed"] = int(os.environ["PETERREC_SEED"])
        except ValueError:
            raise ConfigError(f"PETERREC_SEED must be an integer, got {os.environ['PETERREC_SEED']!r}") from None
    return RunConfig(**values)
