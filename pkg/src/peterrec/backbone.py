"""Dilated-convolution sequence backbone for interaction sequences.

The network is an item-embedding table, a stack of residual blocks
(two dilated conv layers each, causal or non-causal), and a linear
head scoring every item for the self-supervised objectives. Hidden
width is constant throughout so every block output can be added to
its input elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError
from .optim import ParameterStore
from .tensor import Tensor, conv1d_dilated, dropout, embedding_lookup, layer_norm, matmul, relu


class ReservedIds:
    """Vocabulary slots with fixed meaning; real items start after them."""

    PAD = 0
    MASK = 1
    TCL = 2
    FIRST_ITEM = 3


# Stage orders a residual half-block may apply. The first entry is the
# published form; the others exist because the literature has no fixed
# convention and the choice is worth ablating.
LAYER_ORDERS = ("conv_ln_relu", "ln_conv_relu", "conv_relu_ln")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    embed_dim: int = 256
    kernel_size: int = 3
    dilations: tuple = (1, 2, 4, 8) * 4
    causal: bool = True
    max_len: int = 100
    layer_order: str = "conv_ln_relu"
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.vocab_size <= ReservedIds.FIRST_ITEM:
            raise ConfigError(f"vocab_size must exceed the {ReservedIds.FIRST_ITEM} reserved ids, got {self.vocab_size}")
        if self.embed_dim <= 0:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.kernel_size < 2:
            raise ConfigError(f"kernel_size must be at least 2, got {self.kernel_size}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must all be >= 1, got {self.dilations}")
        if len(self.dilations) % 2 != 0:
            raise ConfigError("dilations length must be even: two conv layers per residual block")
        if not self.causal and self.kernel_size % 2 == 0:
            raise ConfigError("non-causal mode needs an odd kernel for symmetric padding")
        if self.layer_order not in LAYER_ORDERS:
            raise ConfigError(f"unknown layer_order {self.layer_order!r}; pick one of {LAYER_ORDERS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be positive, got {self.max_len}")

    @property
    def num_blocks(self) -> int:
        return len(self.dilations) // 2


def receptive_field(cfg: BackboneConfig) -> int:
    """Positions the final output can see: 1 + (kernel-1) * sum(dilations)."""
    return 1 + (cfg.kernel_size - 1) * sum(cfg.dilations)


def pretrain_logits(hidden: Tensor, head: Tensor) -> Tensor:
    """Per-position item scores: [.., n, k] x [k, vocab] -> [.., n, vocab]."""
    return matmul(hidden, head)


class SequenceModel:
    """The pre-trainable backbone plus its full-vocabulary scoring head.

    Parameters live in an insertion-ordered store under stable dotted
    names (embed.items, block{i}.conv{1,2}.*, block{i}.ln{1,2}.*,
    pretrain_head.weight); checkpoints and freeze digests key off them.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=np.float32, params: ParameterStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else ParameterStore()
        if params is None:
            self._init_params(seed, dtype)

    def _init_params(self, seed: int, dtype) -> None:
        cfg = self.cfg
        k = cfg.embed_dim
        p = self.params
        p.add("embed.items", rng_mod.truncated_normal(rng_mod.split(seed, "embed"), (cfg.vocab_size, k), dtype=dtype))
        for b in range(cfg.num_blocks):
            for h in (1, 2):
                w = rng_mod.truncated_normal(
                    rng_mod.split(seed, "conv", b, h), (cfg.kernel_size, k, k), dtype=dtype
                )
                p.add(f"block{b}.conv{h}.weight", w)
                p.add(f"block{b}.conv{h}.bias", np.zeros(k, dtype=dtype))
                p.add(f"block{b}.ln{h}.gain", np.ones(k, dtype=dtype))
                p.add(f"block{b}.ln{h}.bias", np.zeros(k, dtype=dtype))
        p.add(
            "pretrain_head.weight",
            rng_mod.truncated_normal(rng_mod.split(seed, "pretrain_head"), (k, cfg.vocab_size), dtype=dtype),
        )

    # -- forward pieces, reused by the patched fine-tune model --

    def dilation_of(self, block: int, half: int) -> int:
        return self.cfg.dilations[2 * block + half - 1]

    def conv(self, block: int, half: int, x: Tensor) -> Tensor:
        p = self.params
        return conv1d_dilated(
            x,
            p[f"block{block}.conv{half}.weight"],
            p[f"block{block}.conv{half}.bias"],
            dilation=self.dilation_of(block, half),
            causal=self.cfg.causal,
        )

    def ln(self, block: int, half: int, x: Tensor) -> Tensor:
        p = self.params
        return layer_norm(x, p[f"block{block}.ln{half}.gain"], p[f"block{block}.ln{half}.bias"])

    def half_forward(self, block: int, half: int, x: Tensor) -> Tensor:
        for stage in self.cfg.layer_order.split("_"):
            if stage == "conv":
                x = self.conv(block, half, x)
            elif stage == "ln":
                x = self.ln(block, half, x)
            else:
                x = relu(x)
        return x

    def block_forward(self, block: int, x: Tensor) -> Tensor:
        return x + self.half_forward(block, 2, self.half_forward(block, 1, x))

    def embed(self, ids: np.ndarray) -> Tensor:
        return embedding_lookup(self.params["embed.items"], ids)

    def hidden(self, ids: np.ndarray, train_rng: np.random.Generator | None = None) -> Tensor:
        """ids: int[batch, n] -> hidden states [batch, n, k]."""
        x = self.embed(ids)
        if train_rng is not None and self.cfg.dropout > 0:
            x = dropout(x, self.cfg.dropout, train_rng)
        for b in range(self.cfg.num_blocks):
            x = self.block_forward(b, x)
        return x

    def logits(self, hidden: Tensor) -> Tensor:
        return pretrain_logits(hidden, self.params["pretrain_head.weight"])
