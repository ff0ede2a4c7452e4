"""Checkpoint persistence: a text header plus raw little-endian float32 data.

The header carries the model's architecture, a step counter, optional
RNG state, and one line per tensor (name, dtype, shape, partition tag,
content digest). Digests are verified on every load, which is what lets
fine-tuning prove the frozen partition never moved: the bytes of a
frozen tensor must hash to exactly what the pre-train checkpoint
recorded. Headers are canonical JSON, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .adapters import FinetuneModel, HeadMode, InsertionMode, ParameterPartition
from .backbone import BackboneConfig, SequenceModel
from .errors import DataError
from .optim import ParameterStore

MAGIC = b"peterrec-checkpoint 1\n"


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model before loading its tensors."""

    backbone: BackboneConfig
    kind: str = "backbone"  # "backbone" | "finetune"
    num_labels: int | None = None
    head_mode: str | None = None
    insertion: str | None = None
    bottleneck: int | None = None

    @staticmethod
    def for_model(model) -> "ModelConfig":
        if isinstance(model, SequenceModel):
            return ModelConfig(backbone=model.cfg)
        if isinstance(model, FinetuneModel):
            return ModelConfig(
                backbone=model.cfg,
                kind="finetune",
                num_labels=model.num_labels,
                head_mode=model.head_mode.value,
                insertion=model.insertion.value if model.insertion else None,
                bottleneck=model.bottleneck,
            )
        raise DataError(f"cannot describe a {type(model).__name__}")

    def to_json(self) -> str:
        payload = {
            "kind": self.kind,
            "num_labels": self.num_labels,
            "head_mode": self.head_mode,
            "insertion": self.insertion,
            "bottleneck": self.bottleneck,
            "backbone": {
                "vocab_size": self.backbone.vocab_size,
                "embed_dim": self.backbone.embed_dim,
                "kernel_size": self.backbone.kernel_size,
                "dilations": list(self.backbone.dilations),
                "causal": self.backbone.causal,
                "max_len": self.backbone.max_len,
                "layer_order": self.backbone.layer_order,
                "dropout": self.backbone.dropout,
            },
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        payload = json.loads(text)
        bb = payload["backbone"]
        return ModelConfig(
            backbone=BackboneConfig(
                vocab_size=bb["vocab_size"],
                embed_dim=bb["embed_dim"],
                kernel_size=bb["kernel_size"],
                dilations=tuple(bb["dilations"]),
                causal=bb["causal"],
                max_len=bb["max_len"],
                layer_order=bb["layer_order"],
                dropout=bb["dropout"],
            ),
            kind=payload["kind"],
            num_labels=payload["num_labels"],
            head_mode=payload["head_mode"],
            insertion=payload["insertion"],
            bottleneck=payload["bottleneck"],
        )


def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def partition_digest(store: ParameterStore, names) -> str:
    """One digest over a set of tensors, in the given order."""
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode("utf-8"))
        h.update(b"\0")
        h.update(np.ascontiguousarray(store[name].data, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class LoadedCheckpoint:
    config: ModelConfig
    params: ParameterStore
    tags: dict  # name -> "frozen" | "tunable"
    digests: dict  # name -> sha256 hex
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    def build(self):
        """Reconstruct the saved model around the loaded tensors."""
        cfg = self.config
        if cfg.kind == "backbone":
            return SequenceModel(cfg.backbone, params=self.params)
        model = FinetuneModel(
            cfg.backbone,
            cfg.num_labels,
            HeadMode(cfg.head_mode),
            insertion=InsertionMode(cfg.insertion) if cfg.insertion else None,
            bottleneck=cfg.bottleneck,
        )
        if set(model.params.names()) != set(self.params.names()):
            raise DataError("checkpoint tensor names do not match the described model")
        for name, t in model.params.items():
            loaded = self.params[name]
            if loaded.shape != t.shape:
                raise DataError(f"shape mismatch for {name}: {loaded.shape} vs {t.shape}")
            t.data = loaded.data
        return model

    def partition(self) -> ParameterPartition:
        return ParameterPartition(
            frozen=tuple(n for n, tag in self.tags.items() if tag == "frozen"),
            tunable=tuple(n for n, tag in self.tags.items() if tag == "tunable"),
        )


def save_checkpoint(
    path: str,
    model,
    partition: ParameterPartition | None = None,
    step: int = 0,
    rng_state: dict | None = None,
) -> None:
    """Write model + metadata. Without a partition every tensor is tunable."""
    config = ModelConfig.for_model(model)
    frozen = set(partition.frozen) if partition is not None else set()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"config " + config.to_json().encode("utf-8") + b"\n")
        state = json.dumps({"rng": rng_state or {}, "step": step}, sort_keys=True)
        fh.write(b"state " + state.encode("utf-8") + b"\n")
        payloads = []
        for name, t in model.params.items():
            if t.dtype != np.float32:
                raise DataError(f"checkpoint format stores float32 only; {name} is {t.dtype}")
            data = np.ascontiguousarray(t.data, dtype="<f4")
            row = {
                "name": name,
                "dtype": "float32",
                "shape": list(t.shape),
                "partition": "frozen" if name in frozen else "tunable",
                "digest": tensor_digest(t.data),
            }
            fh.write(b"tensor " + json.dumps(row, sort_keys=True).encode("utf-8") + b"\n")
            payloads.append(data.tobytes())
        fh.write(b"end\n")
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path: str) -> LoadedCheckpoint:
    """Read and digest-verify a checkpoint."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        config = None
        step, rng_state = 0, {}
        rows = []
        while True:
            line = fh.readline()
            if not line:
                raise DataError("truncated checkpoint header")
            if line == b"end\n":
                break
            key, _, rest = line.rstrip(b"\n").partition(b" ")
            if key == b"config":
                config = ModelConfig.from_json(rest.decode("utf-8"))
            elif key == b"state":
                state = json.loads(rest.decode("utf-8"))
                step, rng_state = state["step"], state["rng"]
            elif key == b"tensor":
                rows.append(json.loads(rest.decode("utf-8")))
            else:
                raise DataError(f"unknown checkpoint header line: {key.decode()!r}")
        if config is None:
            raise DataError("checkpoint header has no config")
        params = ParameterStore()
        tags, digests = {}, {}
        for row in rows:
            shape = tuple(row["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            blob = fh.read(count * 4)
            if len(blob) != count * 4:
                raise DataError(f"truncated payload for {row['name']}")
            arr = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
            if hashlib.sha256(blob).hexdigest() != row["digest"]:
                raise DataError(f"digest mismatch for {row['name']}; checkpoint is corrupt")
            params.add(row["name"], arr)
            tags[row["name"]] = row["partition"]
            digests[row["name"]] = row["digest"]
        if fh.read(1):
            raise DataError("trailing bytes after declared tensors")
    return LoadedCheckpoint(config=config, params=params, tags=tags, digests=digests, step=step, rng_state=rng_state)
