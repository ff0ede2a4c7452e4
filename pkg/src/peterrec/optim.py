"""Named parameter collections and the Adam update rule."""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


class ParameterStore:
    """Insertion-ordered mapping of dotted names to parameter tensors.

    The order of ``add`` calls is the canonical serialization order, so
    checkpoints and partition digests are stable across runs.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = requires_grad
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_size(self, names: Iterable[str] | None = None) -> int:
        picked = self._params if names is None else {n: self._params[n] for n in names}
        return sum(t.size for t in picked.values())


class Adam:
    """Adam with bias correction over an explicit list of tensors.

    Anything not handed to the constructor is untouched by ``step``,
    which is how frozen parameters stay frozen.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update; requires every managed tensor to carry a grad."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractViolation(f"parameter {i} has no gradient at step {self.t}")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        for p in self.params:
            p.grad = None
