"""Finite-difference gradient checking.

Central differences with h = 1e-3 on float64 copies of the inputs. The
checked function must therefore run end-to-end in float64, which every
op supports by preserving input dtype.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d f / d x by central differences, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise relative disagreement between two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(
    f: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-3,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare taped gradients of ``f`` against finite differences.

    ``f`` maps a list of Tensors to a scalar Tensor. Returns the worst
    relative error across all inputs. When ``coords`` is given, only
    that many randomly sampled coordinates per input are differenced
    (full-model checks would otherwise take hours).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = f(params)
    tape.backward(loss)
    worst = 0.0
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

        def loss_at(x: np.ndarray, i=i) -> float:
            probe = [Tensor(a.copy()) for a in arrays]
            probe[i] = Tensor(x.copy())
            return float(f(probe).data)

        if coords is None or analytic.size <= coords:
            numeric = numeric_grad(loss_at, arrays[i], h)
            worst = max(worst, max_rel_error(analytic, numeric))
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            picked = gen.choice(analytic.size, size=coords, replace=False)
            flat = arrays[i].reshape(-1)
            for j in picked:
                keep = flat[j]
                flat[j] = keep + h
                fp = loss_at(arrays[i])
                flat[j] = keep - h
                fm = loss_at(arrays[i])
                flat[j] = keep
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, max_rel_error(analytic.reshape(-1)[j], num))
    return worst
