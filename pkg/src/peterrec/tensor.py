"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Storage is 32-bit by default; reductions and normalization statistics
accumulate in 64-bit and cast back. Every op preserves the dtype of its
inputs, so an entire model can be run as a 64-bit shadow simply by
building its parameters in float64 (the gradcheck module relies on this).

Recording is explicit: ops append to the active ``Tape`` (a context
manager) whenever any input requires gradients. With no tape active,
ops run forward-only.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractViolation, ShapeError, VocabularyError

_DEBUG_CHECKS = os.environ.get("PETERREC_DEBUG", "") not in ("", "0")


def debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every op output."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense n-d array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- tape -------------------------------------------------------------

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of forward ops; backward replays it in exact reverse.

    Single-threaded by design: one tape per model per training step.
    """

    def __init__(self):
        self.ops = []  # (inputs, out, backward_fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractViolation("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into .grad of every recorded tensor."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for inputs, out, backward_fn in reversed(self.ops):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g
                else:
                    t.grad = t.grad + g


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.isfinite(out.data).all():
        raise ContractViolation("non-finite values in op output")
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.ops.append((inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def backward(g):
        return (-g,)

    return _record(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def backward(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable in both tails
    d = a.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s.astype(d.dtype))

    def backward(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(a)) without overflow: max(a,0) + log1p(exp(-|a|))."""
    a = as_tensor(a)
    d = a.data
    out = Tensor((np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))).astype(d.dtype))

    def backward(g):
        sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        return (g * sig.astype(d.dtype),)

    return _record(out, (a,), backward)


# --- matmul -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


# --- shape ops --------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward)


def slice_(a, key) -> Tensor:
    """Basic indexing with gradient scatter back into the source shape."""
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return (buf,)

    return _record(out, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = Tensor((np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / count).astype(a.dtype))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype) / count,)

    return _record(out, (a,), backward)


# --- gather / scatter -------------------------------------------------


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` by integer ``ids``; scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(
            f"id out of range: got {int(ids.min())}..{int(ids.max())}, vocabulary size {table.shape[0]}"
        )
    out = Tensor(table.data[ids])

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (buf,)

    return _record(out, (table,), backward)


def select_positions(x, pos) -> Tensor:
    """x: [b, n, k], pos: int[b] -> [b, k] (one position per row)."""
    x = as_tensor(x)
    pos = np.asarray(pos)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, pos])

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (rows, pos), g)
        return (buf,)

    return _record(out, (x,), backward)


def pick(scores, idx) -> Tensor:
    """scores: [b, C], idx: int[b] -> [b] (one score per row)."""
    scores = as_tensor(scores)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= scores.shape[1]):
        raise IndexError(f"pick index out of range for {scores.shape[1]} columns")
    rows = np.arange(scores.shape[0])
    out = Tensor(scores.data[rows, idx])

    def backward(g):
        buf = np.zeros_like(scores.data)
        np.add.at(buf, (rows, idx), g)
        return (buf,)

    return _record(out, (scores,), backward)


# --- normalization ----------------------------------------------------


def layer_norm(x, gain, bias, eps=1e-8) -> Tensor:
    """Per-position normalization over the channel (last) axis.

    Statistics accumulate in float64; output dtype matches the input.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(f"layer_norm: channels {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor((xhat * gain.data + bias.data).astype(x.dtype))

    def backward(g):
        g64 = g.astype(np.float64)
        ghat = g64 * gain.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        gx = (inv * (ghat - m1 - xhat * m2)).astype(x.dtype)
        axes = tuple(range(g.ndim - 1))
        ggain = (g64 * xhat).sum(axis=axes).astype(gain.dtype)
        gbias = g64.sum(axis=axes).astype(bias.dtype)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward)


# --- convolution ------------------------------------------------------


def conv1d_dilated(x, weight, bias, dilation: int, causal: bool) -> Tensor:
    """Dilated 1-d convolution over the position axis.

    x: [..., n, k_in]; weight: [kernel, k_in, k_out]; bias: [k_out] or None.
    Causal mode zero-pads (kernel-1)*dilation on the left only, so output
    position t sees inputs at positions <= t. Non-causal mode pads the
    same total amount split symmetrically (kernel must be odd).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    kernel, k_in, k_out = weight.shape
    if x.shape[-1] != k_in:
        raise ShapeError(f"conv1d_dilated: input channels {x.shape} vs weight {weight.shape}")
    span = (kernel - 1) * dilation
    if causal:
        pad = (span, 0)
    else:
        if kernel % 2 == 0:
            raise ShapeError(f"non-causal convolution needs an odd kernel, got {kernel}")
        pad = (span // 2, span - span // 2)
    n = x.shape[-2]
    lead = x.ndim - 2
    xp = np.pad(x.data, [(0, 0)] * lead + [pad, (0, 0)])
    out_shape = x.shape[:-1] + (k_out,)
    acc = np.zeros(out_shape, dtype=x.dtype)
    segs = []
    for j in range(kernel):
        seg = xp[..., j * dilation : j * dilation + n, :]
        segs.append(seg)
        acc += (seg.reshape(-1, k_in) @ weight.data[j]).reshape(out_shape)
    if bias is not None:
        acc += bias.data
    out = Tensor(acc)

    def backward(g):
        g2 = g.reshape(-1, k_out)
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for j in range(kernel):
            gw[j] = segs[j].reshape(-1, k_in).T @ g2
            gxp[..., j * dilation : j * dilation + n, :] += (g2 @ weight.data[j].T).reshape(x.shape)
        gx = gxp[..., pad[0] : pad[0] + n, :] if span else gxp
        gb = None
        if bias is not None:
            gb = g.reshape(-1, k_out).sum(axis=0, dtype=np.float64).astype(bias.dtype)
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return _record(out, inputs, lambda g: backward(g)[:2])
    return _record(out, inputs, backward)


# --- losses -----------------------------------------------------------


def softmax(logits: np.ndarray, axis=-1) -> np.ndarray:
    """Plain-array stabilized softmax (64-bit internals, input dtype out)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p.astype(np.asarray(logits).dtype)


def softmax_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows.

    logits: [N, C]; targets: int[N]; weights: float[N] summing to 1, or
    None for uniform 1/N. Stabilized by max-subtraction, 64-bit internals.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target class out of range: got {int(targets.min())}..{int(targets.max())}, C={c}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp_t = z[np.arange(n), targets] - lse
    out = Tensor(np.asarray(-(w * logp_t).sum(), dtype=logits.dtype))

    def backward(g):
        p = np.exp(z - lse[:, None])
        gl = p * w[:, None]
        gl[np.arange(n), targets] -= w
        return ((float(g) * gl).astype(logits.dtype),)

    return _record(out, (logits,), backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    out = Tensor(x.data * keep)

    def backward(g):
        return (g * keep,)

    return _record(out, (x,), backward)
