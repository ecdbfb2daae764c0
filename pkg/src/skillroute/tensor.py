"""Dense float64 tensors with reverse-mode differentiation.

Define-by-run tape: every op records its parents and a backward closure on
the result node; ``Tensor.backward()`` walks the graph in reverse topological
order and frees it afterwards. All values are float64 and checked finite
after each forward op. Ops support numpy-style broadcasting; matmul follows
numpy batched-matmul semantics so (B, n, d) @ (d, d) works directly.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import DataError, DimensionError, NumericError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for decoding/eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free the tape; parameter grads stay in .grad for the optimizer
        for node in topo:
            node._backward = None
            node._parents = ()
            if not node.requires_grad:
                node.grad = None

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite value in forward pass")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise --------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), backward)


# linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires >=2-D tensors")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise DimensionError("transpose requires >=2-D tensor")
    data = a.data.swapaxes(-1, -2)

    def backward(g):
        _accum(a, g.swapaxes(-1, -2))

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {orig} -> {shape}") from exc

    def backward(g):
        _accum(a, g.reshape(orig))

    return _make(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def slice_rows(a: Tensor, k: int, h: int) -> Tensor:
    """Rows [k*d/h, (k+1)*d/h) of a 2-D tensor whose row count d is divisible by h."""
    from .errors import ConfigurationError

    if a.data.ndim != 2:
        raise DimensionError("slice_rows requires a 2-D tensor")
    d = a.shape[0]
    if h <= 0 or d % h != 0:
        raise ConfigurationError(f"head count {h} does not divide {d} rows")
    if not 0 <= k < h:
        raise ConfigurationError(f"head index {k} out of range for {h} heads")
    blk = d // h
    data = a.data[k * blk:(k + 1) * blk].copy()

    def backward(g):
        full = np.zeros(a.shape)
        full[k * blk:(k + 1) * blk] = g
        _accum(a, full)

    return _make(data, (a,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows of empty list")
    trailing = {p.shape[1:] for p in parts}
    if len(trailing) != 1:
        raise DimensionError(f"concat_rows: mismatched trailing dims {trailing}")
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[off:off + n].copy())
            off += n

    return _make(data, tuple(parts), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis (used for attention weights)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), backward)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (d,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError("token id out of vocabulary range")
    data = table.data[ids]

    def backward(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _make(data, (table,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood over (optionally masked) target tokens.

    logits: (..., V); targets: integer array of shape logits.shape[:-1].
    Gradient is (softmax - one_hot) / n_active, zero at ignored positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise DataError("target id out of range")
    flat = logits.data.reshape(-1, V)
    tflat = targets.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(tflat.size), tflat]
    if ignore_id is not None:
        mask = (tflat != ignore_id).astype(np.float64)
    else:
        mask = np.ones_like(nll)
    n_active = mask.sum()
    if n_active == 0:
        raise DataError("no unmasked target tokens")
    data = np.array((nll * mask).sum() / n_active)

    def backward(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(tflat.size), tflat] -= 1.0
        probs *= (mask / n_active)[:, None]
        _accum(logits, float(g) * probs.reshape(logits.shape))

    return _make(data, (logits,), backward)


def mix_heads(alpha: Tensor, stack: Tensor, num_heads: int) -> Tensor:
    """Head-wise convex mixing of stacked flat parameters.

    alpha: (S, h) nonnegative weights, one column per head.
    stack: (S, P) with P divisible by h; row i is skill i's parameter block,
    flattened row-major so head k occupies the contiguous slice
    [k*P/h, (k+1)*P/h).
    Returns (P,): per head k, sum_i alpha[i, k] * stack[i, k-th block].
    """
    if alpha.data.ndim != 2 or stack.data.ndim != 2:
        raise DimensionError("mix_heads requires 2-D alpha and stack")
    S, h = alpha.shape
    if stack.shape[0] != S:
        raise DimensionError(f"alpha rows {S} vs stack rows {stack.shape[0]}")
    P = stack.shape[1]
    if h != num_heads or P % h != 0:
        raise DimensionError(f"{h} heads incompatible with flat size {P}")
    blk = P // h
    s3 = stack.data.reshape(S, h, blk)
    data = np.einsum("sk,skp->kp", alpha.data, s3).reshape(P)

    def backward(g):
        g3 = g.reshape(h, blk)
        _accum(alpha, np.einsum("skp,kp->sk", s3, g3))
        _accum(stack, np.einsum("sk,kp->skp", alpha.data, g3).reshape(S, P))

    return _make(data, (alpha, stack), backward)
