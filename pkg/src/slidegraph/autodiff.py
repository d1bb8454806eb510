"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: dense matmul, (broadcast) addition,
elementwise multiply, scalar scaling, ReLU, row-wise L2 normalization,
mean/sum reductions, stabilized softmax cross-entropy, row gather (whose
adjoint is the scatter-add), column concatenation and reshape. That is
everything the MLP encoder, the graph layers and the tile-bag classifier
need; there are no convolutions.

Usage::

    with Tape() as tape:
        h = relu(add_bias(matmul(x, w), b))
        loss = reduce_mean(softmax_cross_entropy(h, labels))
    grads = tape.backward(loss)      # {parameter Tensor -> gradient Tensor}

Recording only happens while a tape is active and at least one operand lies
on a gradient path, so the same forward code runs "eagerly" (e.g. for the
momentum encoder or at inference) with no bookkeeping. Distinct tapes are
independent; the active-tape stack is thread-local.
"""

from __future__ import annotations

import threading

import numpy as np

from .validation import ContractError, require

_ACTIVE = threading.local()


class Tensor:
    """Dense float64 array, optionally marked trainable via ``requires_grad``."""

    __slots__ = ("data", "requires_grad", "name", "_on_grad_path")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._on_grad_path = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _current_tape():
    stack = getattr(_ACTIVE, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    Ops append in execution order, so the record is already topologically
    sorted; ``backward`` walks it in reverse, which visits every node after
    all of its consumers. ``backward`` clears the record, leaving the tape
    ready for a fresh forward pass.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = []
            _ACTIVE.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def _append(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Reverse-mode gradients of a scalar ``loss`` w.r.t. every
        ``requires_grad`` tensor that participated in a recorded op.

        Parameters the loss does not depend on map to zero gradients;
        parameters that never touched the tape are simply absent.
        """
        require(isinstance(loss, Tensor), "loss must be a Tensor")
        require(loss.data.size == 1, "loss must be a scalar")
        if not any(rec[0] is loss for rec in self._records):
            raise ContractError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self._records):
            for t in inputs:
                if t.requires_grad:
                    leaves.setdefault(id(t), t)
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, dt in zip(inputs, vjp(g)):
                if dt is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = dt if acc is None else acc + dt

        result: dict[Tensor, Tensor] = {}
        for tid, leaf in leaves.items():
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(leaf.data)
            assert g.shape == leaf.data.shape
            result[leaf] = Tensor(g)
        self._records.clear()
        return result

    def reset(self) -> None:
        self._records.clear()


def _emit(out_data, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _current_tape()
    if tape is not None and any(t._on_grad_path for t in inputs):
        out._on_grad_path = True
        tape._append(out, inputs, vjp)
    return out


# --- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product: 2-D @ 2-D or 2-D @ 1-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == 2 and b.data.ndim == 2:
        require(a.data.shape[1] == b.data.shape[0], "matmul inner dimensions differ")

        def vjp(g):
            ga = g @ b.data.T if a._on_grad_path else None
            gb = a.data.T @ g if b._on_grad_path else None
            return ga, gb

    elif a.data.ndim == 2 and b.data.ndim == 1:
        require(a.data.shape[1] == b.data.shape[0], "matmul inner dimensions differ")

        def vjp(g):
            ga = np.outer(g, b.data) if a._on_grad_path else None
            gb = a.data.T @ g if b._on_grad_path else None
            return ga, gb

    else:
        raise ContractError("matmul supports 2-D @ 2-D and 2-D @ 1-D operands")
    return _emit(a.data @ b.data, (a, b), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    require(a.data.shape == b.data.shape, "add requires matching shapes")

    def vjp(g):
        return (g if a._on_grad_path else None, g if b._on_grad_path else None)

    return _emit(a.data + b.data, (a, b), vjp)


def add_bias(x, b) -> Tensor:
    """Broadcast a 1-D bias over the rows of a 2-D tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    require(x.data.ndim == 2 and b.data.ndim == 1, "add_bias expects (2-D, 1-D)")
    require(x.data.shape[1] == b.data.shape[0], "bias length must match columns")

    def vjp(g):
        gx = g if x._on_grad_path else None
        gb = g.sum(axis=0) if b._on_grad_path else None
        return gx, gb

    return _emit(x.data + b.data[None, :], (x, b), vjp)


def multiply(a, b) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    require(a.data.shape == b.data.shape, "multiply requires matching shapes")

    def vjp(g):
        ga = g * b.data if a._on_grad_path else None
        gb = g * a.data if b._on_grad_path else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), vjp)


def scale(x, factor: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    x = _as_tensor(x)
    c = float(factor)

    def vjp(g):
        return (g * c,)

    return _emit(x.data * c, (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _emit(np.where(mask, x.data, 0.0), (x,), vjp)


def normalize_rows(x) -> Tensor:
    """L2-normalize each row of a 2-D tensor; all-zero rows stay zero."""
    x = _as_tensor(x)
    require(x.data.ndim == 2, "normalize_rows expects a 2-D tensor")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    y = x.data / safe

    def vjp(g):
        inner = np.sum(g * y, axis=1, keepdims=True)
        return ((g - inner * y) / safe,)

    return _emit(y, (x,), vjp)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size

        def vjp(g):
            return (np.full_like(x.data, float(g) / n),)

        return _emit(x.data.mean(), (x,), vjp)
    require(0 <= axis < x.data.ndim, "reduction axis out of range")
    n = x.data.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape) / n,)

    return _emit(x.data.mean(axis=axis), (x,), vjp)


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:

        def vjp(g):
            return (np.full_like(x.data, float(g)),)

        return _emit(x.data.sum(), (x,), vjp)
    require(0 <= axis < x.data.ndim, "reduction axis out of range")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _emit(x.data.sum(axis=axis), (x,), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``logits`` may be a single row ``[C]`` with an int label (scalar loss) or
    a batch ``[B, C]`` with ``[B]`` labels (per-row losses). Computed as
    ``logsumexp(logits) - logits[label]`` with max-subtraction, so huge
    logits do not overflow. The adjoint is ``softmax - one_hot``.
    """
    x = _as_tensor(logits)
    single = x.data.ndim == 1
    mat = x.data[None, :] if single else x.data
    require(mat.ndim == 2, "logits must be 1-D or 2-D")
    n_classes = mat.shape[1]
    require(n_classes >= 2, "softmax_cross_entropy needs at least 2 classes")
    idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    require(idx.shape == (mat.shape[0],), "labels must align with logit rows")
    require(bool(np.all((idx >= 0) & (idx < n_classes))), "label out of range")

    shifted = mat - mat.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    sumz = expz.sum(axis=1, keepdims=True)
    softmax = expz / sumz
    losses = np.log(sumz[:, 0]) - shifted[np.arange(mat.shape[0]), idx]
    out_data = losses[0] if single else losses

    def vjp(g):
        grad = softmax.copy()
        grad[np.arange(mat.shape[0]), idx] -= 1.0
        grad *= np.atleast_1d(g)[:, None]
        return (grad[0] if single else grad,)

    return _emit(out_data, (x,), vjp)


def gather_rows(x, indices) -> Tensor:
    """Select rows by an index list; the adjoint scatter-adds back."""
    x = _as_tensor(x)
    require(x.data.ndim == 2, "gather_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.int64)
    require(idx.ndim == 1, "indices must be a 1-D list")
    require(
        bool(np.all((idx >= 0) & (idx < x.data.shape[0]))), "gather index out of range"
    )

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), vjp)


def concat_cols(parts) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    tensors = [_as_tensor(p) for p in parts]
    require(len(tensors) >= 1, "concat_cols needs at least one part")
    rows = tensors[0].data.shape[0]
    for t in tensors:
        require(t.data.ndim == 2 and t.data.shape[0] == rows, "parts must share rows")
    widths = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=1)
        return tuple(
            piece if t._on_grad_path else None for piece, t in zip(pieces, tensors)
        )

    return _emit(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    target = tuple(int(s) for s in shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _emit(x.data.reshape(target), (x,), vjp)
