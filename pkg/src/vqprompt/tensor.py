"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is deliberately small: it supports exactly the operations the
rest of the package needs (dense products, a handful of elementwise and
structural ops, row softmax, layer norm, masked cross-entropy) plus the
two gradient connectors that make discrete prompt selection trainable:

* ``stop_gradient`` -- identity forward, zero backward contribution;
* ``straight_through`` -- forwards its first argument, routes the whole
  incoming gradient unchanged to its second argument.

Tensors are immutable once created except for their ``grad`` buffer.
``backward`` walks the recorded graph in reverse topological order and
visits each node exactly once; a tensor consumed by several operations
receives the sum of their contributions. The traversal order is fixed by
graph construction order, so repeated runs with the same seed are
bit-identical.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional gradient record.

    ``data`` is row-major float64. ``grad`` is lazily allocated during
    ``backward`` and always matches ``data`` in shape. A tensor with
    ``requires_grad=False`` never accumulates gradient and records no
    graph edges.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from a scalar output, accumulating into ``grad``."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            # reversed so parents expand in declaration order (determinism)
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = _accumulate(node.grad, g)
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = flowing.get(id(parent))
                flowing[id(parent)] = pg if prev is None else prev + pg

    # --- operator sugar -------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _accumulate(current: np.ndarray | None, update: np.ndarray) -> np.ndarray:
    if current is None:
        return update
    return current + update


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Build an operation output, recording edges only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Broadcast-add a vector over the last axis of ``x``."""
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise DimensionError(
            f"add_rowvec: vector {v.shape} does not match last axis of {x.shape}"
        )
    width = v.shape[0]

    def backward(g):
        return g, g.reshape(-1, width).sum(axis=0)

    return _node(x.data + v.data, (x, v), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose_last needs ndim >= 2, got {x.shape}")
    return _node(
        np.ascontiguousarray(x.data.swapaxes(-1, -2)),
        (x,),
        lambda g: (g.swapaxes(-1, -2),),
    )


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(data, tuple(parts), backward)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not parts:
        raise DimensionError("stack of zero tensors")
    first = parts[0].shape
    for p in parts:
        if p.shape != first:
            raise DimensionError(f"stack: shapes {first} and {p.shape} differ")
    data = np.stack([p.data for p in parts], axis=0)

    def backward(g):
        return tuple(g[i] for i in range(len(parts)))

    return _node(data, tuple(parts), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _node(np.ascontiguousarray(x.data[index]), (x,), backward)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis``, dropping that axis."""
    data = np.ascontiguousarray(np.take(x.data, index, axis=axis))
    locator = [slice(None)] * x.ndim
    locator[axis] = index
    locator = tuple(locator)

    def backward(g):
        full = np.zeros_like(x.data)
        full[locator] = g
        return (full,)

    return _node(data, (x,), backward)


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Replicate ``x`` along a new leading axis; backward sums it back."""
    data = np.ascontiguousarray(np.broadcast_to(x.data, (batch,) + x.shape))
    return _node(data, (x,), lambda g: (g.sum(axis=0),))


def index_select(x: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds into them.

    Rows picked several times accumulate the sum of their gradients.
    """
    if x.ndim != 2:
        raise DimensionError(f"index_select needs a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"index_select needs 1-D indices, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(
            f"index_select: indices outside 0..{x.shape[0] - 1}"
        )

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def total(x: Tensor) -> Tensor:
    """Sum of all entries (scalar)."""
    return _node(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.full_like(x.data, float(g)),),
    )


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(
        np.asarray(x.data.mean()),
        (x,),
        lambda g: (np.full_like(x.data, float(g) / n),),
    )


def sum_squares(x: Tensor) -> Tensor:
    """Squared L2 norm of all entries (scalar)."""
    flat = x.data.reshape(-1)
    return _node(np.asarray(flat @ flat), (x,), lambda g: (2.0 * float(g) * x.data,))


# ---------------------------------------------------------------------------
# dense products
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product covering the shape patterns the model uses.

    Supported: (K,)@(K,N), (M,K)@(K,), (M,K)@(K,N), (B,M,K)@(K,N) and
    (B,M,K)@(B,K,N). Inner dimensions must agree.
    """
    an, bn = a.ndim, b.ndim
    ashape, bshape = a.shape, b.shape

    def _fail():
        raise DimensionError(f"matmul: incompatible shapes {ashape} and {bshape}")

    if an == 1 and bn == 2:
        if ashape[0] != bshape[0]:
            _fail()
        data = a.data @ b.data

        def backward(g):
            return b.data @ g, np.outer(a.data, g)

    elif an == 2 and bn == 1:
        if ashape[1] != bshape[0]:
            _fail()
        data = a.data @ b.data

        def backward(g):
            return np.outer(g, b.data), a.data.T @ g

    elif an == 2 and bn == 2:
        if ashape[1] != bshape[0]:
            _fail()
        data = a.data @ b.data

        def backward(g):
            return g @ b.data.T, a.data.T @ g

    elif an == 3 and bn == 2:
        if ashape[2] != bshape[0]:
            _fail()
        data = a.data @ b.data

        def backward(g):
            return g @ b.data.T, np.tensordot(a.data, g, axes=((0, 1), (0, 1)))

    elif an == 3 and bn == 3:
        if ashape[0] != bshape[0] or ashape[2] != bshape[1]:
            _fail()
        data = a.data @ b.data

        def backward(g):
            return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    else:
        _fail()

    return _node(data, (a, b), backward)


# ---------------------------------------------------------------------------
# normalizations and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, max-shifted so huge logits cannot overflow."""
    axis = axis % x.ndim if x.ndim else 0
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} in shape {x.shape}")
    last = axis == x.ndim - 1
    moved = x.data if last else np.moveaxis(x.data, axis, -1)
    width = moved.shape[-1]
    rows = np.ascontiguousarray(moved.reshape(-1, width))
    y_rows = kernels.softmax_rows(rows)
    y = y_rows.reshape(moved.shape)
    if not last:
        y = np.ascontiguousarray(np.moveaxis(y, -1, axis))

    def backward(g):
        g_moved = g if last else np.moveaxis(g, axis, -1)
        g_rows = np.ascontiguousarray(g_moved.reshape(-1, width))
        gx = kernels.softmax_rows_grad(y_rows, g_rows).reshape(moved.shape)
        if not last:
            gx = np.moveaxis(gx, -1, axis)
        return (gx,)

    return _node(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then scale+shift."""
    width = x.shape[-1]
    if gain.shape != (width,) or offset.shape != (width,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / offset {offset.shape} "
            f"do not match last axis of {x.shape}"
        )
    rows = np.ascontiguousarray(x.data.reshape(-1, width))
    out_rows, normalized, inv_std = kernels.layernorm_rows(
        rows, gain.data, offset.data, eps
    )

    def backward(g):
        g_rows = np.ascontiguousarray(g.reshape(-1, width))
        gx, g_gain, g_offset = kernels.layernorm_rows_grad(
            normalized, inv_std, gain.data, g_rows
        )
        return gx.reshape(x.shape), g_gain, g_offset

    return _node(out_rows.reshape(x.shape), (x, gain, offset), backward)


def cross_entropy_masked(logits: Tensor, labels, active_classes: Iterable[int]) -> Tensor:
    """Mean softmax cross-entropy restricted to ``active_classes``.

    ``logits`` is (classes,) or (batch, classes); ``labels`` holds global
    class indices that must all lie in the active set. Logits of inactive
    classes receive exactly zero gradient.
    """
    active = np.asarray(sorted(set(int(c) for c in active_classes)), dtype=np.int64)
    if active.size == 0:
        raise ContractError("cross_entropy_masked: empty active class set")
    flat = logits.data.reshape(-1, logits.shape[-1])
    n_classes = flat.shape[1]
    if active[0] < 0 or active[-1] >= n_classes:
        raise ContractError(
            f"cross_entropy_masked: active classes {active.tolist()} "
            f"outside logit range 0..{n_classes - 1}"
        )
    label_arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if label_arr.shape[0] != flat.shape[0]:
        raise DimensionError(
            f"cross_entropy_masked: {label_arr.shape[0]} labels for "
            f"{flat.shape[0]} logit rows"
        )
    positions = np.searchsorted(active, label_arr)
    bad = (positions >= active.size) | (active[np.minimum(positions, active.size - 1)] != label_arr)
    if bad.any():
        raise ContractError(
            f"cross_entropy_masked: labels {label_arr[bad].tolist()} not in active set"
        )

    batch = flat.shape[0]
    sub = np.ascontiguousarray(flat[:, active])
    shift = sub.max(axis=1, keepdims=True)
    log_z = shift[:, 0] + np.log(np.exp(sub - shift).sum(axis=1))
    losses = log_z - sub[np.arange(batch), positions]
    value = np.asarray(losses.mean())

    def backward(g):
        probs = kernels.softmax_rows(sub)
        probs[np.arange(batch), positions] -= 1.0
        probs *= float(g) / batch
        full = np.zeros_like(flat)
        full[:, active] = probs
        return (full.reshape(logits.shape),)

    return _node(value, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient connectors
# ---------------------------------------------------------------------------

_SG_MODE = None  # None | "record" | "replay"
_SG_TAPE: list[np.ndarray] = []
_SG_CURSOR = 0


class freeze_stop_gradients:
    """Capture stop-gradient outputs once, then replay them as constants.

    Finite-difference validation must differentiate the *modified*
    function in which every stop-gradient operand is held at its original
    value. Entering with ``mode="record"`` snapshots each stop-gradient
    output in call order; ``mode="replay"`` substitutes those snapshots on
    subsequent evaluations.
    """

    def __init__(self, mode: str):
        if mode not in ("record", "replay"):
            raise ContractError(f"freeze_stop_gradients: bad mode {mode!r}")
        self.mode = mode

    def __enter__(self):
        global _SG_MODE, _SG_CURSOR
        self._prev = _SG_MODE
        _SG_MODE = self.mode
        if self.mode == "record":
            _SG_TAPE.clear()
        _SG_CURSOR = 0
        return self

    def __exit__(self, exc_type, exc, tb):
        global _SG_MODE
        _SG_MODE = self._prev
        return False


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes exactly zero gradient to ``x``."""
    global _SG_CURSOR
    data = x.data
    if _SG_MODE == "record":
        _SG_TAPE.append(data.copy())
    elif _SG_MODE == "replay":
        if _SG_CURSOR >= len(_SG_TAPE):
            raise ContractError(
                "stop_gradient replay ran past the recorded tape; the "
                "checked function is not deterministic in its call order"
            )
        data = _SG_TAPE[_SG_CURSOR]
        _SG_CURSOR += 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    return out


def straight_through(forward_value: Tensor, gradient_target: Tensor) -> Tensor:
    """Forward ``forward_value``; route the whole gradient to ``gradient_target``.

    The output shares ``forward_value``'s buffer bit-for-bit. During the
    backward sweep the incoming gradient passes unchanged to
    ``gradient_target`` and none reaches ``forward_value``.
    """
    if forward_value.shape != gradient_target.shape:
        raise DimensionError(
            f"straight_through: shapes {forward_value.shape} and "
            f"{gradient_target.shape} differ"
        )
    return _node(forward_value.data, (gradient_target,), lambda g: (g,))
