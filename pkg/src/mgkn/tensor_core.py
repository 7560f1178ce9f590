"""Small reverse-mode differentiation engine over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (see :func:`recording`)
whenever at least one input requires a gradient. :func:`backward` walks the
tape once, newest record first.

Only scalar-vs-tensor broadcasting is supported; every other shape relation is
spelled out by a dedicated op (``linear`` for bias rows, ``take_rows`` for
gathers, ``segment_mean`` for neighbourhood averages).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numba
import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


_tape_ids = itertools.count(1)


class Tape:
    """Ordered record of primitive operations.

    Records are appended as they execute, so every parent precedes its
    children and a reverse scan is a valid reverse topological order.
    """

    def __init__(self) -> None:
        self.id = next(_tape_ids)
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}

    def record(self, node: "Tensor") -> None:
        node.tape_id = self.id
        node._index = len(self.nodes)
        self.nodes.append(node)
        for p in node._parents:
            if p._backward is None and p.requires_grad:
                self.leaves.setdefault(id(p), p)

    def __len__(self) -> int:
        return len(self.nodes)


_active: list[Tape] = []


@contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Activate a tape for the duration of the block."""
    tape = tape or Tape()
    _active.append(tape)
    try:
        yield tape
    finally:
        _active.pop()


def active_tape() -> Tape | None:
    return _active[-1] if _active else None


class Tensor:
    """Dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name",
                 "_parents", "_backward", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


class _Outer:
    """Deferred per-row outer product ``a[e, :, None] * b[e, None, :]``.

    Gradients of a batched matrix used several times are summed as one
    batched matmul instead of materialising each term.
    """

    __slots__ = ("a", "b")

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = a
        self.b = b


class _GradSlot:
    __slots__ = ("dense", "outers", "owned")

    def __init__(self):
        self.dense = None
        self.outers: list[_Outer] = []
        self.owned = False

    def add(self, g) -> None:
        if isinstance(g, _Outer):
            self.outers.append(g)
        elif self.dense is None:
            self.dense = g
        elif self.owned:
            self.dense += g
        else:
            # the first contribution may alias another node's gradient
            self.dense = self.dense + g
            self.owned = True

    def value(self, shape) -> np.ndarray:
        total = self.dense
        if self.outers:
            a = np.stack([o.a for o in self.outers], axis=-1)
            b = np.stack([o.b for o in self.outers], axis=-2)
            prod = np.matmul(a, b)
            total = prod if total is None else total + prod
        return np.broadcast_to(total, shape) if total.shape != shape else total


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every learnable leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = next((t for t in _active if t.id == loss.tape_id), None)
    if tape is None or loss._backward is None:
        raise ContractError("loss is not recorded on an active tape")

    slots: dict[int, _GradSlot] = {}
    seed = _GradSlot()
    seed.add(np.ones_like(loss.data))
    slots[id(loss)] = seed
    for leaf in tape.leaves.values():
        leaf.grad = np.zeros_like(leaf.data)

    for node in reversed(tape.nodes[: loss._index + 1]):
        slot = slots.pop(id(node), None)
        if slot is None:
            continue
        g = slot.value(node.shape)
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                p.grad = p.grad + (pg.a[:, :, None] * pg.b[:, None, :]
                                   if isinstance(pg, _Outer) else pg)
            else:
                slots.setdefault(id(p), _GradSlot()).add(pg)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` where ``b`` is added to every row."""
    if b is None:
        return matmul(x, w)
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shapes {x.shape} and {w.shape} do not align")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
    # bias folded into the product as an extra ones column: one GEMM each way
    X = np.concatenate([x.data, np.ones((x.shape[0], 1))], axis=1)
    Wb = np.concatenate([w.data, b.data[None, :]], axis=0)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gwb = X.T @ g if (w.requires_grad or b.requires_grad) else None
        return gx, (None if gwb is None else gwb[:-1]), (None if gwb is None else gwb[-1])

    return _make(X @ Wb, (x, w, b), bw)


def _scalar(x) -> float | None:
    if isinstance(x, Tensor):
        return None
    arr = np.asarray(x)
    if arr.ndim == 0:
        return float(arr)
    raise DimensionError(f"only scalar broadcasting is supported, got shape {arr.shape}")


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    c = _scalar(b)
    if c is not None:
        return _make(a.data + c, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    c = _scalar(b)
    if c is not None:
        return add(a, -c)
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    c = _scalar(b)
    if c is not None:
        return scale(a, c)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def identity(a: Tensor) -> Tensor:
    return a


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "scale": scale, "sub": sub}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("add", x, y)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def _segment_matrix(index: np.ndarray, n: int, weights: np.ndarray) -> sp.csr_matrix:
    e = index.shape[0]
    return sp.csr_matrix((weights, (index, np.arange(e))), shape=(n, e))


def _check_index(index, n: int, what: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise DimensionError(f"{what} index must be 1-d, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"{what} index out of range [0, {n})")
    return index


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; the gradient scatters back with summation."""
    n = a.shape[0]
    index = _check_index(index, n, "take_rows")

    def bw(g):
        scatter = _segment_matrix(index, n, np.ones(index.shape[0]))
        flat = scatter @ g.reshape(g.shape[0], -1)
        return (np.asarray(flat).reshape((n,) + g.shape[1:]),)

    return _make(a.data[index], (a,), bw)


def segment_mean(values: Tensor, segment_of, num_segments: int) -> Tensor:
    """Row-wise mean of ``values`` grouped by ``segment_of``; empty groups give zeros."""
    if values.data.ndim != 2:
        raise DimensionError(f"segment_mean expects a 2-d array, got {values.shape}")
    seg = _check_index(segment_of, num_segments, "segment")
    if seg.shape[0] != values.shape[0]:
        raise DimensionError(
            f"segment index length {seg.shape[0]} does not match {values.shape[0]} rows")
    counts = np.bincount(seg, minlength=num_segments).astype(DTYPE)
    weights = 1.0 / counts[seg] if seg.size else np.zeros(0)
    S = _segment_matrix(seg, num_segments, weights)
    out = np.asarray(S @ values.data)
    return _make(out, (values,), lambda g: (np.asarray(S.T @ g),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"axes {axes} are not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def row_outer(a: Tensor, b: Tensor) -> Tensor:
    """Flattened per-row outer products: ``out[e, i * q + j] = a[e, i] * b[e, j]``."""
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise DimensionError(f"row_outer shapes {a.shape} and {b.shape} do not align")
    e, p, q = A.shape[0], A.shape[1], B.shape[1]

    def bw(g):
        G = g.reshape(e, p, q)
        ga = np.matmul(G, B[:, :, None])[:, :, 0] if a.requires_grad else None
        gb = np.matmul(A[:, None, :], G)[:, 0, :] if b.requires_grad else None
        return ga, gb

    return _make((A[:, :, None] * B[:, None, :]).reshape(e, p * q), (a, b), bw)


@numba.njit(cache=True, fastmath=False)
def _outer_mean_fwd(h, v, src, dst, w_edge, out):
    p, q = h.shape[1], v.shape[1]
    for e in range(src.shape[0]):
        x, y, c = dst[e], src[e], w_edge[e]
        for a in range(p):
            ca = c * h[e, a]
            for j in range(q):
                out[x, a, j] += ca * v[y, j]


@numba.njit(cache=True, fastmath=False)
def _outer_mean_bwd(h, v, src, dst, w_edge, g, gh, gv):
    p, q = h.shape[1], v.shape[1]
    for e in range(src.shape[0]):
        x, y, c = dst[e], src[e], w_edge[e]
        for a in range(p):
            acc = 0.0
            ca = c * h[e, a]
            for j in range(q):
                acc += g[x, a, j] * v[y, j]
                gv[y, j] += ca * g[x, a, j]
            gh[e, a] = c * acc


def segment_outer_mean(h: Tensor, v: Tensor, src, dst, num_dst: int) -> Tensor:
    """Fused ``segment_mean(row_outer(h, take_rows(v, src)), dst, num_dst)``.

    Returns ``(num_dst, p * q)`` without forming the ``(E, p * q)`` intermediate.
    """
    H, V = h.data, v.data
    src = _check_index(src, V.shape[0], "source")
    dst = _check_index(dst, num_dst, "segment")
    if H.ndim != 2 or V.ndim != 2 or H.shape[0] != src.shape[0] or dst.shape != src.shape:
        raise DimensionError(f"segment_outer_mean shapes {h.shape}, {v.shape}, {src.shape} disagree")
    p, q = H.shape[1], V.shape[1]
    counts = np.bincount(dst, minlength=num_dst).astype(DTYPE)
    w_edge = 1.0 / counts[dst] if dst.size else np.zeros(0)
    out = np.zeros((num_dst, p, q))
    _outer_mean_fwd(H, V, src, dst, w_edge, out)

    def bw(g):
        gh = np.zeros_like(H)
        gv = np.zeros_like(V)
        _outer_mean_bwd(H, V, src, dst, w_edge, np.ascontiguousarray(g).reshape(num_dst, p, q),
                        gh, gv)
        return gh, gv

    return _make(out.reshape(num_dst, p * q), (h, v), bw)


def bmv(mats: Tensor, vecs: Tensor) -> Tensor:
    """Batched matrix-vector product: ``out[e] = mats[e] @ vecs[e]``."""
    M, V = mats.data, vecs.data
    if M.ndim != 3 or V.ndim != 2 or M.shape[0] != V.shape[0] or M.shape[2] != V.shape[1]:
        raise DimensionError(f"bmv shapes {mats.shape} and {vecs.shape} do not align")

    def bw(g):
        gm = _Outer(g, V) if mats.requires_grad else None
        gv = np.matmul(g[:, None, :], M)[:, 0, :] if vecs.requires_grad else None
        return gm, gv

    return _make(np.matmul(M, V[:, :, None])[:, :, 0], (mats, vecs), bw)
