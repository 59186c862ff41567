"""Dense 2-D tensors with reverse-mode automatic differentiation.

The operation inventory is exactly what the models in this package need:
dense matmul, pointwise nonlinearities, bias/row scaling, per-edge gather
and pairwise-distance kernels, segment softmax / weighted-sum scatter
kernels, dropout, and a fused softmax cross-entropy. Storage is a numpy
array; every op whose inputs carry gradients records a vector-Jacobian
closure on its output node, and `backward` replays the reachable nodes
in reverse topological order, accumulating additively across fan-out.

Conventions: everything is 2-D. Scalars are (1, 1), per-edge values are
(E, 1), node features (n, d). No op mutates its inputs, and every op
checks its output for NaN/Inf — a non-finite value raises NumericError
at the op that produced it instead of propagating silently.
"""

from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError, NumericError

DTYPES = {"float64": np.float64, "float32": np.float32}

_ids = itertools.count(1)


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # cheap one-pass screen; a non-finite entry always poisons the sum
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by op '{op}'")


def _scatter_sum_rows(vals: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of `vals` into `n` buckets given per-row bucket ids.

    Backed by a sparse one-hot matmul, which is far faster than np.add.at
    for wide value matrices.
    """
    if vals.shape[1] == 1:
        out = np.bincount(idx, weights=vals[:, 0], minlength=n)
        return out.reshape(-1, 1).astype(vals.dtype, copy=False)
    onehot = sp.csr_matrix(
        (np.ones(idx.size, dtype=vals.dtype), (idx, np.arange(idx.size))),
        shape=(n, idx.size),
    )
    return onehot @ vals


class Tensor:
    """A dense 2-D array, optionally participating in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        _ensure_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # operator sugar -----------------------------------------------------
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            other = Tensor(np.array([[other]], dtype=self.dtype))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            other = Tensor(np.array([[other]], dtype=self.dtype))
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __truediv__(self, other) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division only supports python scalars")
        return scale(self, 1.0 / float(other))


def _result(data: np.ndarray, op: str, parents: tuple, vjp) -> Tensor:
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.node_id = next(_ids)
    out.op = op
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


class Tape:
    """Topologically ordered record of the ops reachable from a root.

    `entries` lists every participating node with parents strictly before
    children, so a reverse sweep visits each node exactly once.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        order: list[Tensor] = []
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1), dtype=loss.dtype)}
    for node in reversed(tape.entries):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._parents:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(parent.node_id)
                grads[parent.node_id] = pg if acc is None else acc + pg
        elif node.requires_grad:
            _ensure_finite(g, "backward")
            node.grad = g if node.grad is None else node.grad + g


def clear_grads(params) -> None:
    for p in params:
        p.grad = None


# dense algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")

    def vjp(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _result(a.data @ b.data, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(g):
            return (g, g)
    elif b.shape == (1, 1):
        def vjp(g):
            return (g, g.sum().reshape(1, 1))
    elif a.shape == (1, 1):
        def vjp(g):
            return (g.sum().reshape(1, 1), g)
    else:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} (only scalar broadcast)")
    return _result(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(g):
            return (g, -g)
    elif b.shape == (1, 1):
        def vjp(g):
            return (g, -g.sum().reshape(1, 1))
    elif a.shape == (1, 1):
        def vjp(g):
            return (g.sum().reshape(1, 1), -g)
    else:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} (only scalar broadcast)")
    return _result(a.data - b.data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(g):
            return (
                g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None,
            )
    elif b.shape == (1, 1):
        def vjp(g):
            return (
                g * b.data if a.requires_grad else None,
                (g * a.data).sum().reshape(1, 1) if b.requires_grad else None,
            )
    elif a.shape == (1, 1):
        def vjp(g):
            return (
                (g * b.data).sum().reshape(1, 1) if a.requires_grad else None,
                g * a.data if b.requires_grad else None,
            )
    else:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} (only scalar broadcast)")
    return _result(a.data * b.data, "mul", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result(a.data * c, "scale", (a,), vjp)


def add_bias(m: Tensor, bias: Tensor) -> Tensor:
    """Add a (1, d) bias row to every row of an (n, d) matrix."""
    if bias.rows != 1 or bias.cols != m.cols:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match {m.shape}")

    def vjp(g):
        return (g, g.sum(axis=0, keepdims=True))

    return _result(m.data + bias.data, "add_bias", (m, bias), vjp)


def scale_rows(m: Tensor, col: Tensor) -> Tensor:
    """Multiply row i of an (n, d) matrix by col[i] of an (n, 1) column."""
    if col.cols != 1 or col.rows != m.rows:
        raise DimensionError(f"scale_rows: column {col.shape} does not match {m.shape}")

    def vjp(g):
        return (
            g * col.data if m.requires_grad else None,
            (g * m.data).sum(axis=1, keepdims=True) if col.requires_grad else None,
        )

    return _result(m.data * col.data, "scale_rows", (m, col), vjp)


def transpose(a: Tensor) -> Tensor:
    def vjp(g):
        return (g.T,)

    return _result(a.data.T.copy(), "transpose", (a,), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise DimensionError("concat_cols: row counts disagree")
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def vjp(g):
        return tuple(
            g[:, offsets[i] : offsets[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _result(np.concatenate([p.data for p in parts], axis=1), "concat_cols", tuple(parts), vjp)


def slice_cols(m: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= m.cols):
        raise IndexError(f"slice_cols: [{start}:{stop}] out of range for {m.shape}")

    def vjp(g):
        out = np.zeros_like(m.data)
        out[:, start:stop] = g
        return (out,)

    return _result(m.data[:, start:stop].copy(), "slice_cols", (m,), vjp)


# pointwise nonlinearities -------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), "relu", (a,), vjp)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_stable(a.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _result(s, "sigmoid", (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def vjp(g):
        return (g * _sigmoid_stable(a.data),)

    return _result(data, "softplus", (a,), vjp)


# gather / per-edge kernels ------------------------------------------------


def _check_index(idx: np.ndarray, n: int, what: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{what} out of range [0, {n})")
    return idx.astype(np.int64, copy=False)


def gather_rows(m: Tensor, idx) -> Tensor:
    idx = _check_index(idx, m.rows, "row index")

    def vjp(g):
        return (_scatter_sum_rows(g, idx, m.rows).astype(m.dtype, copy=False),)

    return _result(m.data[idx], "gather_rows", (m,), vjp)


def row_pair_distance(p: Tensor, src, dst) -> Tensor:
    """Euclidean distance between row pairs: out[e] = ||p[src[e]] - p[dst[e]]||_2.

    The gradient at an exactly-zero distance is defined as 0 (subgradient
    choice), which makes self-pairs (i, i) contribute nothing.
    """
    src = _check_index(src, p.rows, "edge endpoint")
    dst = _check_index(dst, p.rows, "edge endpoint")
    if src.shape != dst.shape:
        raise DimensionError("row_pair_distance: endpoint lists differ in length")
    diff = p.data[src]
    diff -= p.data[dst]  # diff is a fresh array; safe to subtract in place
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff)).reshape(-1, 1)

    def vjp(g):
        pos = dist > 0
        coef = np.where(pos, g / np.where(pos, dist, 1.0), 0.0)
        dd = coef * diff
        out = _scatter_sum_rows(dd, src, p.rows) - _scatter_sum_rows(dd, dst, p.rows)
        return (out.astype(p.dtype, copy=False),)

    return _result(dist, "row_pair_distance", (p,), vjp)


# segment kernels ----------------------------------------------------------


def segment_softmax(values: Tensor, segments, n_segments: int) -> Tensor:
    """Exp-normalize an (E, 1) column within each segment.

    Uses per-segment max subtraction for stability. Outputs of every
    non-empty segment sum to 1; empty segments simply contribute nothing.
    """
    segments = _check_index(segments, n_segments, "segment id")
    if values.cols != 1 or values.rows != segments.size:
        raise DimensionError(f"segment_softmax: values {values.shape} vs {segments.size} segments")
    v = values.data[:, 0]
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, segments, v)
    e = np.exp(v - mx[segments])
    denom = np.bincount(segments, weights=e, minlength=n_segments)
    y = e / denom[segments]

    def vjp(g):
        gcol = g[:, 0]
        dot = np.bincount(segments, weights=gcol * y, minlength=n_segments)[segments]
        return ((y * (gcol - dot)).reshape(-1, 1),)

    return _result(y.reshape(-1, 1).astype(values.dtype, copy=False), "segment_softmax", (values,), vjp)


def segment_weighted_sum(weights: Tensor, messages: Tensor, segments, n_segments: int) -> Tensor:
    """out[i] = sum over edges e with segments[e] == i of weights[e] * messages[e]."""
    segments = _check_index(segments, n_segments, "segment id")
    if weights.cols != 1 or weights.rows != segments.size:
        raise DimensionError(f"segment_weighted_sum: weights {weights.shape} vs {segments.size} edges")
    if messages.rows != segments.size:
        raise DimensionError(f"segment_weighted_sum: messages {messages.shape} vs {segments.size} edges")
    out = _scatter_sum_rows(weights.data * messages.data, segments, n_segments)

    def vjp(g):
        gseg = g[segments]
        return (
            (gseg * messages.data).sum(axis=1, keepdims=True) if weights.requires_grad else None,
            weights.data * gseg if messages.requires_grad else None,
        )

    return _result(out, "segment_weighted_sum", (weights, messages), vjp)


def row_softmax(m: Tensor) -> Tensor:
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, "row_softmax", (m,), vjp)


# reductions and losses ------------------------------------------------------


def sum_all(m: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(m.data, g[0, 0]),)

    return _result(m.data.sum().reshape(1, 1), "sum_all", (m,), vjp)


def mean_all(m: Tensor) -> Tensor:
    inv = 1.0 / m.data.size

    def vjp(g):
        return (np.full_like(m.data, g[0, 0] * inv),)

    return _result(m.data.mean().reshape(1, 1), "mean_all", (m,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size != logits.rows:
        raise DimensionError(f"cross_entropy: {labels.shape} labels for {logits.rows} rows")
    if labels.size == 0:
        raise ContractError("cross_entropy: empty label set")
    if labels.min() < 0 or labels.max() >= logits.cols:
        raise ContractError("cross_entropy: label outside class range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g[0, 0] / labels.size),)

    return _result(np.array([[loss]], dtype=logits.dtype), "cross_entropy", (logits,), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted-scaling dropout: identity at eval, E[output] == input at train."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def vjp(g):
        return (g * mask,)

    return _result(x.data * mask, "dropout", (x,), vjp)
