"""Minimal reverse-mode differentiation over dense 2-D float64 matrices.

Every value is a matrix; scalars are ``(1, 1)``.  A :class:`Tape` owns the
leaves created through :meth:`Tape.variable` and records each primitive whose
inputs depend on one of them.  Recording order is a topological order, so
:func:`backward` replays the records in reverse.

Constants (plain arrays, scipy sparse matrices, tensors with
``requires_grad=False``) may be mixed freely with recorded tensors.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import EmptyMask, NotScalar, ShapeError, TapeConsumed


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"shape {self.shape} is not scalar")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("only division by a python scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    def __init__(self):
        self._records = []
        self._leaves = []
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def variable(self, data) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        t._tape = self
        self._leaves.append(t)
        return t

    @property
    def leaves(self):
        return list(self._leaves)


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    if sp.issparse(x):
        return x
    if hasattr(x, "matrix") and sp.issparse(x.matrix):
        return x.matrix
    return Tensor(x).data


def _live(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _emit(value, parents) -> Tensor:
    """Wrap ``value``; record it when any parent is live.

    ``parents`` is a sequence of ``(input, vjp)`` pairs where ``vjp`` maps the
    output cotangent to that input's cotangent.
    """
    live = [(p, f) for p, f in parents if _live(p)]
    out = Tensor(value)
    if not live:
        return out
    tapes = {id(p._tape): p._tape for p, _ in live}
    if len(tapes) != 1:
        raise ShapeError("inputs belong to different tapes")
    tape = next(iter(tapes.values()))
    if tape._consumed:
        raise TapeConsumed("cannot record onto a tape after backward")
    out.requires_grad = True
    out._tape = tape
    tape._records.append((out, live))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{name}: incompatible shapes {a} and {b}")


# --- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    A, B = _data(a), _data(b)
    if sp.issparse(A) or sp.issparse(B):
        return sparse_dense_matmul(a, b)
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: {A.shape} @ {B.shape}")
    return _emit(A @ B, [(a, lambda g: g @ B.T), (b, lambda g: A.T @ g)])


def sparse_dense_matmul(s, b) -> Tensor:
    """``s @ b`` where exactly one side is a constant scipy sparse matrix."""
    S, B = _data(s), _data(b)
    if sp.issparse(S):
        if S.shape[1] != B.shape[0]:
            raise ShapeError(f"sparse_dense_matmul: {S.shape} @ {B.shape}")
        return _emit(np.asarray(S @ B), [(b, lambda g: np.asarray(S.T @ g))])
    if sp.issparse(B):
        if S.shape[1] != B.shape[0]:
            raise ShapeError(f"sparse_dense_matmul: {S.shape} @ {B.shape}")
        return _emit(np.asarray((B.T @ S.T).T), [(s, lambda g: np.asarray((B @ g.T).T))])
    raise ShapeError("sparse_dense_matmul needs one scipy sparse operand")


def sparse_values_matmul(rows, cols, values, shape, b) -> Tensor:
    """``M @ b`` where ``M`` is sparse with fixed support and differentiable ``values``.

    ``values`` has shape ``(nnz, 1)``; entry ``e`` sits at ``(rows[e], cols[e])``.
    """
    V, B = _data(values), _data(b)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if V.shape != (len(rows), 1) or len(cols) != len(rows):
        raise ShapeError("values must be (nnz, 1) matching rows/cols")
    if shape[1] != B.shape[0]:
        raise ShapeError(f"sparse_values_matmul: {shape} @ {B.shape}")
    M = sp.csr_matrix((V[:, 0], (rows, cols)), shape=shape)
    return _emit(
        np.asarray(M @ B),
        [
            (values, lambda g: np.einsum("ek,ek->e", g[rows], B[cols])[:, None]),
            (b, lambda g: np.asarray(M.T @ g)),
        ],
    )


def add(a, b) -> Tensor:
    A, B = _data(a), _data(b)
    _check_broadcast(A.shape, B.shape, "add")
    return _emit(A + B, [(a, lambda g: _unbroadcast(g, A.shape)), (b, lambda g: _unbroadcast(g, B.shape))])


def sub(a, b) -> Tensor:
    A, B = _data(a), _data(b)
    _check_broadcast(A.shape, B.shape, "sub")
    return _emit(A - B, [(a, lambda g: _unbroadcast(g, A.shape)), (b, lambda g: -_unbroadcast(g, B.shape))])


def mul(a, b) -> Tensor:
    """Element-wise product with row/column-vector broadcasting."""
    A, B = _data(a), _data(b)
    _check_broadcast(A.shape, B.shape, "mul")
    return _emit(A * B, [(a, lambda g: _unbroadcast(g * B, A.shape)), (b, lambda g: _unbroadcast(g * A, B.shape))])


def scale(a, alpha: float) -> Tensor:
    A = _data(a)
    return _emit(alpha * A, [(a, lambda g: alpha * g)])


def power(a, p: float) -> Tensor:
    A = _data(a)
    return _emit(A**p, [(a, lambda g: g * p * A ** (p - 1))])


def relu(a) -> Tensor:
    A = _data(a)
    pos = A > 0
    return _emit(np.where(pos, A, 0.0), [(a, lambda g: g * pos)])


def sigmoid(a) -> Tensor:
    A = _data(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * A))
    return _emit(s, [(a, lambda g: g * s * (1.0 - s))])


def _softmax(A):
    z = A - A.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(a) -> Tensor:
    A = _data(a)
    s = _softmax(A)
    return _emit(s, [(a, lambda g: s * (g - (g * s).sum(axis=1, keepdims=True)))])


def _as_index(labels, n, C):
    y = np.asarray(labels)
    if y.ndim == 2:
        if y.shape != (n, C):
            raise ShapeError("one-hot labels must match logits")
        return y.astype(np.float64)
    y = y.astype(np.int64)
    if y.shape != (n,):
        raise ShapeError("labels must have one entry per logit row")
    onehot = np.zeros((n, C))
    onehot[np.arange(n), y] = 1.0
    return onehot


def cross_entropy_mean(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are class ids or one-hot rows."""
    L = _data(logits)
    n, C = L.shape
    if n == 0:
        raise EmptyMask("cross entropy over zero rows")
    Y = _as_index(labels, n, C)
    m = L.max(axis=1, keepdims=True)
    z = L - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = float(((lse - z) * Y).sum() / n)
    p = np.exp(z - lse)
    return _emit(np.array([[value]]), [(logits, lambda g: g[0, 0] * (p * Y.sum(axis=1, keepdims=True) - Y) / n)])


def frobenius_norm(a) -> Tensor:
    A = _data(a)
    nrm = float(np.sqrt((A * A).sum()))
    return _emit(np.array([[nrm]]), [(a, lambda g: g[0, 0] * (A / nrm if nrm > 0 else np.zeros_like(A)))])


def total(a) -> Tensor:
    A = _data(a)
    return _emit(np.array([[A.sum()]]), [(a, lambda g: np.full(A.shape, g[0, 0]))])


def column_cosine_distance_sum(ga, gb) -> Tensor:
    """Sum over columns of ``1 - cos(ga[:, j], gb[:, j])``; zero-norm columns give 0."""
    A, B = _data(ga), _data(gb)
    if A.shape != B.shape:
        raise ShapeError(f"column_cosine_distance_sum: {A.shape} vs {B.shape}")
    na = np.sqrt((A * A).sum(axis=0))
    nb = np.sqrt((B * B).sum(axis=0))
    dot = (A * B).sum(axis=0)
    ok = (na > 0) & (nb > 0)
    safe = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / safe, 1.0)
    value = float((1.0 - cos).sum())

    def vjp_a(g):
        inv_a2 = np.where(ok, 1.0 / np.where(ok, na * na, 1.0), 0.0)
        return -g[0, 0] * np.where(ok, B / safe - A * (cos * inv_a2), 0.0)

    def vjp_b(g):
        inv_b2 = np.where(ok, 1.0 / np.where(ok, nb * nb, 1.0), 0.0)
        return -g[0, 0] * np.where(ok, A / safe - B * (cos * inv_b2), 0.0)

    return _emit(np.array([[value]]), [(ga, vjp_a), (gb, vjp_b)])


def transpose(a) -> Tensor:
    A = _data(a)
    return _emit(A.T.copy(), [(a, lambda g: g.T)])


def reshape(a, shape) -> Tensor:
    A = _data(a)
    out = A.reshape(shape)
    return _emit(out, [(a, lambda g: g.reshape(A.shape))])


def take_rows(a, index) -> Tensor:
    A = _data(a)
    idx = np.asarray(index, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(A)
        np.add.at(out, idx, g)
        return out

    return _emit(A[idx], [(a, vjp)])


def take_cols(a, index) -> Tensor:
    A = _data(a)
    idx = np.asarray(index, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(A)
        np.add.at(out.T, idx, g.T)
        return out

    return _emit(A[:, idx], [(a, vjp)])


def concat_rows(parts) -> Tensor:
    datas = [_data(p) for p in parts]
    widths = {d.shape[1] for d in datas}
    if len(widths) != 1:
        raise ShapeError("concat_rows needs equal column counts")
    bounds = np.cumsum([0] + [d.shape[0] for d in datas])
    parents = [(p, lambda g, lo=lo, hi=hi: g[lo:hi]) for p, lo, hi in zip(parts, bounds[:-1], bounds[1:])]
    return _emit(np.vstack(datas), parents)


def straight_through(a, threshold: float = 0.5) -> Tensor:
    """Forward: ``a > threshold`` as 0/1.  Backward: identity."""
    A = _data(a)
    return _emit((A > threshold).astype(np.float64), [(a, lambda g: g)])


def sym_normalize_dense(a) -> Tensor:
    """``D^-1/2 (A + I) D^-1/2`` for a dense, differentiable ``A`` (degrees included)."""
    A = _data(a)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ShapeError("adjacency must be square")
    m = add(a, np.eye(n))
    deg = matmul(m, np.ones((n, 1)))
    s = power(deg, -0.5)
    return mul(m, matmul(s, transpose(s)))


# --- backward ---------------------------------------------------------------


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` of every leaf on ``loss``'s tape and return those leaves."""
    if not isinstance(loss, Tensor) or loss.shape != (1, 1):
        raise NotScalar(f"loss must be a (1, 1) tensor, got {getattr(loss, 'shape', type(loss))}")
    tape = loss._tape
    if tape is None:
        return []
    if tape._consumed:
        raise TapeConsumed("backward already ran on this tape")
    tape._consumed = True
    grads = {id(loss): np.ones((1, 1))}
    for out, parents in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, vjp in parents:
            gp = vjp(g)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    for leaf in tape._leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
    return tape.leaves


def grad(fn, *arrays):
    """Evaluate ``fn`` on fresh leaves built from ``arrays``; return ``(value, grads)``."""
    tape = Tape()
    leaves = [tape.variable(a) for a in arrays]
    out = fn(*leaves)
    backward(out)
    return out.item(), [leaf.grad for leaf in leaves]


# --- closed-form linear-surrogate gradients ---------------------------------


def sgc_weight_gradient(X_tilde, W, labels, mask=None):
    """Gradient w.r.t. ``W`` of masked mean cross-entropy for logits ``X_tilde @ W``.

    Closed form ``X_m^T (softmax(X_m W) - Y_m) / |m|``.  When ``X_tilde`` is a
    recorded :class:`Tensor` the result is itself a recorded expression, which
    is how the matching loss is differentiated w.r.t. synthetic features.
    """
    W_ = _data(W)
    Xd = _data(X_tilde)
    n_all = Xd.shape[0]
    idx = np.arange(n_all) if mask is None else np.asarray(mask, dtype=np.int64)
    if idx.size == 0:
        raise EmptyMask("sgc_weight_gradient over an empty mask")
    C = W_.shape[1]
    Y = np.asarray(labels)
    if Y.ndim == 1:
        Y = _as_index(Y, n_all, C)
    Y = Y[idx] if Y.shape[0] == n_all else Y
    if isinstance(X_tilde, Tensor) and X_tilde.requires_grad:
        Xm = take_rows(X_tilde, idx) if mask is not None else X_tilde
        resid = sub(row_softmax(matmul(Xm, W)), Y)
        return scale(matmul(transpose(Xm), resid), 1.0 / len(idx))
    Xm = Xd[idx]
    return Xm.T @ (_softmax(Xm @ W_) - Y) / len(idx)
