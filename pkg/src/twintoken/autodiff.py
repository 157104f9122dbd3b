"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is rebuilt on every forward pass (define-by-run): each Tensor
produced by an operation keeps references to its parents and a closure
that pushes its output gradient back to them.  Calling ``backward()`` on
a scalar replays those closures in reverse topological order.

Broadcasting is deliberately restricted: ``add`` accepts a second operand
whose shape matches the trailing dimensions of the first (bias-add over
rows, positional embeddings, additive masks); everything else requires
exact shape agreement and raises :class:`DimensionError` otherwise.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import DegenerateRowError, DimensionError, UndefinedSimilarityError

# Additive mask sentinel standing in for -inf: large enough that
# exp(x - max) underflows to exactly 0.0 after max-subtraction.
NEG_MASK = 1e30
# Rows whose maximum is below this are considered fully masked.
_DEGENERATE_ROW_MAX = -1e29

_LN_EPS = 1e-6
_INV_SQRT_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A node in the recorded computation graph.

    ``data`` is always a float64 ndarray.  ``grad`` is lazily allocated
    with the same shape on the first accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.ndim != 0:
            raise DimensionError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data):
    """Create a trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data):
    """Create a non-trainable leaf tensor."""
    return Tensor(data, requires_grad=False)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match the trailing dims of ``a`` (bias-add)."""
    if a.data.shape != b.data.shape:
        if b.data.ndim >= a.data.ndim or a.data.shape[a.data.ndim - b.data.ndim:] != b.data.shape:
            raise DimensionError(
                f"add: shapes {a.data.shape} and {b.data.shape} are not "
                "identical and the second is not a trailing slice of the first"
            )
    lead = tuple(range(a.data.ndim - b.data.ndim))

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=lead) if lead else g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT_2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), backward)


# ---------------------------------------------------------------------------
# matmul / shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: both operands share identical leading (batch) dims,
    or ``b`` is 2-D and applied to every leading slice of ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} disagree")
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.data.shape} and {b.data.shape} disagree")

    def backward(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2 and a.data.ndim > 2:
            k, n = b.data.shape
            _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
        else:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    """Take slices along ``axis`` at ``indices`` (gather); backward scatter-adds."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        if not (a.requires_grad or a._backward is not None):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        ga = np.moveaxis(a.grad, axis, 0)
        np.add.at(ga, indices, np.moveaxis(g, axis, 0))

    return _make(np.take(a.data, indices, axis=axis), (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row gather: ``out[i] = a[indices[i]]``."""
    return index_select(a, 0, indices)


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a single row vector (1, D) or (D,) into an (n, D) matrix."""
    row = a.data.reshape(1, -1)

    def backward(g):
        _accumulate(a, g.sum(axis=0).reshape(a.data.shape))

    return _make(np.repeat(row, n, axis=0), (a,), backward)


# ---------------------------------------------------------------------------
# reductions / normalizations


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def backward(g):
        _accumulate(a, np.full(shape, float(g)))

    return _make(a.data.sum(), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    size = a.data.size
    shape = a.data.shape

    def backward(g):
        _accumulate(a, np.full(shape, float(g) / size))

    return _make(a.data.mean(), (a,), backward)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last dimension.

    Entries at or below the mask sentinel produce exactly 0.  A fully
    masked row raises :class:`DegenerateRowError`.
    """
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("softmax_lastdim: empty last dimension")
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(m <= _DEGENERATE_ROW_MAX) or not np.all(np.isfinite(m)):
        raise DegenerateRowError("softmax_lastdim: a row has no unmasked entry")
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _make(y, (a,), backward)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("log_softmax_lastdim: empty last dimension")
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(m <= _DEGENERATE_ROW_MAX) or not np.all(np.isfinite(m)):
        raise DegenerateRowError("log_softmax_lastdim: a row has no unmasked entry")
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def backward(g):
        _accumulate(a, g - sm * g.sum(axis=-1, keepdims=True))

    return _make(y, (a,), backward)


def l2_normalize_lastdim(a: Tensor) -> Tensor:
    """Scale each last-dim slice to unit Euclidean norm."""
    x = a.data
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise UndefinedSimilarityError("l2_normalize_lastdim: zero-norm row")
    y = x / norm

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - y * inner) / norm)

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Layer normalization over the last dimension with affine parameters."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std

    def backward(g):
        lead = tuple(range(x.data.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        gx = g * gamma.data
        _accumulate(
            x,
            inv_std
            * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            ),
        )

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; blocks all gradient flow in backward."""
    return Tensor(a.data)


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between rows: out[i, j] = ||a_i - b_j||^2."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"pairwise_sqdist: shapes {a.data.shape} and {b.data.shape}")
    aa = (a.data * a.data).sum(axis=1)
    bb = (b.data * b.data).sum(axis=1)
    d = aa[:, None] + bb[None, :] - 2.0 * (a.data @ b.data.T)
    np.maximum(d, 0.0, out=d)

    def backward(g):
        _accumulate(a, 2.0 * (a.data * g.sum(axis=1, keepdims=True) - g @ b.data))
        _accumulate(b, 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data))

    return _make(d, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last dimension: ``x @ weight + bias``."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out
