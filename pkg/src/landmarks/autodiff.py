"""Reverse-mode automatic differentiation over dense numpy arrays.

Every op returns a new ``Tensor`` that remembers its parents and a closure
pushing the output gradient back to them (define-by-run: the graph is rebuilt
on every training step). Values are 64-bit floats; a non-finite value
produced by any op raises immediately.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .errors import DataError, NonFiniteError, ShapeError, SingularSystemError

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
INSTANCE_NORM_EPS = 1e-5

_node_ids = itertools.count()


class Tensor:
    """N-dimensional value node in the reverse-mode graph"""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        op: str = "",
    ):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by {op or 'leaf'}")
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.node_id = next(_node_ids)
        self.op = op
        self._parents = parents if self.requires_grad else ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values) -> Tensor:
    """Leaf tensor that collects gradients"""
    return Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True)


def _make(values: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(values, parents=tuple(parents), op=op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# GRAPH

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss"""
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node.grad is not None and not np.all(np.isfinite(node.grad)):
            raise NonFiniteError(f"NaN gradient detected at {node.op or 'leaf'} node {node.node_id}")


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ELEMENTWISE

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def _backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.values + b.values, (a, b), "add", _backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def _backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.values - b.values, (a, b), "sub", _backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def _backward(g):
        _accum(a, _unbroadcast(g * b.values, a.shape))
        _accum(b, _unbroadcast(g * a.values, b.shape))

    return _make(a.values * b.values, (a, b), "mul", _backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out_values = a.values / b.values

    def _backward(g):
        _accum(a, _unbroadcast(g / b.values, a.shape))
        _accum(b, _unbroadcast(-g * out_values / b.values, b.shape))

    return _make(out_values, (a, b), "div", _backward)


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        _accum(a, g * exponent * a.values ** (exponent - 1))

    return _make(a.values ** exponent, (a,), f"pow{exponent}", _backward)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_values = np.exp(a.values)

    def _backward(g):
        _accum(a, g * out_values)

    return _make(out_values, (a,), "exp", _backward)


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0

    def _backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.values, 0.0), (a,), "relu", _backward)


def leaky_relu(a: TensorLike, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.values > 0, 1.0, slope)

    def _backward(g):
        _accum(a, g * factor)

    return _make(a.values * factor, (a,), "leaky_relu", _backward)


def norm(a: TensorLike, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0"""
    a = as_tensor(a)
    out_values = np.sqrt(np.sum(a.values ** 2, axis=axis))

    def _backward(g):
        n = np.expand_dims(out_values, axis)
        safe = np.where(n > 0, n, 1.0)
        _accum(a, np.where(n > 0, a.values / safe, 0.0) * np.expand_dims(g, axis))

    return _make(out_values, (a,), "norm", _backward)


# SHAPES AND REDUCTIONS

def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), "sum", _backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out_values = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from e

    def _backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_values, (a,), "reshape", _backward)


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def _backward(g):
        _accum(a, g.T)

    return _make(a.values.T, (a,), "transpose", _backward)


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        _accum(a, full)

    return _make(a.values[index], (a,), "getitem", _backward)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out_values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def _backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, np.take(g, np.arange(lo, hi), axis=axis))

    return _make(out_values, tuple(parts), "concat", _backward)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def _backward(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _make(a.values @ b.values, (a, b), "matmul", _backward)


# NETWORK OPS

def conv3d(x: TensorLike, w: TensorLike, padding: int = 0, bias: Optional[TensorLike] = None) -> Tensor:
    """Stride-1 3D convolution of a (C_in, H, W, D) input with (C_out, C_in, k, k, k) kernels"""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: input {x.shape} does not match kernel {w.shape}")
    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d: bias shape {b.shape} does not match {w.shape[0]} output channels")
    p = int(padding)
    xp = np.pad(x.values, ((0, 0), (p, p), (p, p), (p, p))) if p else x.values
    kx, ky, kz = w.shape[2:]
    oh, ow, od = xp.shape[1] - kx + 1, xp.shape[2] - ky + 1, xp.shape[3] - kz + 1
    if min(oh, ow, od) < 1:
        raise ShapeError(f"conv3d: kernel {w.shape[2:]} larger than padded input {xp.shape[1:]}")
    offsets = list(itertools.product(range(kx), range(ky), range(kz)))

    out = np.zeros((w.shape[0], oh, ow, od))
    for i, j, k in offsets:
        out += np.tensordot(w.values[:, :, i, j, k], xp[:, i:i + oh, j:j + ow, k:k + od], axes=([1], [0]))
    if b is not None:
        out += b.values[:, None, None, None]

    def _backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, k in offsets:
                gxp[:, i:i + oh, j:j + ow, k:k + od] += np.tensordot(w.values[:, :, i, j, k], g, axes=([0], [0]))
            h, wd, d = x.shape[1:]
            _accum(x, gxp[:, p:p + h, p:p + wd, p:p + d])
        if w.requires_grad:
            gw = np.empty_like(w.values)
            for i, j, k in offsets:
                gw[:, :, i, j, k] = np.tensordot(g, xp[:, i:i + oh, j:j + ow, k:k + od], axes=([1, 2, 3], [1, 2, 3]))
            _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(1, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv3d", _backward)


def instance_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per-channel normalisation over the spatial axes with learned scale and shift"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise ShapeError(f"instance_norm: input {x.shape}, scale {gamma.shape}, shift {beta.shape}")
    axes = (1, 2, 3)
    n = float(np.prod(x.shape[1:]))
    mu = x.values.mean(axis=axes, keepdims=True)
    centered = x.values - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv
    g4 = gamma.values[:, None, None, None]

    def _backward(g):
        _accum(gamma, np.sum(g * xhat, axis=axes))
        _accum(beta, np.sum(g, axis=axes))
        if x.requires_grad:
            dxhat = g * g4
            dx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            _accum(x, dx)

    return _make(g4 * xhat + beta.values[:, None, None, None], (x, gamma, beta), "instance_norm", _backward)


def max_pool3d(x: TensorLike) -> Tensor:
    """2x2x2 max pooling with stride 2; trailing odd rows are dropped"""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool3d expects (C, H, W, D), got {x.shape}")
    c = x.shape[0]
    h, w, d = (s // 2 for s in x.shape[1:])
    if min(h, w, d) < 1:
        raise ShapeError(f"max_pool3d: spatial shape {x.shape[1:]} too small to pool")
    crop = x.values[:, :2 * h, :2 * w, :2 * d]
    blocks = crop.reshape(c, h, 2, w, 2, d, 2).transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, h, w, d, 8)
    arg = blocks.argmax(axis=-1)[..., None]
    out_values = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def _backward(g):
        gb = np.zeros((c, h, w, d, 8))
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        full = np.zeros_like(x.values)
        full[:, :2 * h, :2 * w, :2 * d] = gb.reshape(c, h, w, d, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6).reshape(
            c, 2 * h, 2 * w, 2 * d
        )
        _accum(x, full)

    return _make(out_values, (x,), "max_pool3d", _backward)


def spatial_softmax(x: TensorLike) -> Tensor:
    """Softmax over all spatial positions, separately per channel"""
    x = as_tensor(x)
    c = x.shape[0]
    flat = x.values.reshape(c, -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        gp = g.reshape(c, -1)
        _accum(x, p * (gp - (gp * p).sum(axis=1, keepdims=True)))

    return _make(p.reshape(x.shape), (x,), "spatial_softmax", _backward)


def expected_coordinates(probs: TensorLike, coords: np.ndarray) -> Tensor:
    """Per-channel expectation of ``coords`` (one 3-vector per voxel) under ``probs``"""
    probs = as_tensor(probs)
    c = probs.shape[0]
    grid = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    flat = probs.values.reshape(c, -1)
    if flat.shape[1] != grid.shape[0]:
        raise ShapeError(f"expected_coordinates: {flat.shape[1]} voxels vs {grid.shape[0]} coordinates")

    def _backward(g):
        _accum(probs, (g @ grid.T).reshape(probs.shape))

    return _make(flat @ grid, (probs,), "expected_coordinates", _backward)


# LINEAR ALGEBRA

def _equilibrate(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    row = np.max(np.abs(a), axis=1)
    row = np.where(row > 0, 1.0 / row, 1.0)
    col = np.max(np.abs(a * row[:, None]), axis=0)
    col = np.where(col > 0, 1.0 / col, 1.0)
    return row, col


def _factor(a: np.ndarray):
    row, col = _equilibrate(a)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = linalg.lu_factor(a * row[:, None] * col[None, :], check_finite=False)
    return (lu, piv), row, col


def _pivot_ratio(lu: np.ndarray) -> float:
    pivots = np.abs(np.diag(lu))
    if pivots.min() == 0.0:
        return float("inf")
    return float(pivots.max() / pivots.min())


def condition_estimate(a: np.ndarray) -> float:
    """Pivot-magnitude ratio of the LU factors of the equilibrated matrix"""
    factors, _, _ = _factor(np.asarray(a, dtype=np.float64))
    return _pivot_ratio(factors[0])


def solve(a: TensorLike, b: TensorLike) -> Tensor:
    """Solve ``A x = b`` by LU with partial pivoting; gradients by implicit differentiation"""
    a, b = as_tensor(a), as_tensor(b)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n or b.shape[0] != n or b.ndim > 2:
        raise ShapeError(f"solve: matrix {a.shape} and right-hand side {b.shape} do not match")
    (lu, piv), row, col = _factor(a.values)
    cond = _pivot_ratio(lu)
    if cond > CONDITION_LIMIT:
        raise SingularSystemError(
            f"linear system is singular or ill-conditioned (condition estimate {cond:.3e} > {CONDITION_LIMIT:.0e})"
        )
    scale_b = row if b.ndim == 1 else row[:, None]
    scale_x = col if b.ndim == 1 else col[:, None]
    x_values = scale_x * linalg.lu_solve((lu, piv), scale_b * b.values, check_finite=False)

    def _backward(g):
        gb = scale_b * linalg.lu_solve((lu, piv), scale_x * g, trans=1, check_finite=False)
        _accum(b, gb)
        if a.requires_grad:
            _accum(a, -np.outer(gb, x_values) if b.ndim == 1 else -gb @ x_values.T)

    return _make(x_values, (a, b), "solve", _backward)


# GEOMETRY

def sqdist(a: TensorLike, b: TensorLike) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``a`` (n, d) and ``b`` (m, d)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist: point sets {a.shape} and {b.shape} are incompatible")
    diff = a.values[:, None, :] - b.values[None, :, :]

    def _backward(g):
        weighted = 2.0 * g[:, :, None] * diff
        _accum(a, weighted.sum(axis=1))
        _accum(b, -weighted.sum(axis=0))

    return _make(np.einsum("ijk,ijk->ij", diff, diff), (a, b), "sqdist", _backward)


def tps_kernel(sq: TensorLike, kernel: str = "squared_distance") -> Tensor:
    """Map squared distances s to Phi(r) = r^2 ln r, with r = s ("squared_distance") or r = sqrt(s) ("distance")"""
    sq = as_tensor(sq)
    s = sq.values
    if np.any(s < 0):
        raise DataError("tps_kernel: negative squared distance")
    positive = s > 0
    safe = np.where(positive, s, 1.0)
    if kernel == "distance":
        out_values = np.where(positive, 0.5 * s * np.log(safe), 0.0)
        slope = np.where(positive, 0.5 * (np.log(safe) + 1.0), 0.0)
    elif kernel == "squared_distance":
        out_values = np.where(positive, s * s * np.log(safe), 0.0)
        slope = np.where(positive, 2.0 * s * np.log(safe) + s, 0.0)
    else:
        raise ValueError(f"unknown TPS kernel {kernel!r}")

    def _backward(g):
        _accum(sq, g * slope)

    return _make(out_values, (sq,), f"tps_kernel:{kernel}", _backward)


def interpolate_trilinear(
    data: np.ndarray, index_points: np.ndarray, with_gradient: bool = False
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Trilinear interpolation at continuous voxel indices (N, 3) with zero padding outside the grid"""
    pts = np.asarray(index_points, dtype=np.float64).reshape(-1, 3)
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    shape = np.array(data.shape)
    values = np.zeros(pts.shape[0])
    grad = np.zeros_like(pts) if with_gradient else None
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + np.array(corner)
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        corner_values = np.zeros(pts.shape[0])
        corner_values[inside] = data[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
        weights = [frac[:, ax] if corner[ax] else 1.0 - frac[:, ax] for ax in range(3)]
        values += weights[0] * weights[1] * weights[2] * corner_values
        if with_gradient:
            signs = [1.0 if corner[ax] else -1.0 for ax in range(3)]
            grad[:, 0] += signs[0] * weights[1] * weights[2] * corner_values
            grad[:, 1] += weights[0] * signs[1] * weights[2] * corner_values
            grad[:, 2] += weights[0] * weights[1] * signs[2] * corner_values
    return values, grad


def sample_trilinear(
    data: np.ndarray,
    points: TensorLike,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> Tensor:
    """Differentiable (w.r.t. the points) trilinear sampling of a constant volume at world coordinates (N, 3)"""
    points = as_tensor(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"sample_trilinear expects (N, 3) points, got {points.shape}")
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    values, grad = interpolate_trilinear(data, (points.values - origin) / spacing, with_gradient=points.requires_grad)

    def _backward(g):
        _accum(points, g[:, None] * grad / spacing)

    return _make(values, (points,), "sample_trilinear", _backward)


# CHECKING

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: TensorLike,
    eps: float = 1e-5,
    coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)"""
    start = np.array(as_tensor(x).values, copy=True)
    leaf = Tensor(start.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(start)

    indices = np.arange(start.size)
    if coords is not None and coords < start.size:
        indices = np.random.default_rng(seed).choice(start.size, size=coords, replace=False)

    worst = 0.0
    for i in indices:
        plus, minus = start.copy(), start.copy()
        plus.flat[i] += eps
        minus.flat[i] -= eps
        numeric = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * eps)
        a = float(analytic.flat[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
