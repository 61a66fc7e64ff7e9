"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the generator, the projector and the training
objective are provided. Every op records a closure that maps the upstream
gradient to gradients of its inputs; :func:`backward` walks the graph in
reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "Parameter",
    "BatchNormState",
    "AdamState",
    "ShapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "square",
    "absolute",
    "tsum",
    "mean",
    "reshape",
    "stack",
    "relu",
    "conv2d",
    "batchnorm2d",
    "grid_sample_bilinear",
    "sampling_matrix",
    "backward",
    "zero_grad",
    "adam_step",
]

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    """An array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor; trainable parameters collect gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor(data, _parents=parents, _op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = fn
    else:
        out._parents = ()
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), fn, "mul")


def square(a: Tensor) -> Tensor:
    def fn(g):
        return (2.0 * a.data * g,)

    return _make(a.data * a.data, (a,), fn, "square")


def absolute(a: Tensor) -> Tensor:
    def fn(g):
        return (np.sign(a.data) * g,)

    return _make(np.abs(a.data), (a,), fn, "abs")


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the subgradient at 0 is taken as 0."""
    positive = a.data > 0

    def fn(g):
        return (g * positive,)

    return _make(np.where(positive, a.data, 0.0), (a,), fn, "relu")


# reductions and shape ------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), fn, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def fn(g):
        return (np.full(a.shape, float(g) / n),)

    return _make(a.data.mean(), (a,), fn, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    def fn(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), fn, "reshape")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, fn, "stack")


# convolution ---------------------------------------------------------------


def _pad_flat(x: np.ndarray) -> np.ndarray:
    """Zero-pad (B, C, H, W) by one pixel and flatten each plane row-major.

    Two trailing zeros let every 3x3 tap be read as one contiguous window of
    length ``H * (W + 2)``; the two extra output columns per row are junk.
    """
    b, c, h, w = x.shape
    w2 = w + 2
    flat = np.zeros((b, c, (h + 2) * w2 + 2))
    flat[:, :, : (h + 2) * w2].reshape(b, c, h + 2, w2)[:, :, 1:-1, 1:-1] = x
    return flat


def _correlate(xp: np.ndarray, taps: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum over taps of ``taps[dy, dx] @ window``; taps is (3, 3, F, C)."""
    b = xp.shape[0]
    f = taps.shape[2]
    w2 = w + 2
    length = h * w2
    out = np.zeros((b, f, length))
    for dy in range(3):
        for dx in range(3):
            off = dy * w2 + dx
            k = taps[dy, dx]
            for i in range(b):
                out[i] += k @ xp[i, :, off:off + length]
    return out.reshape(b, f, h, w2)[:, :, :, :w]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is (B, C, H, W), ``kernel`` is (F, C, 3, 3), ``bias`` is (F,).
    Output is (B, F, H, W).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"only 3x3 kernels are supported, got {kh}x{kw}")
    if kc != c:
        raise ShapeError(f"input has {c} channels but kernel expects {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")

    xp = _pad_flat(x.data)
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1))
    out = _correlate(xp, taps, h, w) + bias.data[None, :, None, None]

    def fn(g):
        w2 = w + 2
        length = h * w2
        gw = np.zeros((b, f, h, w2))
        gw[:, :, :, :w] = g
        gw = gw.reshape(b, f, length)
        dk = np.zeros((3, 3, f, c))
        for dy in range(3):
            for dx in range(3):
                off = dy * w2 + dx
                for i in range(b):
                    dk[dy, dx] += gw[i] @ xp[i, :, off:off + length].T
        dx_ = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 1, 0))
            dx_ = _correlate(_pad_flat(g), flipped, h, w)
        return dx_, dk.transpose(2, 3, 0, 1), g.sum(axis=(0, 2, 3))

    return _make(out, (x, kernel, bias), fn, "conv2d")


# batch normalisation -------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    Both arrays are ``None`` until the first training-mode call (or until
    seeded explicitly), and eval mode refuses to run before that.
    """

    channels: int
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def seed(self, mean, var) -> None:
        self.running_mean = np.array(mean, dtype=DTYPE).reshape(self.channels)
        self.running_var = np.array(var, dtype=DTYPE).reshape(self.channels)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation of a (B, C, H, W) tensor.

    In train mode the biased batch variance is used and the running
    statistics are updated as ``m * running + (1 - m) * batch``.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)

    if mode == "train":
        count = b * h * w
        if count < 2:
            raise ShapeError("train-mode batchnorm needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state.initialized:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mu
            state.running_var = m * state.running_var + (1.0 - m) * var
        else:
            state.running_mean = mu.copy()
            state.running_var = var.copy()
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def fn(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gx = g * gamma.data[None, :, None, None]
            dx = (
                inv[None, :, None, None]
                / count
                * (
                    count * gx
                    - gx.sum(axis=axes)[None, :, None, None]
                    - xhat * (gx * xhat).sum(axis=axes)[None, :, None, None]
                )
            )
            return dx, dgamma, dbeta

    elif mode == "eval":
        if not state.initialized:
            raise RuntimeError("batchnorm running statistics are uninitialized; train first or seed them")
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def fn(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * (gamma.data * inv)[None, :, None, None]
            return dx, dgamma, dbeta

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    return _make(out, (x, gamma, beta), fn, f"batchnorm2d[{mode}]")


# bilinear sampling ---------------------------------------------------------


def sampling_matrix(grid: np.ndarray, height: int, width: int) -> sparse.csr_matrix:
    """Sparse bilinear interpolation operator for a normalized sampling grid.

    ``grid[..., 0]`` is the x (column) coordinate and ``grid[..., 1]`` the y
    (row) coordinate, both in [-1, 1] with -1/+1 at the centres of the first
    and last pixels. Neighbours that fall outside the input contribute zero.
    The returned matrix has shape (H' * W', H * W).
    """
    grid = np.asarray(grid, dtype=DTYPE)
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise ShapeError(f"grid must have shape (H', W', 2), got {grid.shape}")
    col = (grid[..., 0].ravel() + 1.0) * 0.5 * (width - 1)
    row = (grid[..., 1].ravel() + 1.0) * 0.5 * (height - 1)
    c0 = np.floor(col)
    r0 = np.floor(row)
    fc = col - c0
    fr = row - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    n_out = col.size
    out_idx = np.arange(n_out)

    rows, cols, vals = [], [], []
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width) & (wgt != 0)
        rows.append(out_idx[ok])
        cols.append(rr[ok] * width + cc[ok])
        vals.append(wgt[ok])
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_out, height * width),
    )
    return mat.tocsr()


def apply_sampling(mat: sparse.csr_matrix, x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Apply a sampling matrix to every (B, C) plane of a (B, C, H, W) array."""
    b, c, h, w = x.shape
    flat = x.reshape(b * c, h * w).T
    return np.asarray(mat @ flat).T.reshape(b, c, *out_hw)


def grid_sample_bilinear(x: Tensor, grid, matrix: Optional[sparse.csr_matrix] = None) -> Tensor:
    """Bilinear sampling of ``x`` (B, C, H, W) at a fixed grid (H', W', 2).

    Gradients flow to ``x`` only; the grid is treated as a constant.
    A precomputed ``matrix`` from :func:`sampling_matrix` may be passed to
    skip rebuilding it.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"grid_sample_bilinear expects a 4-d input, got {x.shape}")
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise ShapeError(f"grid must have shape (H', W', 2), got {grid.shape}")
    b, c, h, w = x.shape
    out_hw = grid.shape[:2]
    mat = sampling_matrix(grid, h, w) if matrix is None else matrix
    out = apply_sampling(mat, x.data, out_hw)

    def fn(g):
        gflat = g.reshape(b * c, -1).T
        return (np.asarray(mat.T @ gflat).T.reshape(b, c, h, w),)

    return _make(out, (x,), fn, "grid_sample")


# reverse pass --------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Intermediate gradients live only for the duration of the call, so a
    second call without :func:`zero_grad` adds the same amounts again.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = None if p.grad is None else np.zeros_like(p.data)


# optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every trainable parameter."""
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.grad is None:
            raise RuntimeError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in trainable:
        key = id(p)
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * p.grad
        v = b2 * v + (1 - b2) * p.grad * p.grad
        state.m[key] = m
        state.v[key] = v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
