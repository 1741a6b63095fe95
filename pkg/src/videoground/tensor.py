"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything numeric in this project flows through the `Tensor` class: forward
ops record their parents and a local backward rule, `backward()` walks the
recorded graph in reverse topological order. All storage is float64; gradient
checks need the headroom and nothing here is speed-critical enough to care.

Gradient semantics: calling `backward()` twice without `zero_grad()` in
between accumulates, matching the usual training-loop contract.
"""

from __future__ import annotations

import functools
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class ContractError(RuntimeError):
    """Raised when a caller violates a documented precondition."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias another node's buffer
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(
                    self.grad, self.data.shape).copy()
        else:
            self.grad += g

    # -- bookkeeping ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- backward pass --------------------------------------------------------

    def backward(self) -> None:
        """Populate `grad` on every requires-grad tensor reachable from here.

        The loss must be a scalar (size-1) tensor produced by recorded ops.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior nodes get a fresh buffer per sweep; leaves accumulate
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A named trainable tensor. Shape is fixed at construction."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise arithmetic ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return Tensor._result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return Tensor._result(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        a._accum(g * s)

    return Tensor._result(a.data * s, (a,), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b; b may also be a size-1 tensor (scalar broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if not (a.shape == b.shape or b.size == 1):
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} differ")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            gb = -g * a.data / (b.data ** 2)
            if b.size == 1 and a.size != 1:
                gb = np.sum(gb).reshape(b.shape)
            b._accum(gb)

    return Tensor._result(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        a._accum(g * mask)

    return Tensor._result(a.data * mask, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - t * t))

    return Tensor._result(t, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accum(g * s * (1.0 - s))

    return Tensor._result(s, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    r = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / r)

    return Tensor._result(r, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        a._accum(g * sign)

    return Tensor._result(np.abs(a.data), (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(g / a.data)

    return Tensor._result(np.log(a.data), (a,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data <= b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g * take_a)
        if b.requires_grad:
            b._accum(g * ~take_a)

    return Tensor._result(np.minimum(a.data, b.data), (a, b), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"maximum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g * take_a)
        if b.requires_grad:
            b._accum(g * ~take_a)

    return Tensor._result(np.maximum(a.data, b.data), (a, b), backward)


# -- reductions / reshaping ---------------------------------------------------

def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else
                     np.full(a.shape, g))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(ge, a.shape).copy())

    return Tensor._result(out_data, (a,), backward)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got shape {a.shape}")

    def backward(g):
        a._accum(g.T)

    return Tensor._result(a.data.T.copy(), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._result(out_data, tensors, backward)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a._accum(ga)

    return Tensor._result(a.data[idx].copy(), (a,), backward)


def scatter_rows(base: Tensor, indices: Sequence[int], rows: Tensor) -> Tensor:
    """Copy of `base` with `rows` written at `indices` (no duplicates)."""
    base, rows = _as_tensor(base), _as_tensor(rows)
    idx = np.asarray(indices, dtype=np.intp)
    if len(set(idx.tolist())) != idx.size:
        raise ContractError("scatter_rows: duplicate indices")
    if rows.shape != (idx.size,) + base.shape[1:]:
        raise DimensionError(
            f"scatter_rows: rows shape {rows.shape} does not fit "
            f"{idx.size} slots of {base.shape}")
    out_data = base.data.copy()
    out_data[idx] = rows.data

    def backward(g):
        if base.requires_grad:
            gb = g.copy()
            gb[idx] = 0.0
            base._accum(gb)
        if rows.requires_grad:
            rows._accum(g[idx])

    return Tensor._result(out_data, (base, rows), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols: expected 2-D, got shape {a.shape}")

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        a._accum(ga)

    return Tensor._result(a.data[:, start:stop].copy(), (a,), backward)


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """a[n×d] + b[d], broadcasting b across rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.shape != (a.shape[1],):
        raise DimensionError(
            f"add_rowvec: shapes {a.shape} and {b.shape} incompatible")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    return Tensor._result(a.data + b.data, (a, b), backward)


# -- matrix ops ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._result(out_data, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for overflow safety."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        x._accum(s * (g - dot))

    return Tensor._result(s, (x,), backward)


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (no learned affine)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm_rows: expected 2-D, got {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    d = x.shape[1]

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gxhat = np.sum(g * xhat, axis=1, keepdims=True) / d
        x._accum(inv * (g - gm - xhat * gxhat))

    return Tensor._result(xhat, (x,), backward)


@functools.lru_cache(maxsize=None)
def pooling_matrix(height: int, width: int) -> np.ndarray:
    """Row-stochastic [J×J] matrix averaging each cell's valid 3×3 window.

    The divisor is the count of in-grid cells (9 interior, 6 edge, 4 corner).
    """
    j = height * width
    m = np.zeros((j, j))
    for y in range(height):
        for x in range(width):
            row = y * width + x
            cells = [(yy, xx)
                     for yy in range(y - 1, y + 2)
                     for xx in range(x - 1, x + 2)
                     if 0 <= yy < height and 0 <= xx < width]
            w = 1.0 / len(cells)
            for yy, xx in cells:
                m[row, yy * width + xx] = w
    return m


def mean_pool_3x3_valid(grid: Tensor) -> Tensor:
    """Valid-window 3×3 mean pooling over a [H×W×d] feature grid.

    Edge and corner cells average only their in-grid neighbors.
    """
    grid = _as_tensor(grid)
    if grid.data.ndim != 3:
        raise DimensionError(
            f"mean_pool_3x3_valid: expected [H×W×d], got shape {grid.shape}")
    h, w, d = grid.shape
    flat = reshape(grid, (h * w, d))
    pooled = matmul(Tensor(pooling_matrix(h, w)), flat)
    return reshape(pooled, (h, w, d))


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy against a constant target, from logits.

    Computed as softplus(z) - target*z per element, which is overflow-safe.
    """
    logits = _as_tensor(logits)
    z = logits.data
    loss = np.maximum(z, 0.0) - target * z + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-z))
        logits._accum(np.broadcast_to(g, z.shape) * (s - target) / n)

    out = Tensor._result(np.array(loss.mean()), (logits,), backward)
    return out


# -- gradient checking --------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic scalar-valued function of `params` (it is
    evaluated twice at the base point to detect nondeterminism). The error
    measure is |analytic − numeric| / max(1, |analytic|), maximized over
    every coordinate of every parameter.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    base = f().data.copy()
    again = f().data.copy()
    if not np.array_equal(base, again):
        raise ContractError("grad_check: f is not deterministic")

    zero_grad(params)
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    zero_grad(params)
    return worst
