"""Reverse-mode automatic differentiation over numpy buffers.

Ops compute with numpy and, while a Tape is active, record a backward
closure per output node. The tape holds nodes in execution order, which is
a topological order, so backward() simply walks it in reverse and lets each
closure accumulate gradients (+=) into its inputs. Training runs in float32;
the finite-difference oracle promotes everything to float64.

Every op checks its output for NaN/Inf and raises instead of propagating
garbage silently.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names both."""


class FiniteCheckError(FloatingPointError):
    """An op produced NaN or Inf."""


class EmptyBatchError(ValueError):
    """A reduction was asked for over zero valid positions."""


class ContractError(ValueError):
    """An engine API precondition was violated (e.g. non-scalar loss)."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise FiniteCheckError(f"{op} produced non-finite values")


class Tensor:
    """A value in the computation graph: numpy buffer plus transient grad."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not Tensors")
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A named trainable tensor; its gradient buffer persists across steps."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tape:
    """Recorded op nodes in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, object]] = []

    def record(self, out: Tensor, backward_fn) -> None:
        self.nodes.append((out, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(node) back through the tape, then clear it.

    Gradients accumulate (+=) into every requires_grad input, so Parameters
    keep collecting until the optimizer zeroes them.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if not tape.nodes:
        raise ContractError("tape is empty; was the forward pass recorded?")
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape.nodes):
        if out.grad is not None:
            backward_fn()
    for out, _ in tape.nodes:
        if not isinstance(out, Parameter):
            out.grad = None
    tape.nodes.clear()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _emit(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], make_backward) -> Tensor:
    _check_finite(data, op)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and rg:
        tape.record(out, make_backward(out))
    return out


# -- elementwise and linear ops ---------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def make_backward(out):
        def fn():
            if a.requires_grad:
                _accum(a, out.grad)
            if b.requires_grad:
                _accum(b, out.grad)
        return fn

    return _emit(data, "add", (a, b), make_backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data - b.data

    def make_backward(out):
        def fn():
            if a.requires_grad:
                _accum(a, out.grad)
            if b.requires_grad:
                _accum(b, -out.grad)
        return fn

    return _emit(data, "sub", (a, b), make_backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def make_backward(out):
        def fn():
            if a.requires_grad:
                _accum(a, out.grad * b.data)
            if b.requires_grad:
                _accum(b, out.grad * a.data)
        return fn

    return _emit(data, "mul", (a, b), make_backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else -1]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} differ")
    data = a.data @ b.data

    def make_backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accum(a, g @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                _accum(b, a.data.swapaxes(-1, -2) @ g)
        return fn

    return _emit(data, "matmul", (a, b), make_backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis; x may carry any number of batch dims."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"affine: input width {x.data.shape} does not match weight {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine: bias {b.data.shape} does not match weight {w.data.shape}")
    data = x.data @ w.data + b.data

    def make_backward(out):
        def fn():
            g = out.grad
            if x.requires_grad:
                _accum(x, g @ w.data.T)
            gf = g.reshape(-1, g.shape[-1])
            if w.requires_grad:
                _accum(w, x.data.reshape(-1, x.data.shape[-1]).T @ gf)
            if b.requires_grad:
                _accum(b, gf.sum(axis=0))
        return fn

    return _emit(data, "affine", (x, w, b), make_backward)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def make_backward(out):
        def fn():
            _accum(x, out.grad * (1.0 - out.data * out.data))
        return fn

    return _emit(data, "tanh", (x,), make_backward)


def sigmoid(x: Tensor) -> Tensor:
    # Stable both-sided formulation; naive 1/(1+exp(-x)) overflows for x << 0.
    e = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    data = data.astype(x.data.dtype, copy=False)

    def make_backward(out):
        def fn():
            _accum(x, out.grad * out.data * (1.0 - out.data))
        return fn

    return _emit(data, "sigmoid", (x,), make_backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def make_backward(out):
        def fn():
            _accum(x, out.grad * (x.data > 0))
        return fn

    return _emit(data, "relu", (x,), make_backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    xd = x.data
    inner = np.tanh(_GELU_C * (xd + 0.044715 * xd**3))
    data = 0.5 * xd * (1.0 + inner)
    data = data.astype(xd.dtype, copy=False)

    def make_backward(out):
        def fn():
            d_inner = (1.0 - inner * inner) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
            _accum(x, out.grad * (0.5 * (1.0 + inner) + 0.5 * xd * d_inner))
        return fn

    return _emit(data, "gelu", (x,), make_backward)


def softmax_last_dim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def make_backward(out):
        def fn():
            g = out.grad
            dot = (g * out.data).sum(axis=-1, keepdims=True)
            _accum(x, out.data * (g - dot))
        return fn

    return _emit(data, "softmax_last_dim", (x,), make_backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.data.shape} / beta {beta.data.shape} "
            f"must both be ({d},) for input {x.data.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gamma.data * xhat + beta.data

    def make_backward(out):
        def fn():
            g = out.grad
            gf = g.reshape(-1, d)
            if gamma.requires_grad:
                _accum(gamma, (gf * xhat.reshape(-1, d)).sum(axis=0))
            if beta.requires_grad:
                _accum(beta, gf.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv_std * (dxhat - m1 - xhat * m2))
        return fn

    return _emit(data, "layer_norm", (x, gamma, beta), make_backward)


# -- shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def make_backward(out):
        def fn():
            _accum(x, out.grad.reshape(x.data.shape))
        return fn

    return _emit(data, "reshape", (x,), make_backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def make_backward(out):
        def fn():
            _accum(x, out.grad.transpose(inverse))
        return fn

    return _emit(data, "transpose", (x,), make_backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic-indexing slice; the backward scatters the gradient back in place."""
    data = x.data[key].copy()

    def make_backward(out):
        def fn():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[key] += out.grad
        return fn

    return _emit(data, "slice", (x,), make_backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def make_backward(out):
        def fn():
            pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
            for t, piece in zip(tensors, pieces):
                if t.requires_grad:
                    _accum(t, piece)
        return fn

    return _emit(data, "concat", tuple(tensors), make_backward)


def causal_masked_fill(scores: Tensor, fill_value: float = -1e9) -> Tensor:
    """Set strictly-future attention logits (col > row) to fill_value.

    Applied before softmax; -1e9 underflows to an exactly-zero attention
    weight, so position t cannot see positions > t even at the bit level.
    """
    n = scores.data.shape[-1]
    if scores.data.shape[-2] != n:
        raise ShapeError(f"causal_masked_fill expects square last dims, got {scores.data.shape}")
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    data = np.where(future, np.asarray(fill_value, dtype=scores.data.dtype), scores.data)

    def make_backward(out):
        def fn():
            _accum(scores, np.where(future, 0.0, out.grad))
        return fn

    return _emit(data, "causal_masked_fill", (scores,), make_backward)


# -- reductions and loss ------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def make_backward(out):
        def fn():
            _accum(x, np.broadcast_to(out.grad, x.data.shape))
        return fn

    return _emit(data, "sum_all", (x,), make_backward)


def mae_loss(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean absolute error over positions where mask == 1."""
    target = _as_tensor(target, like=pred)
    mask = _as_tensor(mask, like=pred)
    if pred.data.shape != target.data.shape or pred.data.shape != mask.data.shape:
        raise ShapeError(
            f"mae_loss: pred {pred.data.shape}, target {target.data.shape}, "
            f"mask {mask.data.shape} must all match"
        )
    denom = float(mask.data.sum())
    if denom == 0:
        raise EmptyBatchError("mae_loss: mask selects zero positions")
    diff = pred.data - target.data
    data = np.asarray((np.abs(diff) * mask.data).sum() / denom, dtype=pred.data.dtype)

    def make_backward(out):
        def fn():
            if pred.requires_grad:
                _accum(pred, out.grad * np.sign(diff) * mask.data / denom)
        return fn

    return _emit(data, "mae_loss", (pred, target, mask), make_backward)
