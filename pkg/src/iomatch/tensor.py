"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every tensor is a C-contiguous float64 matrix. Operations record themselves on
the innermost active :class:`Tape` whenever one of their inputs requires
gradients::

    with Tape() as tape:
        loss = mean(mul(w, w))
    backward(loss, tape)

Broadcasting is limited to adding a ``1 x n`` bias row to an ``m x n`` matrix.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """The tape or optimizer was used out of order."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_active = threading.local()


def _tape_stack() -> list:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = _active.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Context in which no operation is recorded, even if a tape is active."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-use: :meth:`backward` consumes it. Tapes are thread-local
    when activated, so independent training runs may use separate threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))

    def clear(self) -> None:
        self.nodes = []

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward() needs a 1x1 loss, got {loss.shape}")
        if not self.nodes:
            raise TapeError("backward() on an empty tape")
        produced = {id(node.out) for node in self.nodes}
        grads: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones((1, 1)))}
        for node in reversed(self.nodes):
            entry = grads.pop(id(node.out), None)
            if entry is None:
                continue
            input_grads = node.backward(entry[1])
            for inp, g in zip(node.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = (inp, g if prev is None else prev[1] + g)
        for key, (tensor, g) in grads.items():
            if key in produced:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` through ``tape``."""
    tape.backward(loss)


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(np.ascontiguousarray(out), (a, b), bw)


def _check_bias(a: Tensor, b: Tensor, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.rows == 1 and b.cols == a.cols:
        return True
    raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_bias(a, b, "add")

    def bw(g):
        gb = g.sum(axis=0, keepdims=True) if bias else g
        return g, gb

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_bias(a, b, "sub")

    def bw(g):
        gb = -g.sum(axis=0, keepdims=True) if bias else -g
        return g, gb

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_bias(a, b, "mul")

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if bias:
                gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    return _make(kernels.relu(a.data), (a,), lambda g: (kernels.relu_backward(a.data, g),))


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with inputs clamped from below at ``eps``.

    The clamped region has zero derivative.
    """
    clamped = np.maximum(a.data, eps)

    def bw(g):
        return (np.where(a.data > eps, g / clamped, 0.0),)

    return _make(np.log(clamped), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def softmax_rows(a: Tensor) -> Tensor:
    out = kernels.softmax_rows(a.data)
    return _make(out, (a,), lambda g: (kernels.softmax_rows_backward(out, g),))


def pair_softmax(a: Tensor) -> Tensor:
    """Split ``m x 2K`` logits into K two-way softmaxes; return the first column of each.

    Column pair ``(2k, 2k+1)`` of the input belongs to class ``k``. The returned
    ``m x K`` entry is the probability mass on ``2k``; its complement is implied.
    """
    if a.cols % 2:
        raise ShapeError(f"pair_softmax needs an even column count, got {a.shape}")
    out = kernels.pair_softmax(a.data)
    return _make(out, (a,), lambda g: (kernels.pair_softmax_backward(out, g),))


def row_sum(a: Tensor) -> Tensor:
    return _make(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def row_max(a: Tensor) -> Tensor:
    """Row maxima; the gradient routes to the first maximal entry."""
    idx = kernels.row_argmax(a.data)
    rows = np.arange(a.rows)
    out = a.data[rows, idx].reshape(-1, 1)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g[:, 0]
        return (ga,)

    return _make(out, (a,), bw)


def row_argmax(a: Tensor | np.ndarray) -> np.ndarray:
    data = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    return kernels.row_argmax(data)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        return _make(np.zeros((1, 1)), (a,), lambda g: (np.zeros(a.shape),))
    return _make(np.array([[a.data.sum() / n]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),))


def gather(a: Tensor, idx) -> Tensor:
    """Pick ``a[i, idx[i]]`` for every row, returning an ``m x 1`` column."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.rows,):
        raise ShapeError(f"gather needs {a.rows} indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.cols):
        raise IndexError(f"gather index out of range for {a.cols} columns")
    rows = np.arange(a.rows)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g[:, 0]
        return (ga,)

    return _make(a.data[rows, idx].reshape(-1, 1), (a,), bw)


def one_hot(idx, n_classes: int) -> Tensor:
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise IndexError(f"one_hot index out of range for {n_classes} classes")
    out = np.zeros((idx.size, n_classes))
    out[np.arange(idx.size), idx] = 1.0
    return Tensor._wrap(out)


# ---------------------------------------------------------------------------
# optimization


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """FixMatch-style cosine decay: ``lr * cos(7*pi*step / (16*total))``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * math.cos(7.0 * math.pi * step / (16.0 * total_steps))


class SGD:
    """Momentum SGD: ``v <- momentum * v + g``; ``w <- w - lr * v``.

    ``weight_decay`` adds ``weight_decay * w`` to the gradient before the
    velocity update; it defaults to 0.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise TapeError(f"parameter {p.name or p} has no gradient; run backward() first")
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
            p.grad = np.zeros_like(p.data)


def sgd_step(params, lr: float, momentum: float = 0.0, optimizer: SGD | None = None) -> SGD:
    """One momentum-SGD update of ``params``.

    Velocity lives on the returned optimizer; pass it back in for the next
    step so momentum carries over.
    """
    if optimizer is None:
        plist = list(params.parameters()) if hasattr(params, "parameters") else list(params)
        optimizer = SGD(plist, lr=lr, momentum=momentum)
    optimizer.momentum = momentum
    optimizer.step(lr)
    return optimizer


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the loss from the current ``params`` on every call and
    be deterministic. The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if len(tape):
        backward(loss, tape)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = f().item()
            flat[j] = orig - eps
            down = f().item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(gflat[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[j] - numeric) / denom)
    for p in params:
        p.grad = None
    return worst
