"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and with at least one
input that requires a gradient, are appended to that tape. The tape is a
topologically ordered list because nodes are appended in execution order,
so :func:`backward` simply walks it in reverse.

    with Tape() as tape:
        loss = smooth_l1(lp_norm(linear(x, w, b), 2), target)
    grads = backward(tape, loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
NORM_FLOOR = 1e-12

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Single-writer record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A contiguous array plus the bookkeeping needed for backward passes."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        data = np.asarray(data, dtype=dtype or DTYPE)
        # trainable leaves are updated in place, so never alias the caller's array
        self.data = np.array(data, order="C", copy=True) if requires_grad else np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_ref: tuple[Tape, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _scalar_error(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(out_data: np.ndarray, inputs: tuple, grad_fn) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, dtype=out_data.dtype)  # fresh array: no defensive copy needed
    out.requires_grad = track
    if track:
        out.tape_ref = (tape, len(tape.nodes))
        tape.nodes.append(_Node(out, inputs, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast("add", a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast("sub", a, b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast("mul", a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.data.dtype)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _record(out, (x,), lambda g: (g * sig,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.ascontiguousarray(x.data[index]), (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        others = [s for i, s in enumerate(t.shape) if i != ax]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if others != ref:
            raise ValueError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (batch, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        return _record(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g))
    out += bias.data
    return _record(
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def lp_norm(x: Tensor, p: float = 2.0, axis: int = -1) -> Tensor:
    """Row-wise ``(sum |x_i|^p)^(1/p)`` for ``1 <= p <= 2``.

    Zero entries contribute exactly zero and receive zero gradient, so the
    norm of a zero vector is exactly zero.
    """
    if not 1.0 <= p <= 2.0:
        raise ValueError(f"lp_norm: p must lie in [1, 2], got {p}")
    v = x.data
    a = np.abs(v)
    if p == 2.0:
        out = np.sqrt((v * v).sum(axis=axis))

        def grad_fn(g):
            n = np.expand_dims(out, axis)
            safe = np.where(n > 0, n, 1)
            return (np.where(n > 0, v / safe, 0) * np.expand_dims(g, axis),)

    elif p == 1.0:
        out = a.sum(axis=axis)

        def grad_fn(g):
            return (np.sign(v) * np.expand_dims(g, axis),)

    else:
        nz = a > 0
        la = np.log(np.maximum(a, NORM_FLOOR))
        powered = np.where(nz, np.exp(p * la), 0)
        s = powered.sum(axis=axis)
        out = np.where(s > 0, np.exp(np.log(np.maximum(s, NORM_FLOOR**p)) / p), 0)

        def grad_fn(g):
            # d/dv_i = sign(v_i) |v_i|^(p-1) * n^(1-p)
            n = np.expand_dims(out, axis)
            scale = np.where(n > 0, np.exp((1 - p) * np.log(np.maximum(n, NORM_FLOOR))), 0)
            dir_ = np.where(nz, np.sign(v) * np.exp((p - 1) * la), 0)
            return (dir_ * scale * np.expand_dims(g, axis),)

    return _record(np.asarray(out, dtype=v.dtype), (x,), grad_fn)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: ``0.5 r^2 / beta`` inside ``|r| < beta``, else ``|r| - beta/2``."""
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1: pred {pred.shape} and target {target.shape} differ")
    r = pred.data - target.data
    ar = np.abs(r)
    inside = ar < beta
    per = np.where(inside, 0.5 * r * r / beta, ar - 0.5 * beta)
    n = max(r.size, 1)
    dr = np.where(inside, r / beta, np.sign(r)) / n

    return _record(
        np.asarray(per.sum() / n, dtype=pred.data.dtype),
        (pred, target),
        lambda g: (g * dr, -g * dr),
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _record(
        out,
        (x,),
        lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
    )


def nce_loss(positive: Tensor, negatives: Tensor) -> Tensor:
    """Mean InfoNCE loss for similarity logits.

    ``positive`` has shape (batch,), ``negatives`` has shape (batch, k).
    """
    if positive.data.ndim != 1 or negatives.data.ndim != 2 or negatives.shape[0] != positive.shape[0]:
        raise ValueError(
            f"nce_loss: positive {positive.shape} incompatible with negatives {negatives.shape}"
        )
    logits = concat([reshape(positive, (-1, 1)), negatives], axis=1)
    return mul(mean(getitem(log_softmax(logits, axis=1), (slice(None), 0))), -1.0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Leaf tensors with ``requires_grad`` have their ``grad`` accumulated; the
    returned mapping holds the gradient of every such leaf that was reached.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.tape_ref is None or loss.tape_ref[0] is not tape:
        raise ValueError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.tape_ref[1] + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
            if inp.tape_ref is None:
                leaves[inp] = leaves[inp] + gi if inp in leaves else gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    for leaf, g in leaves.items():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return leaves


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> None:
    """In-place Adam update with bias correction."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: parameter list changed since the first step")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad {g.shape} does not match param {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.state, self.params, [p.grad for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
