"""Dense float64 tensors with a reverse-mode differentiation tape.

Every differentiable operation is a :class:`Function` subclass. Applying one
to tensors that require gradients links the output to a node holding the
saved operands; :func:`backward` orders the reachable nodes topologically
(the :class:`Tape`) and sweeps them in reverse.

Broadcasting is deliberately limited. Elementwise binary ops require equal
shapes; the only implicit expansion is the trailing feature axis of biases
and affine parameters, which each primitive documents.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, sampling)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


def _shape_error(name: str, *shapes) -> ShapeError:
    return ShapeError(f"{name}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class Tensor:
    """A dense array of float64 values with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars are constants, tensors must match shapes
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Node:
    """One recorded primitive application."""

    __slots__ = ("fn", "inputs", "consumed")

    def __init__(self, fn: "Function", inputs: tuple[Tensor, ...]):
        self.fn = fn
        self.inputs = inputs
        self.consumed = False


class Function:
    """Base class for primitives.

    Subclasses implement ``forward`` on raw arrays (stashing whatever the
    gradient needs on ``self``) and ``backward`` returning one gradient per
    input, or ``None`` where an input needs none.
    """

    name = "function"

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    def needs(self, i: int) -> bool:
        return self._needs[i]

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        track = _grad_enabled() and any(t.requires_grad for t in tensors)
        fn._needs = tuple(t.requires_grad for t in tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{fn.name}: non-finite values in output")
        result = Tensor(out, requires_grad=track)
        if track:
            result._node = Node(fn, tensors)
        return result


class Tape:
    """Nodes reachable from a scalar loss, inputs before consumers."""

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[tuple[Tensor, Node]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append((t, node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaves reached through the graph always end with a ``grad`` array, zero
    where the loss does not depend on them. The graph is released afterwards;
    a second call on the same loss raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("backward: loss is not connected to any parameter")
    tape = Tape.from_loss(loss)
    if any(node.consumed for _, node in tape.nodes):
        raise TapeError("backward: graph already differentiated; run a fresh forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, node in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        node.consumed = True
        if g is None:
            continue
        in_grads = node.fn.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise TapeError(f"{node.fn.name}: gradient shape {ig.shape} != input shape {inp.shape}")
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    for _, node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp._node is None and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
        node.fn.__dict__.clear()


# ---------------------------------------------------------------------------
# elementwise primitives


def _check_same(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise _shape_error(name, a.shape, b.shape)


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_same(self.name, a, b)
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_same(self.name, a, b)
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_same(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Scale(Function):
    name = "scale"

    def forward(self, a, k: float):
        self.k = float(k)
        return a * self.k

    def backward(self, g):
        return (g * self.k,)


class AddScalar(Function):
    name = "add_scalar"

    def forward(self, a, k: float):
        return a + float(k)

    def backward(self, g):
        return (g,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        with np.errstate(over="ignore"):
            self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        self.s = _sigmoid(a)
        return self.s

    def backward(self, g):
        return (g * self.s * (1.0 - self.s),)


class SiLU(Function):
    """x * sigmoid(x), also called Swish."""

    name = "silu"

    def forward(self, a):
        self.a = a
        self.s = _sigmoid(a)
        return a * self.s

    def backward(self, g):
        s = self.s
        return (g * (s + self.a * s * (1.0 - s)),)


class Softplus(Function):
    """log(1 + e^x) evaluated as max(x, 0) + log1p(e^-|x|), finite everywhere."""

    name = "softplus"

    def forward(self, a):
        self.a = a
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    def backward(self, g):
        return (g * _sigmoid(self.a),)


# ---------------------------------------------------------------------------
# shape primitives


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise _shape_error(self.name, a.shape, shape) from None

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes):
        axes = tuple(axes)
        if sorted(axes) != list(range(a.ndim)):
            raise _shape_error(self.name, a.shape, axes)
        self.inv = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(self.inv)),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = -1):
        ref = arrays[0].shape
        ax = axis % len(ref)
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(arr.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
                raise _shape_error(self.name, ref, arr.shape)
        self.ax = ax
        self.splits = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.ax))


class BroadcastTokens(Function):
    """Repeat a (B, C) array along a new token axis to (B, L, C)."""

    name = "broadcast_tokens"

    def forward(self, a, length: int):
        if a.ndim != 2:
            raise _shape_error(self.name, a.shape, ("B", "C"))
        return np.repeat(a[:, None, :], int(length), axis=1)

    def backward(self, g):
        return (g.sum(axis=1),)


# ---------------------------------------------------------------------------
# reductions


class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum())

    def backward(self, g):
        return (np.full(self.shape, float(g)),)


class Mean(Function):
    name = "mean"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean())

    def backward(self, g):
        return (np.full(self.shape, float(g) / max(1, int(np.prod(self.shape)))),)


class SumSquares(Function):
    """Sum of squared differences between two equal-shape arrays."""

    name = "sum_squares"

    def forward(self, a, b):
        _check_same(self.name, a, b)
        self.diff = a - b
        return np.asarray(np.sum(self.diff * self.diff))

    def backward(self, g):
        d = 2.0 * float(g) * self.diff
        return d, -d


# ---------------------------------------------------------------------------
# layers


class Linear(Function):
    """x @ W + b over the last axis; x (..., in), W (in, out), b (out,)."""

    name = "linear"

    def forward(self, x, w, b=None):
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise _shape_error(self.name, x.shape, w.shape)
        if b is not None and b.shape != (w.shape[1],):
            raise _shape_error(self.name, w.shape, b.shape)
        self.x, self.w = x, w
        out = x @ w
        if b is not None:
            out = out + b
        return out

    def backward(self, g):
        x2 = self.x.reshape(-1, self.x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ self.w.T if self.needs(0) else None
        gw = x2.T @ g2 if self.needs(1) else None
        gb = g2.sum(axis=0) if len(self._needs) > 2 and self.needs(2) else None
        return gx, gw, gb


class LayerNorm(Function):
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""

    name = "layer_norm"

    def forward(self, x, gamma, beta, eps: float = LAYER_NORM_EPS):
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise _shape_error(self.name, x.shape, gamma.shape, beta.shape)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat = self.xhat
        gxhat = g * self.gamma
        gx = self.rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


class CausalConv1d(Function):
    """Depthwise causal convolution over tokens.

    x (B, L, D), w (D, K), b (D,). Output token t sees inputs t-K+1..t with
    zero left padding; ``w[:, K-1]`` multiplies the current token. Requires
    K <= L.
    """

    name = "conv1d"

    def forward(self, x, w, b):
        if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2] or b.shape != (x.shape[2],):
            raise _shape_error(self.name, x.shape, w.shape)
        L, K = x.shape[1], w.shape[1]
        if K > L:
            raise _shape_error(self.name, x.shape, w.shape)
        xp = np.concatenate([np.zeros((x.shape[0], K - 1, x.shape[2])), x], axis=1)
        self.xp, self.w, self.L = xp, w, L
        out = np.zeros_like(x)
        for k in range(K):
            out += xp[:, k : k + L, :] * w[:, k]
        return out + b

    def backward(self, g):
        K, L = self.w.shape[1], self.L
        gxp = np.zeros_like(self.xp)
        gw = np.empty_like(self.w)
        for k in range(K):
            gxp[:, k : k + L, :] += g * self.w[:, k]
            gw[:, k] = np.einsum("bld,bld->d", g, self.xp[:, k : k + L, :])
        return gxp[:, K - 1 :, :], gw, g.sum(axis=(0, 1))


# ---------------------------------------------------------------------------
# functional API


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(a, k: float) -> Tensor:
    return Scale.apply(a, k=k)


def add_scalar(a, k: float) -> Tensor:
    return AddScalar.apply(a, k=k)


def exp(a) -> Tensor:
    return Exp.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def silu(a) -> Tensor:
    return SiLU.apply(a)


def softplus(a) -> Tensor:
    return Softplus.apply(a)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def broadcast_tokens(a, length: int) -> Tensor:
    return BroadcastTokens.apply(a, length=length)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Sum.apply(a)


def mean(a) -> Tensor:
    return Mean.apply(a)


def sum_squares(a, b) -> Tensor:
    return SumSquares.apply(a, b)


def mse(a, b) -> Tensor:
    """Mean of squared differences."""
    a, b = as_tensor(a), as_tensor(b)
    return scale(sum_squares(a, b), 1.0 / a.size)


def linear(x, w, b=None) -> Tensor:
    if b is None:
        return Linear.apply(x, w)
    return Linear.apply(x, w, b)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def conv1d(x, w, b) -> Tensor:
    return CausalConv1d.apply(x, w, b)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    indices: dict[int, np.ndarray] | None = None,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    The error for each entry is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    ``indices`` optionally restricts checking to some flat entries per
    parameter position, which keeps full-network checks affordable.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"grad_check: epsilon {epsilon} outside [1e-6, 1e-3]")
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value() -> float:
        with no_grad():
            v = float(f().data)
        return v

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = range(flat.size) if indices is None or pi not in indices else indices[pi]
        for j in idx:
            orig = flat[j]
            try:
                flat[j] = orig + epsilon
                up = value()
                flat[j] = orig - epsilon
                down = value()
            except FloatingPointError as exc:
                raise FloatingPointError(f"grad_check: parameter {pi} entry {j}: {exc}") from exc
            finally:
                flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing parameter {pi} entry {j}")
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(analytic[pi].reshape(-1)[j] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
