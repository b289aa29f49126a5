"""Dense float tensors with reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active are appended to it in
execution order (a Wengert list); ``Tape.backward`` replays the list once in
reverse to accumulate gradients into trainable parameters. With no active
tape, operations run untracked, which is the inference path.

Storage defaults to float32; reductions accumulate in float64 before casting
back. Tests may build float64 tensors to run the whole graph in double
precision.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward pass requested on an invalid tape/loss combination."""


class Tensor:
    """Immutable-by-convention dense array node.

    ``data`` is a row-major numpy array of float32 (or float64 for
    double-precision test runs). ``grad`` is populated by ``Tape.backward``
    only when ``requires_grad`` is set.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Light operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Model weight: a tensor with a trainable/frozen flag.

    Frozen parameters (``trainable=False``) never receive gradient and are
    never touched by the optimizer; their bytes stay bit-identical across
    any number of backward/optimizer steps.
    """

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=bool(trainable), dtype=dtype)
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def copy(self, trainable=None) -> "Parameter":
        t = self.trainable if trainable is None else trainable
        return Parameter(self.data.copy(), trainable=t)


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations (a Wengert list).

    Construction order is a topological order by definition: an op can only
    consume tensors that already exist, so the list is acyclic and a single
    reverse sweep visits every node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        if popped is not self:
            raise TapeError("tape context exited out of order")
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every reachable trainable leaf."""
        if self._consumed:
            raise TapeError("tape already replayed; record a fresh forward pass")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        out_ids = {id(n.out) for n in self.nodes}
        if len(out_ids) != len(self.nodes):
            raise TapeError("tape is not a valid single-assignment record")
        if id(loss) not in out_ids:
            raise TapeError("loss is not a node on this tape")
        self._consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for t, ig in zip(node.inputs, node.grad_fn(g)):
                if ig is None:
                    continue
                if isinstance(t, Parameter):
                    if t.trainable:
                        t.grad += ig.astype(t.grad.dtype, copy=False)
                    continue
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += ig.astype(t.grad.dtype, copy=False)
                if id(t) in out_ids:
                    key = id(t)
                    if key in pending:
                        pending[key] = pending[key] + ig
                    else:
                        pending[key] = ig


def _current_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _emit(data: np.ndarray, inputs, grad_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    tape = _current_tape()
    if tape is not None:
        tape.nodes.append(_Node(out, tuple(inputs), grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(out, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit(out, (a, b), grad_fn, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _emit(out, (a, b), grad_fn, "div")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def grad_fn(g):
        return (g * a.data.dtype.type(c),)

    return _emit(out, (a,), grad_fn, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + a.data.dtype.type(c)

    def grad_fn(g):
        return (g,)

    return _emit(out, (a,), grad_fn, "add_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _emit(out, (a, b), grad_fn, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return _emit(out, (a,), grad_fn, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inv),)

    return _emit(out, (a,), grad_fn, "transpose")


def slice_last(a: Tensor, lo: int, hi: int) -> Tensor:
    out = np.ascontiguousarray(a.data[..., lo:hi])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        return (full,)

    return _emit(out, (a,), grad_fn, "slice_last")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.data.dtype)

    def grad_fn(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False).copy(),)

    return _emit(out, (a,), grad_fn, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.data.dtype)

    def grad_fn(g):
        gg = np.asarray(g) / n
        if axis is not None and not keepdims:
            axes2 = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(gg, axes2)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False).copy(),)

    return _emit(out, (a,), grad_fn, "mean")


def stop_gradient(a: Tensor) -> Tensor:
    out = a.data.copy()

    def grad_fn(g):
        return (None,)

    return _emit(out, (a,), grad_fn, "stop_gradient")


def select_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise choose: out[i] = a[i] where mask[i] else b[i].

    ``mask`` is a constant boolean vector over the leading axis; gradients
    route to whichever input supplied each row.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.data.shape[0],) or a.data.shape != b.data.shape:
        raise ValueError("select_rows mask/operand shape mismatch")
    m = mask.reshape((-1,) + (1,) * (a.data.ndim - 1))
    out = np.where(m, a.data, b.data)

    def grad_fn(g):
        return np.where(m, g, 0.0), np.where(m, 0.0, g)

    return _emit(out, (a, b), grad_fn, "select_rows")


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """Numerically stable log(1 + e^x): max(x, 0) + log1p(e^{-|x|})."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def grad_fn(g):
        return (g * _sigmoid(x),)

    return _emit(out, (a,), grad_fn, "softplus")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _emit(out, (a,), grad_fn, "gelu")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis; each row sums to 1 and is shift-invariant."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(x.dtype, copy=False)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _emit(y, (a,), grad_fn, "softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x = a.data.astype(np.float64, copy=False)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = (xhat * gain.data + bias.data).astype(a.data.dtype, copy=False)

    def grad_fn(g):
        g64 = g.astype(np.float64, copy=False)
        dxhat = g64 * gain.data
        red = tuple(range(g.ndim - 1))
        dgain = (g64 * xhat).sum(axis=red).astype(gain.data.dtype, copy=False)
        dbias = g64.sum(axis=red).astype(bias.data.dtype, copy=False)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (istd * (dxhat - m1 - xhat * m2)).astype(a.data.dtype, copy=False)
        return dx, dgain, dbias

    return _emit(out, (a, gain, bias), grad_fn, "layer_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N, C) logits against integer labels."""
    labels = np.asarray(labels)
    x = logits.data.astype(np.float64, copy=False)
    n = x.shape[0]
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = x[np.arange(n), labels]
    loss = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        p[np.arange(n), labels] -= 1.0
        return ((float(g) * p / n).astype(logits.data.dtype, copy=False),)

    return _emit(loss, (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with classical momentum and optional decoupled weight decay.

    Frozen parameters are skipped entirely; trainable gradients are reset to
    zero after every step.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = {
            id(p): np.zeros_like(p.data) for p in self.params if p.trainable
        }

    def step(self, lr: float | None = None) -> None:
        eff = self.lr if lr is None else float(lr)
        if eff < 0:
            raise ValueError(f"learning rate must be non-negative, got {eff}")
        for p in self.params:
            if not p.trainable:
                continue
            v = self._velocity[id(p)]
            if self.momentum != 0.0:
                v *= p.data.dtype.type(self.momentum)
                v += p.grad
            else:
                v[...] = p.grad
            if self.weight_decay != 0.0:
                p.data -= p.data.dtype.type(eff * self.weight_decay) * p.data
            p.data -= p.data.dtype.type(eff) * v
            p.grad[...] = 0

    def zero_grad(self) -> None:
        for p in self.params:
            if p.trainable:
                p.grad[...] = 0
