# backend/tensor.py
import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}
GELU_C = float(np.sqrt(2.0 / np.pi))
MASK_VALUE = -1e9

_local = threading.local()


class TensorError(Exception):
    """Base error for tensor numerics"""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    """An operation produced (or was handed) NaN/Inf"""

    def __init__(self, op, detail=""):
        self.op = op
        message = f"{op} produced non-finite values"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class UnregisteredOperationError(TensorError):
    pass


class PrecisionError(TensorError):
    pass


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(mode: str):
    """Switch the default float type ('f32' or 'f64') for tensors created in this thread"""
    if mode not in DTYPES:
        raise PrecisionError(f"unknown precision {mode!r}, expected one of {sorted(DTYPES)}")
    previous = getattr(_local, "dtype", None)
    _local.dtype = DTYPES[mode]
    try:
        yield
    finally:
        if previous is None:
            del _local.dtype
        else:
            _local.dtype = previous


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, value in DTYPES.items():
        if dtype == np.dtype(value):
            return name
    raise PrecisionError(f"unsupported dtype {dtype}")


class Tensor:
    """Immutable float array; `requires_grad` marks a trainable leaf or a taped result"""

    __slots__ = ("data", "requires_grad", "name")
    # ndarray (op) Tensor defers to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        arr = np.asarray(data, dtype=dtype).view()
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of taped operations for one reverse sweep (one per thread)"""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._produced = set()

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(_Node(op, inputs, output, backward))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> List[Optional[np.ndarray]]:
        """Reverse sweep from a scalar target; non-trainable sources get None"""
        if target.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(gi, t.shape)
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        result = []
        for s in sources:
            if not s.requires_grad:
                result.append(None)
            else:
                g = grads.get(id(s))
                result.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False))
        return result


def current_tape() -> Optional[GradTape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    result = Tensor(out, dtype=out.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, inputs, result, backward)
    return result


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    x, y = a.data, b.data
    return _emit("mul", (a, b), x * y, lambda g: (g * y, g * x))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    x, y = a.data, b.data
    return _emit("div", (a, b), x / y, lambda g: (g / y, -g * x / (y * y)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU"""
    x = a.data
    u = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1 + t)

    def backward(g):
        du = GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)

    return _emit("gelu", (a,), out, backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace positions where mask is true by a constant; no gradient flows there"""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _emit("masked_fill", (a,), out, lambda g: (np.where(mask, 0, g),))


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice) indexing"""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _emit("index", (a,), np.array(a.data[key]), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra / nn kernels
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g)

    return _emit("matmul", (a, b), x @ y, backward)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction"""
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax", "non-finite input")
    s = _softmax_np(a.data)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), s, backward)


def log_softmax(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("log_softmax", "non-finite input")
    out = _log_softmax_np(a.data)

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, backward)


def softmax_values(x: np.ndarray) -> np.ndarray:
    """Untaped softmax on a raw array (teacher-side probabilities)"""
    return _softmax_np(np.asarray(x))


def log_softmax_values(x: np.ndarray) -> np.ndarray:
    return _log_softmax_np(np.asarray(x))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last dim {n}")
    xv, gv = x.data, gamma.data
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gv + beta.data

    def backward(g):
        dxhat = g * gv
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead))

    return _emit("layer_norm", (x, gamma, beta), out, backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather weight[ids]"""
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = weight.shape, weight.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _emit("embedding", (weight,), weight.data[ids], backward)


def take_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = a[..., ids[...]]"""
    ids = np.asarray(ids, dtype=np.int64)[..., None]
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, ids, g[..., None], axis=-1)
        return (full,)

    return _emit("take_last", (a,), np.take_along_axis(a.data, ids, axis=-1)[..., 0], backward)


# ---------------------------------------------------------------------------
# differentiation entry points
# ---------------------------------------------------------------------------

def value_and_grad(f: Callable[[List[Tensor]], Tensor], params: Sequence[Any]) -> Tuple[float, List[Tensor]]:
    """Evaluate scalar f(params) under a tape and return (value, gradient per param)"""
    leaves = [Tensor(p, requires_grad=True) for p in params]
    with GradTape() as tape:
        out = f(leaves)
    if not isinstance(out, Tensor):
        raise UnregisteredOperationError(f"composition returned {type(out).__name__}, not a Tensor")
    if out.size != 1:
        raise ShapeError(f"value_and_grad needs a scalar result, got shape {out.shape}")
    if not out.requires_grad or not (tape.produced(out) or any(out is leaf for leaf in leaves)):
        raise UnregisteredOperationError(
            "result is not connected to the parameters through registered operations")
    grads = tape.gradient(out, leaves)
    return out.item(), [Tensor(g) for g in grads]


def grad_check(f: Callable[[List[Tensor]], Tensor], params: Sequence[Any], h: float = 1e-5,
               samples: int = 24, seed: int = 0, atol: float = 0.0) -> float:
    """Max relative error between taped gradients and central differences (64-bit only)

    A coordinate whose absolute difference is within atol counts as exact, so
    gradients that vanish up to roundoff do not blow up the relative error.
    """
    arrays = [np.array(p.data if isinstance(p, Tensor) else p) for p in params]
    for arr in arrays:
        if arr.dtype != np.float64:
            raise PrecisionError(f"grad_check requires 64-bit parameters, got {arr.dtype}")
    _, grads = value_and_grad(f, arrays)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        if flat.size <= samples:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples, replace=False)
        analytic = grads[k].data.reshape(-1)
        for c in coords:
            saved = flat[c]
            flat[c] = saved + h
            up = f([Tensor(a) for a in arrays]).item()
            flat[c] = saved - h
            down = f([Tensor(a) for a in arrays]).item()
            flat[c] = saved
            cd = (up - down) / (2 * h)
            diff = abs(analytic[c] - cd)
            err = 0.0 if diff <= atol else diff / (abs(analytic[c]) + abs(cd) + 1e-12)
            worst = max(worst, float(err))
    logger.debug(f"grad_check over {len(arrays)} tensors: max relative error {worst:.3e}")
    return worst
