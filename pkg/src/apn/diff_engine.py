"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active are appended to that
tape together with a vector-Jacobian rule.  :func:`backward` walks the tape in
reverse and returns one gradient array per trainable parameter of a
:class:`ParamStore`.  Outside a tape the same functions just compute values,
which is how evaluation runs.

Example::

    store = ParamStore()
    p = store.add("p", np.array([1.0, 2.0]))
    with GradTape() as tape:
        loss = sum_(p * p)
    grads = backward(loss, tape, store)   # {"p": array([2., 4.])}
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterator, Sequence
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, NumericError, ShapeError

LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "apn-checkpoint/1"

_tape_stack: list["GradTape"] = []


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Append-only record of primitive operations.

    Each node is ``(output, inputs, vjp)`` where ``vjp`` maps the gradient of
    the output to a tuple of gradients for the inputs.  Nodes are appended in
    execution order, which is a topological order of the graph.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite output")
    return out


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    _finite(out, op)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.name = None
    result.requires_grad = needs and bool(_tape_stack)
    if result.requires_grad:
        _tape_stack[-1].nodes.append((result, tuple(inputs), vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), vjp)


# --- elementwise unary ------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _record("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _record("softplus", out, (a,), lambda g: (g * _stable_sigmoid(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _record("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


# --- reductions and normalizations -------------------------------------------


def sum_(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return sum_(a, axis=axis, keepdims=keepdims) / float(count)


def masked_sum(a, mask, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    """Sum of ``a * mask``; the mask is a constant {0, 1} array."""
    a = as_tensor(a)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    try:
        np.broadcast_shapes(a.shape, m.shape)
    except ValueError:
        raise ShapeError("masked_sum", a.shape, m.shape) from None
    return sum_(mul(a, Tensor(m)), axis=axis, keepdims=keepdims)


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _record("softmax", out, (a,), vjp)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit (biased) variance.

    The affine scale and shift are applied by the caller with ``mul``/``add``.
    """
    a = as_tensor(a)
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    inv_std = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std

    def vjp(g):
        g_mean = np.mean(g, axis=-1, keepdims=True)
        gx_mean = np.mean(g * xhat, axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _record("layer_norm", xhat, (a,), vjp)


# --- shape manipulation -----------------------------------------------------


def concat_last(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    lead = ts[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in ts):
        raise ShapeError("concat_last_dim", *(t.shape for t in ts))
    out = np.concatenate([t.data for t in ts], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in ts])[:-1]
    return _record("concat_last_dim", out, ts, lambda g: tuple(np.split(g, splits, axis=-1)))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from None
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _record("swap_last", np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),))


# --- parameters ---------------------------------------------------------------


class ParamStore:
    """Named parameter tensors; iteration is sorted by name."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self:
            yield name, self._params[name]

    def trainable(self) -> list[str]:
        return [n for n, t in self.items() if t.requires_grad]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].requires_grad = flag

    def n_trainable(self) -> int:
        return sum(self._params[n].size for n in self.trainable())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.copy(), trainable=t.requires_grad)
        return out

    def assign(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.shape:
            raise ShapeError("assign", t.shape, value.shape)
        t.data = _finite(value.copy(), f"assign {name}")

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "params": {
                name: {
                    "shape": list(t.shape),
                    "trainable": t.requires_grad,
                    "data": t.data.reshape(-1).tolist(),
                }
                for name, t in self.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamStore":
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"not a {CHECKPOINT_FORMAT} checkpoint")
        store = cls()
        try:
            for name, entry in payload["params"].items():
                shape = tuple(int(s) for s in entry["shape"])
                data = np.asarray(entry["data"], dtype=np.float64)
                if data.size != math.prod(shape):
                    raise FormatError(f"{name}: {data.size} values for shape {shape}")
                store.add(name, data.reshape(shape), trainable=bool(entry["trainable"]))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"malformed checkpoint: {exc}") from None
        except NumericError as exc:
            raise FormatError(f"malformed checkpoint: {exc}") from None
        return store


def save_checkpoint(store: ParamStore, path: str | Path, extra: dict | None = None) -> None:
    payload = store.to_dict()
    if extra:
        payload["meta"] = extra
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> ParamStore:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return ParamStore.from_dict(payload)


# --- gradients ----------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape, params: ParamStore) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape``; returns a gradient for each trainable parameter.

    Parameters that do not influence ``loss`` get zeros.  The tape is cleared.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
    tape.clear()
    result = {}
    for name, t in params.items():
        if t.requires_grad:
            g = grads.get(id(t))
            result[name] = np.zeros(t.shape) if g is None else g.reshape(t.shape)
    return result


def finite_difference(
    f: Callable[[ParamStore], float], params: ParamStore, h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` for every trainable coordinate."""
    result = {}
    for name in params.trainable():
        t = params[name]
        base = t.data.copy()
        grad = np.zeros_like(base)
        flat = grad.reshape(-1)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] = base.reshape(-1)[i] + h
            t.data = bumped.reshape(base.shape)
            f_plus = float(f(params))
            bumped[i] = base.reshape(-1)[i] - h
            t.data = bumped.reshape(base.shape)
            f_minus = float(f(params))
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                t.data = base
                raise NumericError(f"finite_difference: non-finite objective at {name}[{i}]")
            flat[i] = (f_plus - f_minus) / (2.0 * h)
        t.data = base
        result[name] = grad
    return result


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise ``|a - b| / max(1, |a|, |b|)``."""
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
