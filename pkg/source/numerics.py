"""
Reverse-mode differentiable numeric core for the GEGA model.

DiffTensor wraps a float64 numpy array. Each primitive application that
touches a gradient-carrying input leaves a TapeEntry on its output; backward()
gathers the entries reachable from a scalar loss into a Tape and replays them
in reverse recording order.

Usage:
    x = DiffTensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    x.grad                      # -> array([2., 4.])

    report = finite_difference_check(lambda t: tanh(t).sum(), x)
    report.passed
"""
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


ArrayLike = Union["DiffTensor", np.ndarray, float, int, Sequence]

# Recording order doubles as a topological order of the tape.
_SEQUENCE = itertools.count()


class ShapeError(ValueError):
    """A primitive received inputs that violate its shape contract."""

    def __init__(self, op: str, expected: Any, actual: Any):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected {expected}, got {actual}")


class GradCheckError(ValueError):
    """The checked function was not finite at a perturbed point."""

    def __init__(self, coordinate: int, message: str):
        self.coordinate = coordinate
        super().__init__(f"coordinate {coordinate}: {message}")


@dataclass
class TapeEntry:
    """One recorded primitive application."""
    seq: int
    op: str
    inputs: Tuple["DiffTensor", ...]
    output_id: int
    saved: Any
    attrs: Dict[str, Any]


@dataclass
class Tape:
    """Entries reachable from a loss, ordered by recording sequence."""
    entries: List[TapeEntry] = field(default_factory=list)

    @classmethod
    def collect(cls, loss: "DiffTensor") -> "Tape":
        found: Dict[int, TapeEntry] = {}
        stack = [loss]
        while stack:
            tensor = stack.pop()
            entry = tensor._entry
            if entry is None or entry.seq in found:
                continue
            found[entry.seq] = entry
            stack.extend(entry.inputs)
        return cls(entries=[found[seq] for seq in sorted(found)])

    def __len__(self) -> int:
        return len(self.entries)


class DiffTensor:
    """Shaped float64 array that participates in reverse-mode differentiation.

    Leaf tensors created with requires_grad=True own a gradient buffer that
    backward() accumulates into. Tensors produced by primitives carry a tape
    entry instead and never store gradients.
    """
    __slots__ = ("values", "grad", "requires_grad", "name", "_entry")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(values, DiffTensor):
            values = values.values
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._entry: Optional[TapeEntry] = None

    @classmethod
    def _from_op(cls, values: np.ndarray, requires_grad: bool) -> "DiffTensor":
        tensor = cls.__new__(cls)
        tensor.values = np.asarray(values, dtype=np.float64)
        tensor.requires_grad = requires_grad
        tensor.name = None
        tensor.grad = None
        tensor._entry = None
        return tensor

    def __getstate__(self):
        # Tape entries stay with the process that recorded them.
        return (self.values, self.grad, self.requires_grad, self.name)

    def __setstate__(self, state):
        self.values, self.grad, self.requires_grad, self.name = state
        self._entry = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    @property
    def T(self) -> "DiffTensor":
        return transpose(self)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError("item", "a single element", self.shape)
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values)

    # Operators
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], scalar=float(other))
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], scalar=1.0 / float(other))
        return apply_primitive("div", [self, other])

    def __rtruediv__(self, other):
        return apply_primitive("div", [other, self])

    def __neg__(self):
        return apply_primitive("neg", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def sum(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "DiffTensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes) -> "DiffTensor":
        return transpose(self, tuple(axes) if axes else None)


def as_tensor(value: ArrayLike) -> DiffTensor:
    """Wrap a constant as a DiffTensor; tensors pass through unchanged."""
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor(value)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    """Forward/backward rule pair.

    forward(*values, **attrs) -> (output, saved)
    backward(grad_output, saved, *values, **attrs) -> one gradient (or None) per input
    check(*values, **attrs) raises ShapeError on contract violations
    """
    name: str
    forward: Callable[..., Tuple[np.ndarray, Any]]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]
    check: Optional[Callable[..., None]] = None


PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(name: str, forward, backward, check=None) -> Primitive:
    primitive = Primitive(name=name, forward=forward, backward=backward, check=check)
    PRIMITIVES[name] = primitive
    return primitive


def apply_primitive(op: str, inputs: Sequence[ArrayLike], **attrs) -> DiffTensor:
    """Apply a registered primitive and record it on the output's tape entry."""
    if op not in PRIMITIVES:
        raise ValueError(f"Unknown primitive: {op!r}")
    primitive = PRIMITIVES[op]
    tensors = tuple(as_tensor(t) for t in inputs)
    values = [t.values for t in tensors]
    if primitive.check is not None:
        primitive.check(*values, **attrs)
    output, saved = primitive.forward(*values, **attrs)
    requires_grad = any(t.requires_grad for t in tensors)
    result = DiffTensor._from_op(output, requires_grad)
    if requires_grad:
        result._entry = TapeEntry(
            seq=next(_SEQUENCE),
            op=op,
            inputs=tensors,
            output_id=id(result),
            saved=saved,
            attrs=attrs,
        )
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axis(op: str, ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, f"axis in [{-ndim}, {ndim})", axis)
    return axis % ndim


def _check_broadcast(op: str):
    def check(*values, **attrs):
        shapes = [np.shape(v) for v in values]
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            raise ShapeError(op, "broadcast-compatible shapes", tuple(shapes)) from None
    return check


def _check_reduction_axis(op: str):
    def check(x, axis=-1, **attrs):
        if x.ndim == 0:
            raise ShapeError(op, "at least one axis", x.shape)
        axis = _normalize_axis(op, x.ndim, axis)
        if x.shape[axis] == 0:
            raise ShapeError(op, "a non-empty axis", x.shape)
    return check


# Elementwise binary ops

register_primitive(
    "add",
    lambda a, b: (a + b, None),
    lambda g, saved, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    _check_broadcast("add"),
)
register_primitive(
    "sub",
    lambda a, b: (a - b, None),
    lambda g, saved, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    _check_broadcast("sub"),
)
register_primitive(
    "mul",
    lambda a, b: (a * b, None),
    lambda g, saved, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    _check_broadcast("mul"),
)
register_primitive(
    "div",
    lambda a, b: (a / b, None),
    lambda g, saved, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
    _check_broadcast("div"),
)
register_primitive(
    "neg",
    lambda a: (-a, None),
    lambda g, saved, a: (-g,),
)
register_primitive(
    "scalar_mul",
    lambda a, scalar: (a * scalar, None),
    lambda g, saved, a, scalar: (g * scalar,),
)


# Linear algebra and shape ops

def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "(..., n, k) @ (..., k, m)", (a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", "broadcast-compatible batch dims", (a.shape, b.shape)) from None


def _matmul_backward(g, saved, a, b):
    grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
    grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


register_primitive("matmul", lambda a, b: (np.matmul(a, b), None), _matmul_backward, _check_matmul)


def _transpose_forward(a, axes=None):
    return np.transpose(a, axes), None


def _transpose_backward(g, saved, a, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _check_transpose(a, axes=None):
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"a permutation of {a.ndim} axes", axes)


register_primitive("transpose", _transpose_forward, _transpose_backward, _check_transpose)


def _check_reshape(a, shape):
    known = [d for d in shape if d != -1]
    total = int(np.prod(known)) if known else 1
    if shape.count(-1) > 1 or (-1 not in shape and total != a.size) or (
            -1 in shape and (total == 0 or a.size % total != 0)):
        raise ShapeError("reshape", f"{a.size} elements", shape)


register_primitive(
    "reshape",
    lambda a, shape: (a.reshape(shape), None),
    lambda g, saved, a, shape: (g.reshape(a.shape),),
    _check_reshape,
)


def _check_concat(*values, axis=0):
    if not values:
        raise ShapeError("concat", "at least one input", 0)
    ndim = values[0].ndim
    axis = _normalize_axis("concat", ndim, axis)
    for v in values:
        if v.ndim != ndim or any(v.shape[i] != values[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", f"shapes matching off axis {axis}", tuple(x.shape for x in values))


def _concat_backward(g, saved, *values, axis=0):
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


register_primitive(
    "concat",
    lambda *values, axis=0: (np.concatenate(values, axis=axis), None),
    _concat_backward,
    _check_concat,
)


def _check_stack(*values, axis=0):
    if not values:
        raise ShapeError("stack", "at least one input", 0)
    if any(v.shape != values[0].shape for v in values):
        raise ShapeError("stack", "equal shapes", tuple(v.shape for v in values))


register_primitive(
    "stack",
    lambda *values, axis=0: (np.stack(values, axis=axis), None),
    lambda g, saved, *values, axis=0: tuple(np.take(g, i, axis=axis) for i in range(len(values))),
    _check_stack,
)


def _check_take(a, indices, axis=0):
    if a.ndim == 0:
        raise ShapeError("take", "at least one axis", a.shape)
    axis = _normalize_axis("take", a.ndim, axis)
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ShapeError("take", "1-D indices", indices.shape)
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise ShapeError("take", f"indices within [0, {a.shape[axis]})", indices.tolist())


def _take_backward(g, saved, a, indices, axis=0):
    grad = np.zeros_like(a)
    np.add.at(np.moveaxis(grad, axis, 0), np.asarray(indices), np.moveaxis(g, axis, 0))
    return (grad,)


register_primitive(
    "take",
    lambda a, indices, axis=0: (np.take(a, np.asarray(indices), axis=axis), None),
    _take_backward,
    _check_take,
)


def _check_pad(a, pad_width):
    if len(pad_width) != a.ndim or any(lo < 0 or hi < 0 for lo, hi in pad_width):
        raise ShapeError("pad", f"{a.ndim} non-negative (before, after) pairs", pad_width)


register_primitive(
    "pad",
    lambda a, pad_width: (np.pad(a, pad_width), None),
    lambda g, saved, a, pad_width: (g[tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))],),
    _check_pad,
)


def _check_masked_fill(a, mask, value=0.0):
    try:
        shape = np.broadcast_shapes(a.shape, np.shape(mask))
    except ValueError:
        shape = None
    if shape != a.shape:
        raise ShapeError("masked_fill", f"mask broadcastable to {a.shape}", np.shape(mask))


register_primitive(
    "masked_fill",
    lambda a, mask, value=0.0: (np.where(mask, value, a), None),
    lambda g, saved, a, mask, value=0.0: (np.where(mask, 0.0, g),),
    _check_masked_fill,
)


# Reductions

def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


register_primitive(
    "sum",
    lambda a, axis=None, keepdims=False: (np.sum(a, axis=axis, keepdims=keepdims), None),
    lambda g, saved, a, axis=None, keepdims=False: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),),
)
register_primitive(
    "mean",
    lambda a, axis=None, keepdims=False: (np.mean(a, axis=axis, keepdims=keepdims), None),
    lambda g, saved, a, axis=None, keepdims=False: (
        np.array(_expand_reduced(g, a.shape, axis, keepdims)) / _reduced_count(a.shape, axis),),
)


def _stable_max(a, axis):
    peak = np.max(a, axis=axis, keepdims=True)
    return np.where(np.isfinite(peak), peak, 0.0)


def _logsumexp_forward(a, axis=-1, keepdims=False):
    peak = _stable_max(a, axis)
    lse = peak + np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return out, lse


def _logsumexp_backward(g, lse, a, axis=-1, keepdims=False):
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (g * np.exp(a - lse),)


register_primitive("logsumexp", _logsumexp_forward, _logsumexp_backward, _check_reduction_axis("logsumexp"))


def _softmax_forward(a, axis=-1):
    shifted = np.exp(a - _stable_max(a, axis))
    out = shifted / np.sum(shifted, axis=axis, keepdims=True)
    return out, out


def _softmax_backward(g, out, a, axis=-1):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


register_primitive("softmax", _softmax_forward, _softmax_backward, _check_reduction_axis("softmax"))


def _log_softmax_forward(a, axis=-1):
    peak = _stable_max(a, axis)
    lse = peak + np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True))
    out = a - lse
    return out, out


def _log_softmax_backward(g, out, a, axis=-1):
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


register_primitive("log_softmax", _log_softmax_forward, _log_softmax_backward,
                   _check_reduction_axis("log_softmax"))


def _layer_norm_forward(a, eps=1e-12):
    centered = a - np.mean(a, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    out = centered * inv_std
    return out, (out, inv_std)


def _layer_norm_backward(g, saved, a, eps=1e-12):
    out, inv_std = saved
    n = a.shape[-1]
    grad = inv_std / n * (
        n * g - np.sum(g, axis=-1, keepdims=True) - out * np.sum(g * out, axis=-1, keepdims=True)
    )
    return (grad,)


register_primitive("layer_norm", _layer_norm_forward, _layer_norm_backward,
                   _check_reduction_axis("layer_norm"))


# Elementwise nonlinearities

def _exp_forward(a):
    out = np.exp(a)
    return out, out


register_primitive("exp", _exp_forward, lambda g, out, a: (g * out,))
register_primitive("log", lambda a: (np.log(a), None), lambda g, saved, a: (g / a,))


def _tanh_forward(a):
    out = np.tanh(a)
    return out, out


register_primitive("tanh", _tanh_forward, lambda g, out, a: (g * (1.0 - out * out),))


def _sigmoid_forward(a):
    out = np.exp(-np.logaddexp(0.0, -a))
    return out, out


register_primitive("sigmoid", _sigmoid_forward, lambda g, out, a: (g * out * (1.0 - out),))
register_primitive("relu", lambda a: (np.maximum(a, 0.0), None), lambda g, saved, a: (g * (a > 0),))


# ---------------------------------------------------------------------------
# Functional helpers
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    return apply_primitive("matmul", [a, b])


def transpose(a: ArrayLike, axes: Optional[Tuple[int, ...]] = None) -> DiffTensor:
    return apply_primitive("transpose", [a], axes=axes)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> DiffTensor:
    return apply_primitive("reshape", [a], shape=tuple(shape))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> DiffTensor:
    return apply_primitive("concat", list(tensors), axis=axis)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> DiffTensor:
    return apply_primitive("stack", list(tensors), axis=axis)


def take(a: ArrayLike, indices: Sequence[int], axis: int = 0) -> DiffTensor:
    return apply_primitive("take", [a], indices=np.asarray(indices, dtype=np.int64), axis=axis)


def pad(a: ArrayLike, pad_width: Sequence[Tuple[int, int]]) -> DiffTensor:
    return apply_primitive("pad", [a], pad_width=tuple((int(lo), int(hi)) for lo, hi in pad_width))


def masked_fill(a: ArrayLike, mask: np.ndarray, value: float = 0.0) -> DiffTensor:
    return apply_primitive("masked_fill", [a], mask=np.asarray(mask, dtype=bool), value=value)


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffTensor:
    return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def tensor_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffTensor:
    return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)


def softmax(a: ArrayLike, axis: int = -1) -> DiffTensor:
    return apply_primitive("softmax", [a], axis=axis)


def log_softmax(a: ArrayLike, axis: int = -1) -> DiffTensor:
    return apply_primitive("log_softmax", [a], axis=axis)


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> DiffTensor:
    return apply_primitive("logsumexp", [a], axis=axis, keepdims=keepdims)


def layer_norm(a: ArrayLike, eps: float = 1e-12) -> DiffTensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    return apply_primitive("layer_norm", [a], eps=eps)


def exp(a: ArrayLike) -> DiffTensor:
    return apply_primitive("exp", [a])


def log(a: ArrayLike) -> DiffTensor:
    return apply_primitive("log", [a])


def tanh(a: ArrayLike) -> DiffTensor:
    return apply_primitive("tanh", [a])


def sigmoid(a: ArrayLike) -> DiffTensor:
    return apply_primitive("sigmoid", [a])


def relu(a: ArrayLike) -> DiffTensor:
    return apply_primitive("relu", [a])


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def backward(loss: DiffTensor) -> None:
    """Accumulate dLoss/dTensor into every gradient-carrying leaf reachable from loss.

    Repeated calls accumulate; call zero_grad() on the leaves between runs.
    """
    if loss.values.size != 1:
        raise ShapeError("backward", "a scalar loss", loss.shape)
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.values)
        return

    tape = Tape.collect(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for entry in reversed(tape.entries):
        grad_out = pending.pop(entry.output_id, None)
        if grad_out is None:
            continue
        primitive = PRIMITIVES[entry.op]
        input_grads = primitive.backward(grad_out, entry.saved, *[t.values for t in entry.inputs], **entry.attrs)
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.values)
                tensor.grad += grad
            else:
                key = id(tensor)
                pending[key] = pending[key] + grad if key in pending else grad


@dataclass
class GradCheckReport:
    """
    Per-coordinate comparison of analytic and central-difference gradients.

    relative_errors are |analytic - numeric| / max(|analytic|, |numeric|), and 0
    where both are exactly 0. A coordinate also passes when its absolute error
    is at most atol; with atol=0 the check is purely relative.
    """
    coordinates: List[int]
    analytic: np.ndarray
    numeric: np.ndarray
    relative_errors: np.ndarray
    tol: float
    atol: float = 0.0

    @property
    def absolute_errors(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)

    @property
    def max_relative_error(self) -> float:
        return float(self.relative_errors.max()) if self.relative_errors.size else 0.0

    @property
    def worst_coordinate(self) -> Optional[int]:
        if not self.relative_errors.size:
            return None
        return self.coordinates[int(np.argmax(self.relative_errors))]

    @property
    def passed(self) -> bool:
        ok = (self.relative_errors < self.tol) | (self.absolute_errors <= self.atol)
        return bool(ok.all())

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_relative_error:.3e} "
                f"(tol {self.tol:.0e}, atol {self.atol:.0e}, {len(self.coordinates)} coordinates)")


def _scalar_value(f: Callable[[DiffTensor], DiffTensor], x: DiffTensor) -> float:
    out = f(x)
    if out.values.size != 1:
        raise ShapeError("finite_difference_check", "a scalar-valued function", out.shape)
    return float(out.values.reshape(-1)[0])


def finite_difference_check(
    f: Callable[[DiffTensor], DiffTensor],
    x: DiffTensor,
    h: float = 1e-6,
    tol: float = 1e-4,
    coordinates: Optional[Sequence[int]] = None,
    atol: float = 1e-7,
) -> GradCheckReport:
    """
    Compare backward() against central differences (f(x+h) - f(x-h)) / 2h.

    Args:
        f: scalar-valued function of x built from recorded primitives
        x: point to check; its values are perturbed in place and restored
        h: finite-difference step
        tol: pass threshold on the maximum relative error
        coordinates: flat indices to check (default: all)
        atol: absolute tolerance, accepted in addition to tol; it covers
            coordinates whose true gradient is 0, where central differences
            leave only rounding noise. Pass 0 for a purely relative check

    Returns:
        GradCheckReport
    """
    if h <= 0:
        raise ValueError(f"Finite-difference step must be positive, got {h}")
    if atol < 0:
        raise ValueError(f"Absolute tolerance must be non-negative, got {atol}")
    if not x.is_leaf:
        raise ValueError("finite_difference_check needs a leaf tensor")

    x.requires_grad = True
    x.grad = np.zeros_like(x.values)
    loss = f(x)
    backward(loss)
    analytic_full = x.grad.reshape(-1).copy()

    flat = x.values.reshape(-1)
    coords = list(range(flat.size)) if coordinates is None else [int(c) for c in coordinates]
    numeric = np.zeros(len(coords))
    for k, i in enumerate(coords):
        original = flat[i]
        try:
            flat[i] = original + h
            plus = _scalar_value(f, x)
            flat[i] = original - h
            minus = _scalar_value(f, x)
        finally:
            flat[i] = original
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise GradCheckError(i, f"function is not finite at x +/- h ({plus}, {minus})")
        numeric[k] = (plus - minus) / (2.0 * h)

    analytic = analytic_full[coords]
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    errors = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return GradCheckReport(coordinates=coords, analytic=analytic, numeric=numeric,
                           relative_errors=errors, tol=tol, atol=atol)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParameterSet:
    """Ordered collection of named trainable tensors drawn from one RNG."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._tensors: Dict[str, DiffTensor] = {}

    def create(self, name: str, shape: Tuple[int, ...], fan_in: Optional[int] = None,
               init: str = "uniform") -> DiffTensor:
        if name in self._tensors:
            raise ValueError(f"Duplicate parameter name: {name!r}")
        if init == "uniform":
            values = init_uniform(self.rng, shape, fan_in if fan_in is not None else shape[0])
        elif init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        else:
            raise ValueError(f"Unknown initializer: {init!r}")
        tensor = DiffTensor(values, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> DiffTensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: t.grad.copy() for name, t in self._tensors.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(state)
        unexpected = set(state) - set(self._tensors)
        if missing or unexpected:
            raise KeyError(f"Parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, tensor in self._tensors.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != tensor.shape:
                raise ShapeError(f"load {name}", tensor.shape, values.shape)
            tensor.values = values.copy()
            tensor.zero_grad()
