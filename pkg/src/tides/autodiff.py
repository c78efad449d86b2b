"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable computation in the package runs through the primitives
registered here. Complex values live in a trailing axis of size 2 holding
(re, im); the ``complex_*`` primitives and ``linear_scan`` understand that
layout, everything else treats it as an ordinary real axis.

Usage::

    with Tape() as tape:
        w = tape.leaf(np.zeros(3))
        loss = (w * x).sum()
    grads = backward(loss, tape)     # {node_id: ndarray}
"""

from __future__ import annotations

import math
import threading
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "GradientError",
    "primitive_forward",
    "backward",
    "adam_step",
    "finite_difference_check",
    "rng_stream",
    "PRIMITIVES",
]


class GradientError(RuntimeError):
    """Raised for malformed backward requests or failed gradient checks."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally linked to a node of the active tape."""

    __slots__ = ("data", "node_id", "tape")
    __array_priority__ = 100

    def __init__(self, data, node_id: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    def __add__(self, other):
        return primitive_forward("add", [self, other])

    __radd__ = __add__

    def __sub__(self, other):
        return primitive_forward("add", [self, primitive_forward("negate", [other])])

    def __rsub__(self, other):
        return primitive_forward("add", [other, primitive_forward("negate", [self])])

    def __mul__(self, other):
        return primitive_forward("mul", [self, other])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return primitive_forward("mul", [self, primitive_forward("reciprocal", [other])])

    def __rtruediv__(self, other):
        return primitive_forward("mul", [other, primitive_forward("reciprocal", [self])])

    def __neg__(self):
        return primitive_forward("negate", [self])

    def __matmul__(self, other):
        return primitive_forward("matmul", [self, other])

    def __rmatmul__(self, other):
        return primitive_forward("matmul", [other, self])

    def __getitem__(self, index):
        return primitive_forward("slice", [self], index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return primitive_forward("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return primitive_forward("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return primitive_forward("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return primitive_forward("transpose", [self], axes=tuple(axes) if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# primitive registry

@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str):
    def wrap(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.backward)
        return cls

    return wrap


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} are not conformable") from None


def _as_complex(x: np.ndarray) -> np.ndarray:
    if x.shape[-1:] != (2,):
        raise ValueError(f"complex operand needs a trailing (re, im) axis, got shape {x.shape}")
    return np.ascontiguousarray(x).view(np.complex128)[..., 0]


def _as_pair(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


@_register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast("mul", a, b)
        return a * b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
        return np.matmul(a, b), None

    @staticmethod
    def backward(g, saved, a, b):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and g.shape[:-1] == a.shape[:-1]:
            # shared weight: fold the leading axes into one contraction
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@_register("negate")
class _Negate:
    @staticmethod
    def forward(a):
        return -a, None

    @staticmethod
    def backward(g, saved, a):
        return (-g,)


@_register("reciprocal")
class _Reciprocal:
    @staticmethod
    def forward(a):
        out = 1.0 / a
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (-g * out * out,)


@_register("exp")
class _Exp:
    @staticmethod
    def forward(a):
        out = np.exp(a)
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (g * out,)


@_register("log")
class _Log:
    @staticmethod
    def forward(a):
        return np.log(a), None

    @staticmethod
    def backward(g, saved, a):
        return (g / a,)


@_register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(a):
        out = np.sqrt(a)
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (g * 0.5 / out,)


@_register("square")
class _Square:
    @staticmethod
    def forward(a):
        return a * a, None

    @staticmethod
    def backward(g, saved, a):
        return (2.0 * a * g,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows and keeps full relative precision in both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@_register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(a):
        out = _sigmoid(a)
        return out, out

    @staticmethod
    def backward(g, s, a):
        return (g * s * (1.0 - s),)


@_register("softplus")
class _Softplus:
    @staticmethod
    def forward(a):
        return _softplus(a), None

    @staticmethod
    def backward(g, saved, a):
        return (g * _sigmoid(a),)


@_register("tanh")
class _Tanh:
    @staticmethod
    def forward(a):
        out = np.tanh(a)
        return out, out

    @staticmethod
    def backward(g, t, a):
        return (g * (1.0 - t * t),)


_GELU_C = math.sqrt(2.0 / math.pi)


@_register("gelu")
class _Gelu:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""

    @staticmethod
    def forward(a):
        t = np.tanh(_GELU_C * (a + 0.044715 * (a * a * a)))
        return 0.5 * a * (1.0 + t), t

    @staticmethod
    def backward(g, t, a):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        d = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner
        return (g * d,)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims), None

    @staticmethod
    def backward(g, saved, a, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


@_register("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.mean(a, axis=axis, keepdims=keepdims), None

    @staticmethod
    def backward(g, saved, a, axis=None, keepdims=False):
        axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape):
        return a.reshape(shape), None

    @staticmethod
    def backward(g, saved, a, shape):
        return (g.reshape(a.shape),)


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(a, axes=None):
        return np.transpose(a, axes), None

    @staticmethod
    def backward(g, saved, a, axes=None):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)


@_register("slice")
class _Slice:
    @staticmethod
    def forward(a, index):
        return a[index], None

    @staticmethod
    def backward(g, saved, a, index):
        out = np.zeros_like(a)
        np.add.at(out, index, g)
        return (out,)


@_register("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=0):
        return np.concatenate(arrays, axis=axis), None

    @staticmethod
    def backward(g, saved, *arrays, axis=0):
        splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return tuple(np.split(g, splits, axis=axis))


@_register("bilinear")
class _Bilinear:
    """out[..., o] = sum_{h, r} u[..., h] z[..., r] w[h, r, o]."""

    @staticmethod
    def forward(u, z, w):
        if w.ndim != 3 or u.shape[-1] != w.shape[0] or z.shape[-1] != w.shape[1] or u.shape[:-1] != z.shape[:-1]:
            raise ValueError(f"bilinear: shapes {u.shape}, {z.shape}, {w.shape} are not conformable")
        H, r, O = w.shape
        lead = u.shape[:-1]
        uw = (u.reshape(-1, H) @ w.reshape(H, r * O)).reshape(-1, r, O)
        out = np.einsum("nro,nr->no", uw, z.reshape(-1, r))
        return out.reshape(*lead, O), uw

    @staticmethod
    def backward(g, uw, u, z, w):
        H, r, O = w.shape
        g2 = g.reshape(-1, O)
        z2 = z.reshape(-1, r)
        zg = (z2[:, :, None] * g2[:, None, :]).reshape(-1, r * O)
        gu = (zg @ w.reshape(H, r * O).T).reshape(u.shape)
        gz = np.einsum("nro,no->nr", uw, g2).reshape(z.shape)
        gw = (u.reshape(-1, H).T @ zg).reshape(w.shape)
        return gu, gz, gw


@_register("maximum")
class _Maximum:
    @staticmethod
    def forward(a, b):
        _check_broadcast("maximum", a, b)
        return np.maximum(a, b), None

    @staticmethod
    def backward(g, saved, a, b):
        take_a = a >= b
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)


@_register("clamp")
class _Clamp:
    @staticmethod
    def forward(a, lo=None, hi=None):
        return np.clip(a, lo, hi), None

    @staticmethod
    def backward(g, saved, a, lo=None, hi=None):
        keep = np.ones(a.shape, dtype=bool)
        if lo is not None:
            keep &= a >= lo
        if hi is not None:
            keep &= a <= hi
        return (g * keep,)


@_register("complex_mul")
class _ComplexMul:
    @staticmethod
    def forward(a, b):
        _check_broadcast("complex_mul", a, b)
        return _as_pair(_as_complex(a) * _as_complex(b)), None

    @staticmethod
    def backward(g, saved, a, b):
        gc = _as_complex(g)
        ga = _as_pair(gc * np.conj(_as_complex(b)))
        gb = _as_pair(gc * np.conj(_as_complex(a)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@_register("complex_exp")
class _ComplexExp:
    @staticmethod
    def forward(z):
        out = np.exp(_as_complex(z))
        return _as_pair(out), out

    @staticmethod
    def backward(g, out, z):
        # holomorphic: input grad = G * conj(f'(z))
        return (_as_pair(_as_complex(g) * np.conj(out)),)


_PHI_SERIES = 1e-8


def _phi1(zc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(e^z - 1)/z and its derivative, switching to a series near z = 0."""
    small = np.abs(zc) < _PHI_SERIES
    safe = np.where(small, 1.0, zc)
    ez = np.exp(zc)
    val = np.where(small, 1.0 + zc / 2.0, np.expm1(safe) / safe)
    der = np.where(small, 0.5 + zc / 3.0, (ez - val) / safe)
    return val, der


@_register("complex_phi1")
class _ComplexPhi1:
    """phi1(z) = (exp(z) - 1) / z, the zero-order-hold input gain."""

    @staticmethod
    def forward(z):
        val, der = _phi1(_as_complex(z))
        return _as_pair(val), der

    @staticmethod
    def backward(g, der, z):
        return (_as_pair(_as_complex(g) * np.conj(der)),)


def _scan_complex(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive scan of x_k = a_k x_{k-1} + b_k along axis 0 (x_0 = 0).

    Odd/even recursive doubling: O(L) work, O(log L) depth. Each level
    combines adjacent pairs with (a_j a_i, b_j + a_j b_i).
    """
    n = a.shape[0]
    if n == 1:
        return b.copy()
    m = n // 2
    a_left, a_right = a[0 : 2 * m : 2], a[1 : 2 * m : 2]
    b_left, b_right = b[0 : 2 * m : 2], b[1 : 2 * m : 2]
    x_odd = _scan_complex(a_right * a_left, b_right + a_right * b_left)
    x = np.empty_like(b)
    x[1 : 2 * m : 2] = x_odd
    x[0] = b[0]
    if n > 2:
        x[2::2] = a[2::2] * x_odd[: (n - 1) // 2] + b[2::2]
    return x


def _swapped_fold(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # negative control for `tides verify`: folds with the operands of the
    # combine swapped, (a_i a_j, b_i + a_i b_j)
    x = np.empty_like(b)
    acc_a, acc_b = a[0], b[0]
    x[0] = acc_b
    for k in range(1, a.shape[0]):
        acc_a, acc_b = acc_a * a[k], acc_b + acc_a * b[k]
        x[k] = acc_b
    return x


SCAN_FAULT = {"swap_operands": False}


def scan_kernel(a: np.ndarray, b: np.ndarray, reverse: bool = False) -> np.ndarray:
    """Complex inclusive scan along axis 0; ``reverse`` runs from the end."""
    if a.shape[0] == 0:
        raise ValueError("linear_scan: empty sequence")
    if reverse:
        return scan_kernel(a[::-1], b[::-1])[::-1]
    if SCAN_FAULT["swap_operands"]:
        return _swapped_fold(a, b)
    return _scan_complex(a, b)


@_register("linear_scan")
class _LinearScan:
    """x_k = a_k * x_{k-1} + b_k over ``axis`` with complex (re, im) pairs."""

    @staticmethod
    def forward(a, b, axis=0, reverse=False):
        _check_broadcast("linear_scan", a, b)
        if a.shape[-1:] != (2,) or b.shape[-1:] != (2,):
            raise ValueError(f"linear_scan: need trailing (re, im) axes, got {a.shape} and {b.shape}")
        ac = np.moveaxis(_as_complex(np.broadcast_to(a, b.shape)), axis, 0)
        bc = np.moveaxis(_as_complex(b), axis, 0)
        x = scan_kernel(ac, bc, reverse=reverse)
        return _as_pair(np.moveaxis(x, 0, axis)), (ac, x)

    @staticmethod
    def backward(g, saved, a, b, axis=0, reverse=False):
        ac, x = saved
        gc = np.moveaxis(_as_complex(g), axis, 0)
        if reverse:
            ac, x, gc = ac[::-1], x[::-1], gc[::-1]
        # adjoint recurrence s_k = g_k + conj(a_{k+1}) s_{k+1}, run backwards
        a_next = np.empty_like(ac)
        a_next[:-1] = np.conj(ac[1:])
        a_next[-1] = 0.0
        s = scan_kernel(a_next, gc, reverse=True)
        x_prev = np.zeros_like(x)
        x_prev[1:] = x[:-1]
        ga, gb = s * np.conj(x_prev), s
        if reverse:
            ga, gb = ga[::-1], gb[::-1]
        ga = _as_pair(np.moveaxis(ga, 0, axis))
        gb = _as_pair(np.moveaxis(gb, 0, axis))
        return _unbroadcast(ga, a.shape), gb


# --------------------------------------------------------------------------
# tape

@dataclass
class Node:
    name: str
    inputs: tuple[int | None, ...]
    attrs: dict
    saved: Any = None
    constants: tuple[np.ndarray | None, ...] = ()


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Node ids are positions in ``nodes``; leaves are recorded as ``"leaf"``
    nodes so the tape is topologically ordered by construction.
    """

    nodes: list[Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, node: Node, value: np.ndarray) -> Tensor:
        self.nodes.append(node)
        self.values.append(value)
        return Tensor(value, node_id=len(self.nodes) - 1, tape=self)

    def leaf(self, data) -> Tensor:
        value = np.array(data, dtype=np.float64)
        return self._record(Node("leaf", (), {}), value)

    @property
    def leaf_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.name == "leaf"]

    def replay(self, leaves: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-evaluate every node in order; returns the list of node values."""
        leaves = leaves or {}
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.name == "leaf":
                values.append(np.asarray(leaves.get(i, self.values[i]), dtype=np.float64))
                continue
            args = [values[j] if j is not None else c for j, c in zip(node.inputs, node.constants)]
            out, _ = PRIMITIVES[node.name].forward(*args, **node.attrs)
            values.append(out)
        return values


def primitive_forward(name: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a registered primitive, recording it on the active tape.

    Inputs that are not on the active tape are treated as constants.
    """
    try:
        prim = PRIMITIVES[name]
    except KeyError:
        raise ValueError(f"unknown primitive {name!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    value, saved = prim.forward(*arrays, **attrs)
    value = np.asarray(value, dtype=np.float64)
    tape = _active_tape()
    ids = tuple(t.node_id if (tape is not None and t.tape is tape) else None for t in tensors)
    if tape is None or all(i is None for i in ids):
        return Tensor(value)
    constants = tuple(None if i is not None else a for i, a in zip(ids, arrays))
    return tape._record(Node(name, ids, attrs, saved, constants), value)


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every leaf of ``tape``."""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise GradientError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(tape.values[loss.node_id])}
    for i in range(loss.node_id, -1, -1):
        node = tape.nodes[i]
        g = grads.get(i)
        if g is None or node.name == "leaf":
            continue
        args = [tape.values[j] if j is not None else c for j, c in zip(node.inputs, node.constants)]
        in_grads = PRIMITIVES[node.name].backward(g, node.saved, *args, **node.attrs)
        for j, gj in zip(node.inputs, in_grads):
            if j is None or gj is None:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = np.asarray(gj, dtype=np.float64)
    return {i: grads.get(i, np.zeros_like(tape.values[i])) for i in tape.leaf_ids}


# --------------------------------------------------------------------------
# convenience wrappers used throughout the model code

def _unary(name):
    def op(x, **attrs):
        return primitive_forward(name, [x], **attrs)

    op.__name__ = name
    return op


exp = _unary("exp")
log = _unary("log")
sqrt = _unary("sqrt")
square = _unary("square")
sigmoid = _unary("sigmoid")
softplus = _unary("softplus")
tanh = _unary("tanh")
gelu = _unary("gelu")
negate = _unary("negate")
reciprocal = _unary("reciprocal")
complex_exp = _unary("complex_exp")
complex_phi1 = _unary("complex_phi1")


def complex_mul(a, b) -> Tensor:
    return primitive_forward("complex_mul", [a, b])


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return primitive_forward("concat", list(tensors), axis=axis)


def bilinear(u, z, w) -> Tensor:
    return primitive_forward("bilinear", [u, z, w])


def maximum(a, b) -> Tensor:
    return primitive_forward("maximum", [a, b])


def clamp(x, lo=None, hi=None) -> Tensor:
    return primitive_forward("clamp", [x], lo=lo, hi=hi)


def linear_scan(a, b, axis: int = 0, reverse: bool = False) -> Tensor:
    return primitive_forward("linear_scan", [a, b], axis=axis, reverse=reverse)


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``weight_decay`` is decoupled (applied to the parameter, not the
    gradient) and defaults to zero.
    """
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("adam_step: optimizer state does not match parameter list")
    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ValueError(f"adam_step: shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        m = state.first_moment[i] = state.beta1 * state.first_moment[i] + (1 - state.beta1) * g
        v = state.second_moment[i] = state.beta2 * state.second_moment[i] + (1 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.lr * state.weight_decay * p
        out.append(p - update)
    return out


# --------------------------------------------------------------------------
# testing utility

def finite_difference_check(
    fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``fn``.

    Relative error per entry is |a - cd| / max(|a|, |cd|, 1e-12).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = np.array(params, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != params.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != params {params.shape}")
    base = fn(params.copy())
    if not np.isfinite(base):
        raise GradientError("evaluation is not finite at the base point")
    worst = 0.0
    for i in range(params.size):
        up, dn = params.copy(), params.copy()
        up[i] += h
        dn[i] -= h
        fu, fd = fn(up), fn(dn)
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise GradientError(f"evaluation is not finite when perturbing parameter {i}")
        cd = (fu - fd) / (2 * h)
        denom = max(abs(analytic[i]), abs(cd), 1e-12)
        worst = max(worst, abs(analytic[i] - cd) / denom)
    return worst


# --------------------------------------------------------------------------
# randomness

def rng_stream(seed: int, *names: str | int) -> np.random.Generator:
    """PCG64 generator for the substream ``names`` of ``seed``.

    Substreams are derived with numpy's SeedSequence using a spawn key built
    from CRC32 hashes of the names, so the same (seed, names) always yields
    the same stream and distinct names yield independent streams.
    """
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def value_and_grad(fn: Callable[[dict], Tensor], params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on taped copies of ``params``; return loss and named grads."""
    with Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        loss = fn(leaves)
    grads = backward(loss, tape)
    return float(loss.data), {k: grads[t.node_id] for k, t in leaves.items()}


class Adam:
    """Adam over a name -> array parameter dict (keys visited in sorted order)."""

    def __init__(self, lr: float = 1e-3, weight_decay: float = 0.0):
        self.state = AdamState(lr=lr, weight_decay=weight_decay)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        keys = sorted(params)
        new = adam_step([params[k] for k in keys], [grads[k] for k in keys], self.state)
        return dict(zip(keys, new))
