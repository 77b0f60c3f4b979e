"""Small reverse-mode differentiation core on top of numpy.

Every op builds a node in a dynamic computation history; ``backward`` walks
that history in reverse topological order and accumulates gradients into
the leaf tensors that asked for them. All arithmetic is float64.
"""

from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable history recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> list[float]:
        """Row-major flat list of values."""
        return self.data.ravel().tolist()

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar; shapes are checked by the underlying ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _require_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise InputError(f"{op}: non-finite input")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise InputError(f"unknown elementwise kind {kind!r}")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _node(a.data + c, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to the last axis of ``x`` (a vector or every row of a matrix)."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    if x.ndim == 1:
        return _node(x.data + b.data, (x, b), lambda g: (g, g))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = ad @ bd
    if ad.ndim == 2 and bd.ndim == 2:
        back = lambda g: (g @ bd.T, ad.T @ g)
    elif ad.ndim == 2:
        back = lambda g: (np.outer(g, bd), ad.T @ g)
    elif bd.ndim == 2:
        back = lambda g: (bd @ g, np.outer(ad, g))
    else:
        back = lambda g: (g * bd, g * ad)
    return _node(np.asarray(out, dtype=np.float64), (a, b), back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError(f"dot: expected vectors, got {a.shape} and {b.shape}")
    return matmul(a, b)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat: no parts given")
    if len(parts) == 1:
        return parts[0]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except (ValueError, np.exceptions.AxisError) as exc:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(parts), back)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not parts:
        raise DimensionError("stack: no parts given")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"stack: shape mismatch {shape} vs {p.shape}")
    out = np.stack([p.data for p in parts])
    return _node(out, tuple(parts), lambda g: tuple(g))


def take(a: Tensor, idx) -> Tensor:
    """Numpy-style indexing with gradient scattered back."""
    out = np.array(a.data[idx], dtype=np.float64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), back)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _node(a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return scale(sum(a), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def activation(x: Tensor, kind: str) -> Tensor:
    _require_finite(x, kind)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise InputError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise InputError("log: non-positive input")
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    return _node(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax. ``mask`` (bool, same shape) zeroes excluded entries."""
    _require_finite(x, "softmax")
    if x.ndim == 0 or x.shape[axis] == 0:
        raise InputError(f"softmax: empty axis {axis} for shape {x.shape}")
    xd = x.data
    if mask is not None:
        if mask.shape != xd.shape:
            raise DimensionError(f"softmax: mask shape {mask.shape} vs {xd.shape}")
        if not np.all(mask.any(axis=axis)):
            raise InputError("softmax: mask excludes every entry along an axis")
        xd = np.where(mask, xd, -np.inf)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), back)


# ---------------------------------------------------------------------------
# gated recurrent unit


_GRU_BLOCKS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass
class GruCellParams:
    """Weights of one GRU cell; ``W_*`` act on the input, ``U_*`` on the hidden state."""

    input_dim: int
    hidden_dim: int
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def __post_init__(self):
        i, h = self.input_dim, self.hidden_dim
        expected = {"W": (h, i), "U": (h, h), "b": (h,)}
        for name in _GRU_BLOCKS:
            got = getattr(self, name).shape
            if got != expected[name[0]]:
                raise DimensionError(f"GRU block {name}: expected {expected[name[0]]}, got {got}")

    def blocks(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in _GRU_BLOCKS}

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, requires_grad: bool = True) -> "GruCellParams":
        i, h = input_dim, hidden_dim
        shapes = {"W": (h, i), "U": (h, h), "b": (h,)}
        return cls(i, h, **{n: Tensor(np.zeros(shapes[n[0]]), requires_grad=requires_grad)
                            for n in _GRU_BLOCKS})


def gru_cell(params: GruCellParams, h_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU step, fused into a single history node.

    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    n = tanh(W_h x + U_h (r*h) + b_h), output (1 - z)*h + z*n.
    """
    if h_prev.shape != (params.hidden_dim,) or x.shape != (params.input_dim,):
        raise DimensionError(
            f"gru_cell: expected h {(params.hidden_dim,)} and x {(params.input_dim,)}, "
            f"got {h_prev.shape} and {x.shape}")
    Wz, Wr, Wh = params.W_z.data, params.W_r.data, params.W_h.data
    Uz, Ur, Uh = params.U_z.data, params.U_r.data, params.U_h.data
    h, xv = h_prev.data, x.data
    z = _sigmoid(Wz @ xv + Uz @ h + params.b_z.data)
    r = _sigmoid(Wr @ xv + Ur @ h + params.b_r.data)
    rh = r * h
    n = np.tanh(Wh @ xv + Uh @ rh + params.b_h.data)
    out = (1.0 - z) * h + z * n

    def back(g):
        dn = g * z
        da_h = dn * (1.0 - n * n)
        drh = Uh.T @ da_h
        da_r = drh * h * r * (1.0 - r)
        da_z = g * (n - h) * z * (1.0 - z)
        dh = g * (1.0 - z) + drh * r + Ur.T @ da_r + Uz.T @ da_z
        dx = Wh.T @ da_h + Wr.T @ da_r + Wz.T @ da_z
        return (np.outer(da_z, xv), np.outer(da_r, xv), np.outer(da_h, xv),
                np.outer(da_z, h), np.outer(da_r, h), np.outer(da_h, rh),
                da_z, da_r, da_h, dh, dx)

    parents = (params.W_z, params.W_r, params.W_h, params.U_z, params.U_r, params.U_h,
               params.b_z, params.b_r, params.b_h, h_prev, x)
    return _node(out, parents, back)


def gru_cell_reference(params: GruCellParams, h_prev: Tensor, x: Tensor) -> Tensor:
    """Same cell composed from primitive ops; used to cross-check the fused version."""
    z = sigmoid(add_bias(add(matmul(params.W_z, x), matmul(params.U_z, h_prev)), params.b_z))
    r = sigmoid(add_bias(add(matmul(params.W_r, x), matmul(params.U_r, h_prev)), params.b_r))
    n = tanh(add_bias(add(matmul(params.W_h, x), matmul(params.U_h, mul(r, h_prev))), params.b_h))
    return add(mul(shift(neg(z), 1.0), h_prev), mul(z, n))


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf tensor.

    Intermediate gradients live only for the duration of the call, so calling
    twice on the same history adds the same amount twice.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    op_name: str
    max_rel_err: float
    per_param_err: dict[str, float] = field(default_factory=dict)
    reliable: bool = True

    def worst(self) -> tuple[str, float]:
        if not self.per_param_err:
            return ("", 0.0)
        name = max(self.per_param_err, key=self.per_param_err.get)
        return name, self.per_param_err[name]


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def norm_relative_error(a, b, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over a whole tensor."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    epsilon: float = 1e-5,
    *,
    analytic: Mapping[str, np.ndarray] | None = None,
    name: str | None = None,
    mode: str = "tensor",
) -> GradReport:
    """Compare backward() gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments and must read the current values of ``params``.
    Pass ``analytic`` to check a gradient obtained some other way.

    ``mode="tensor"`` scores each parameter by the norm-relative error of its
    whole gradient; ``mode="elementwise"`` takes the worst single entry, which
    is dominated by difference round-off on entries near zero.
    """
    if mode not in ("tensor", "elementwise"):
        raise InputError(f"grad_check: unknown mode {mode!r}")
    if epsilon <= 0:
        raise InputError("grad_check: epsilon must be positive")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    op_name = name or getattr(f, "__name__", "f")

    base = f()
    reliable = True
    with no_grad():
        again = f()
    if not np.array_equal(base.data, again.data):
        warnings.warn(f"grad_check({op_name}): f is not deterministic; report is unreliable",
                      RuntimeWarning, stacklevel=2)
        reliable = False

    if analytic is None:
        saved = {k: p.grad for k, p in params.items()}
        for p in params.values():
            p.grad = None
        backward(base)
        analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                    for k, p in params.items()}
        for k, p in params.items():
            p.grad = saved[k]

    per_param: dict[str, float] = {}
    with no_grad():
        for key, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = f().item()
                flat[i] = orig - epsilon
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * epsilon)
            ana = np.asarray(analytic[key], dtype=np.float64).reshape(-1)
            if not flat.size:
                per_param[key] = 0.0
            elif mode == "tensor":
                per_param[key] = norm_relative_error(ana, numeric)
            else:
                per_param[key] = float(relative_error(ana, numeric).max())

    max_err = max(per_param.values(), default=0.0)
    return GradReport(op_name, max_err, per_param, reliable)
