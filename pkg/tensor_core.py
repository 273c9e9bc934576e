"""
Minimal reverse-mode autodiff over numpy arrays.

Define-by-run: every primitive applied to an input that requires grad is
appended to the thread's active Tape; `backward(loss)` walks that tape in
exact reverse recording order and then clears it, so each training step
records a fresh tape.

Shapes used by the models are time-major 2-d arrays (T x channels); the
primitive table below documents each primitive's shape rule.
"""
from __future__ import annotations

import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Collection, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

from errors import (
    NonFiniteError,
    NonFiniteGradientError,
    NonScalarLossError,
    ShapeError,
    UnknownPrimitiveError,
)


log = logging.getLogger("tensor_core")

_node_ids = itertools.count(1)


# -----------------------------
# Thread-local recording state
# -----------------------------
class _State(threading.local):
    def __init__(self) -> None:
        self.tape: Tape | None = None
        self.grad_enabled: bool = True
        self.dtype: type = np.float32
        self.check_finite: bool = False


_state = _State()


def default_dtype() -> type:
    return _state.dtype


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Select the float type new tensors are created with (float64 for gradient checks)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


# -----------------------------
# Tensor
# -----------------------------
class Tensor:
    __slots__ = ("values", "requires_grad", "node_id", "name", "grad")

    def __init__(
        self,
        values: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: type | None = None,
    ) -> None:
        if isinstance(values, np.ndarray) and dtype is None and values.dtype.kind == "f":
            arr = values
        else:
            arr = np.asarray(values, dtype=dtype or _state.dtype)
        self.values: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int = next(_node_ids)
        self.name = name
        self.grad: np.ndarray | None = None

    # shape helpers
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return np.array(self.values, copy=True)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad}{label})"

    # operator sugar, all routed through apply_primitive
    def __add__(self, other: Any) -> Tensor:
        return apply_primitive("add", [self, as_tensor(other)])

    def __radd__(self, other: Any) -> Tensor:
        return apply_primitive("add", [as_tensor(other), self])

    def __sub__(self, other: Any) -> Tensor:
        return apply_primitive("sub", [self, as_tensor(other)])

    def __rsub__(self, other: Any) -> Tensor:
        return apply_primitive("sub", [as_tensor(other), self])

    def __mul__(self, other: Any) -> Tensor:
        if isinstance(other, (int, float)):
            return apply_primitive("scale", [self], factor=float(other))
        return apply_primitive("mul", [self, as_tensor(other)])

    def __rmul__(self, other: Any) -> Tensor:
        return self.__mul__(other)

    def __truediv__(self, other: float) -> Tensor:
        return apply_primitive("scale", [self], factor=1.0 / float(other))

    def __neg__(self) -> Tensor:
        return apply_primitive("scale", [self], factor=-1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return apply_primitive("matmul", [self, other])

    @property
    def T(self) -> Tensor:
        return apply_primitive("transpose", [self])


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values: Any) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values: Any, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(values, dtype=_state.dtype), requires_grad=True, name=name)


def detach(t: Tensor) -> Tensor:
    return Tensor(t.values, requires_grad=False, name=t.name)


# -----------------------------
# Tape
# -----------------------------
@dataclass
class TapeRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output_id: int
    saved: Any

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)


@dataclass
class Tape:
    records: list[TapeRecord] = field(default_factory=list)
    _outputs: set[int] = field(default_factory=set, repr=False)
    _prev: Tape | None = field(default=None, repr=False)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, saved: Any) -> None:
        self.records.append(TapeRecord(kind, tuple(inputs), output.node_id, saved))
        self._outputs.add(output.node_id)

    def produced(self, node_id: int) -> bool:
        return node_id in self._outputs

    def clear(self) -> None:
        self.records.clear()
        self._outputs.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> Tape:
        self._prev = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc: object) -> None:
        _state.tape = self._prev
        self._prev = None


def active_tape() -> Tape:
    if _state.tape is None:
        _state.tape = Tape()
    return _state.tape


# -----------------------------
# Primitive registry
# -----------------------------
ForwardFn = Callable[..., "tuple[np.ndarray, Any]"]
BackwardFn = Callable[[Any, np.ndarray], "tuple[np.ndarray | None, ...]"]


@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: ForwardFn
    backward: BackwardFn
    rule: str


_PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(kind: str, forward: ForwardFn, backward: BackwardFn, rule: str = "") -> None:
    _PRIMITIVES[kind] = Primitive(kind, forward, backward, rule)


def primitive_kinds() -> list[str]:
    return sorted(_PRIMITIVES)


def primitive_rule(kind: str) -> str:
    return _lookup(kind).rule


def _lookup(kind: str) -> Primitive:
    try:
        return _PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}; known: {', '.join(primitive_kinds())}") from None


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    prim = _lookup(kind)
    arrays = [t.values for t in inputs]
    out, saved = prim.forward(*arrays, **attrs)

    if _state.check_finite and not np.all(np.isfinite(out)):
        where = len(_state.tape) if _state.tape is not None else 0
        raise NonFiniteError(f"primitive {kind!r} produced non-finite values (tape position {where})")

    requires = _state.grad_enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires)
    if requires:
        active_tape().record(kind, inputs, result, saved)
    return result


def _shape_error(kind: str, *shapes: tuple[int, ...], why: str = "") -> ShapeError:
    dims = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{kind}: incompatible shapes {dims}" + (f" ({why})" if why else ""))


def _unbroadcast(grad: np.ndarray, to_shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for i, tdim in enumerate(to_shape):
        if tdim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_check(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(kind, a.shape, b.shape, why="not broadcastable") from None


# add / sub / mul: numpy broadcasting; gradients are summed back onto each input's shape
def _add_fwd(a, b):
    _broadcast_check("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _broadcast_check("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _mul_fwd(a, b):
    _broadcast_check("mul", a, b)
    return a * b, (a, b)


def _mul_bwd(saved, g):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, factor: float):
    return a * a.dtype.type(factor), factor


def _scale_bwd(factor, g):
    return (g * g.dtype.type(factor),)


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape, why="expects (n,k) @ (k,m)")
    return a @ b, (a, b)


def _matmul_bwd(saved, g):
    a, b = saved
    return g @ b.T, a.T @ g


def _transpose_fwd(a):
    if a.ndim != 2:
        raise _shape_error("transpose", a.shape, why="expects a 2-d input")
    return a.T.copy(), None


def _transpose_bwd(_, g):
    return (g.T.copy(),)


def _conv1d_fwd(x, w):
    # x: (T, C_in), w: (K, C_in, C_out), odd K, zero "same" padding
    if x.ndim != 2 or w.ndim != 3 or w.shape[1] != x.shape[1] or w.shape[0] % 2 == 0:
        raise _shape_error("conv1d", x.shape, w.shape, why="expects (T,C_in) * (K odd,C_in,C_out)")
    k, c_in, c_out = w.shape
    t = x.shape[0]
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (T, C_in, K)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(t, k * c_in)
    wr = w.reshape(k * c_in, c_out)
    return cols @ wr, (cols, wr, x.shape, w.shape)


def _conv1d_bwd(saved, g):
    cols, wr, x_shape, w_shape = saved
    k, c_in, _ = w_shape
    t = x_shape[0]
    pad = k // 2
    dw = (cols.T @ g).reshape(w_shape)
    dcols = (g @ wr.T).reshape(t, k, c_in)
    dxp = np.zeros((t + 2 * pad, c_in), dtype=g.dtype)
    for j in range(k):
        dxp[j:j + t] += dcols[:, j, :]
    return dxp[pad:pad + t], dw


def _norm_fwd(x, axis: int, eps: float):
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    return xhat, (xhat, inv, axis)


def _norm_bwd(saved, g):
    xhat, inv, axis = saved
    n = xhat.shape[axis]
    gs = g.sum(axis=axis, keepdims=True)
    gx = (g * xhat).sum(axis=axis, keepdims=True)
    return ((inv / n) * (n * g - gs - xhat * gx),)


def _layer_norm_fwd(x, eps: float = 1e-5):
    return _norm_fwd(x, -1, eps)


def _instance_norm_fwd(x, eps: float = 1e-5):
    if x.ndim != 2:
        raise _shape_error("instance_norm", x.shape, why="expects (T, C)")
    return _norm_fwd(x, 0, eps)


def _softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(y, g):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(x):
    c = x.dtype.type(_GELU_C)
    th = np.tanh(c * (x + x.dtype.type(0.044715) * x ** 3))
    return 0.5 * x * (1.0 + th), (x, th)


def _gelu_bwd(saved, g):
    x, th = saved
    c = x.dtype.type(_GELU_C)
    sech2 = 1.0 - th * th
    d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * c * (1.0 + x.dtype.type(3 * 0.044715) * x * x)
    return (g * d,)


def _relu_fwd(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def _relu_bwd(mask, g):
    return (np.where(mask, g, g.dtype.type(0)),)


def _sigmoid_fwd(x):
    y = expit(x).astype(x.dtype, copy=False)
    return y, y


def _sigmoid_bwd(y, g):
    return (g * y * (1.0 - y),)


def _concat_fwd(*xs, axis: int = -1):
    if not xs:
        raise ShapeError("concat: no inputs")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise _shape_error("concat", *(y.shape for y in xs), why=f"must agree off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    return np.concatenate(xs, axis=ax), (ax, sizes)


def _concat_bwd(saved, g):
    ax, sizes = saved
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=ax))


def _slice_fwd(x, axis: int, start: int, stop: int):
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    out = x[tuple(idx)]
    if out.size == 0:
        raise _shape_error("slice", x.shape, why=f"empty range [{start}:{stop}] on axis {axis}")
    return out.copy(), (x.shape, tuple(idx))


def _slice_bwd(saved, g):
    shape, idx = saved
    dx = np.zeros(shape, dtype=g.dtype)
    dx[idx] = g
    return (dx,)


def _mean_fwd(x, axis: int | None = None):
    out = np.asarray(x.mean(axis=axis), dtype=x.dtype)
    return out, (x.shape, axis)


def _mean_bwd(saved, g):
    shape, axis = saved
    if axis is None:
        n = int(np.prod(shape))
        return (np.broadcast_to(g / n, shape).copy(),)
    ax = axis % len(shape)
    return (np.broadcast_to(np.expand_dims(g, ax) / shape[ax], shape).copy(),)


def _same_shape(kind: str, a, b) -> None:
    if a.shape != b.shape:
        raise _shape_error(kind, a.shape, b.shape, why="distance needs equal shapes")


def _l1_fwd(a, b):
    _same_shape("l1_distance", a, b)
    d = a - b
    return np.asarray(np.abs(d).mean(), dtype=a.dtype), d


def _l1_bwd(d, g):
    s = np.sign(d) * (g / d.size)
    return s, -s


def _sq_fwd(a, b):
    _same_shape("squared_distance", a, b)
    d = a - b
    return np.asarray((d * d).mean(), dtype=a.dtype), d


def _sq_bwd(d, g):
    s = d * (2.0 * g / d.size)
    return s, -s


register_primitive("add", _add_fwd, _add_bwd, "elementwise a+b, numpy broadcasting")
register_primitive("sub", _sub_fwd, _sub_bwd, "elementwise a-b, numpy broadcasting")
register_primitive("mul", _mul_fwd, _mul_bwd, "elementwise a*b, numpy broadcasting")
register_primitive("scale", _scale_fwd, _scale_bwd, "a * constant factor (attr factor)")
register_primitive("matmul", _matmul_fwd, _matmul_bwd, "(n,k) @ (k,m) -> (n,m)")
register_primitive("transpose", _transpose_fwd, _transpose_bwd, "(n,m) -> (m,n)")
register_primitive("conv1d", _conv1d_fwd, _conv1d_bwd, "(T,C_in) * (K,C_in,C_out) -> (T,C_out), odd K, zero same-padding")
register_primitive("layer_norm", _layer_norm_fwd, _norm_bwd, "normalize over the last axis (attr eps)")
register_primitive("instance_norm", _instance_norm_fwd, _norm_bwd, "(T,C): per-channel normalize over time (attr eps)")
register_primitive("softmax", _softmax_fwd, _softmax_bwd, "softmax over the last axis")
register_primitive("gelu", _gelu_fwd, _gelu_bwd, "tanh-approximated gelu, elementwise")
register_primitive("relu", _relu_fwd, _relu_bwd, "elementwise max(x, 0)")
register_primitive("sigmoid", _sigmoid_fwd, _sigmoid_bwd, "elementwise logistic")
register_primitive("concat", _concat_fwd, _concat_bwd, "join along attr axis; other dims must agree")
register_primitive("slice", _slice_fwd, _slice_bwd, "x[start:stop] along attr axis; non-empty")
register_primitive("mean", _mean_fwd, _mean_bwd, "mean over all elements (axis=None) or one axis")
register_primitive("l1_distance", _l1_fwd, _l1_bwd, "mean |a-b| over elements; equal shapes")
register_primitive("squared_distance", _sq_fwd, _sq_bwd, "mean (a-b)^2 over elements; equal shapes")


# -----------------------------
# Functional wrappers
# -----------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    return apply_primitive("conv1d", [x, w])


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", [x], eps=eps)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("instance_norm", [x], eps=eps)


def softmax(x: Tensor) -> Tensor:
    return apply_primitive("softmax", [x])


def gelu(x: Tensor) -> Tensor:
    return apply_primitive("gelu", [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(xs), axis=axis)


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    return apply_primitive("slice", [x], axis=axis, start=start, stop=stop)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return apply_primitive("mean", [x], axis=axis)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("l1_distance", [a, b])


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("squared_distance", [a, b])


# -----------------------------
# Backward
# -----------------------------
class GradientMap(dict):
    """node_id -> gradient array; `of(t)` gives zeros for tensors never reached."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t.node_id)
        return np.zeros_like(t.values) if g is None else g


def backward(loss: Tensor) -> GradientMap:
    if loss.values.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")

    tape = active_tape()
    grads = GradientMap()
    grads[loss.node_id] = np.ones_like(loss.values)
    if not loss.requires_grad:
        return grads
    if not tape.produced(loss.node_id):
        raise NonScalarLossError("loss is not connected to the active tape")

    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.get(rec.output_id)
        if g is None:
            continue
        in_grads = _lookup(rec.kind).backward(rec.saved, g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
            if not tape.produced(t.node_id):
                leaves[t.node_id] = t

    # leaves recorded on the tape but not on any path to the loss get an explicit zero
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and not tape.produced(t.node_id) and t.node_id not in leaves:
                leaves[t.node_id] = t
    for nid, t in leaves.items():
        t.grad = grads.of(t)
        grads.setdefault(nid, t.grad)

    tape.clear()
    return grads


# -----------------------------
# Gradient check
# -----------------------------
def grad_check(
    function: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    atol: float | None = None,
) -> float:
    """
    max over all input coordinates of
        |analytic - central difference| / max(|analytic|, |difference|, atol)
    `function(*inputs)` must return a scalar Tensor. When any input is below
    64-bit, the perturbed passes run on 64-bit copies of the inputs and atol
    defaults to 1e-4 (1e-8 otherwise).
    """
    narrow = any(t.values.dtype.itemsize < 8 for t in inputs)
    floor = atol if atol is not None else (1e-4 if narrow else 1e-8)
    saved_flags = [t.requires_grad for t in inputs]
    originals = [t.values for t in inputs]
    prev_check = _state.check_finite
    _state.check_finite = True
    try:
        for t in inputs:
            t.requires_grad = True
        with Tape():
            loss = function(*inputs)
            if not np.all(np.isfinite(loss.values)):
                raise NonFiniteError("loss is non-finite at the unperturbed point")
            grads = backward(loss)
        analytic = [np.asarray(grads.of(t), dtype=np.float64) for t in inputs]

        worst = 0.0
        with no_grad(), precision(np.float64 if narrow else _state.dtype):
            if narrow:
                for t in inputs:
                    t.values = t.values.astype(np.float64)
            for t, a in zip(inputs, analytic):
                base = t.values
                flat = base.reshape(-1)
                for i in range(flat.size):
                    plus = flat.copy()
                    plus[i] += base.dtype.type(eps)
                    t.values = plus.reshape(base.shape)
                    fp = function(*inputs).item()
                    minus = flat.copy()
                    minus[i] -= base.dtype.type(eps)
                    t.values = minus.reshape(base.shape)
                    fm = function(*inputs).item()
                    t.values = base
                    diff = (fp - fm) / (2.0 * eps)
                    ai = float(a.reshape(-1)[i])
                    err = abs(ai - diff) / max(abs(ai), abs(diff), floor)
                    worst = max(worst, err)
        return worst
    finally:
        _state.check_finite = prev_check
        for t, flag, vals in zip(inputs, saved_flags, originals):
            t.requires_grad = flag
            t.values = vals


# -----------------------------
# Adam
# -----------------------------
@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: GradientMap,
    state: AdamState,
    frozen: Collection[str] = (),
) -> tuple[Mapping[str, Tensor], AdamState]:
    """
    Bias-corrected Adam. The whole step is rejected (nothing changes) when any
    gradient is non-finite; names in `frozen` are skipped entirely.
    """
    if state.step < 0:
        raise ValueError(f"Adam step counter must be >= 0, got {state.step}")

    active: list[tuple[str, Tensor, np.ndarray]] = []
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.of(p)
        if g.shape != p.values.shape:
            raise _shape_error(f"adam_step[{name}]", p.values.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        active.append((name, p, g))

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p, g in active:
        g64 = g.astype(np.float64)
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g64
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g64 * g64
        state.m[name] = np.broadcast_to(m, p.values.shape).copy()
        state.v[name] = np.broadcast_to(v, p.values.shape).copy()
        update = state.lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + state.epsilon)
        p.values = (p.values.astype(np.float64) - update).astype(p.values.dtype)
    return params, state
