"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable kernel records one node on the active :class:`Tape`.
Operations performed outside a tape (or on tensors that do not require
gradients) are evaluated eagerly and leave no trace, which is how decoding
and evaluation run without bookkeeping overhead.

Broadcasting is limited to scalar-with-tensor; the only structured
broadcast is :func:`add_bias`, which adds a vector along the last axis.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Gradient checks run under ``precision(np.float64)``; everything else
    stays in float32.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64) or arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass(eq=False)
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], tuple]
    op: str
    tape: "Tape | None" = None
    runs: int = 0


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already a topological
    order; :func:`backward` walks them in reverse. A tape may be consumed
    only once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.node = None
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        if tape.consumed:
            raise TapeError("cannot record onto a tape that was already consumed by backward()")
        node = _Node(out, tuple(parents), backward, op, tape)
        tape.nodes.append(node)
        out.node = node
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _record(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), float(b))
    if not isinstance(a, Tensor):
        return scale(b, float(a))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), 1.0 / float(b))
    a = as_tensor(a)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    dt = x.dtype.type
    x2 = x * x
    th = np.tanh(dt(_GELU_C) * x * (dt(1.0) + dt(0.044715) * x2))
    out = dt(0.5) * x * (dt(1.0) + th)

    def back(g):
        dinner = dt(_GELU_C) * (dt(1.0) + dt(3 * 0.044715) * x2)
        d = dt(0.5) * (dt(1.0) + th) + dt(0.5) * x * (dt(1.0) - th * th) * dinner
        return (g * d,)

    return _record(out, (a,), back, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` either (k, n) or
    (..., k, n) with batch axes identical to ``a``'s."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), back, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# ---------------------------------------------------------------- normalisers


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool array) marks
    allowed entries; disallowed entries come out exactly zero."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), back, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------- reductions / shape


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out, dtype=a.data.dtype), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _record(out, tuple(tensors), back, "concat")


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the backward scatters with ``np.add.at``
    so repeated indices accumulate."""
    shape = a.shape
    out = a.data[key]
    basic = _is_basic(key)

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record(np.array(out, copy=True), (a,), back, "index")


def _is_basic(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in items)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record(table.data[ids], (table,), back, "embedding")


def paste(base: np.ndarray | Tensor, patch: Tensor, y0: int, x0: int) -> Tensor:
    """Copy of ``base`` (..., H, W, C) with ``patch`` written at (y0, x0).

    Only ``patch`` is differentiable; gradients of the pasted region flow
    back to it and nothing else.
    """
    base = base.data if isinstance(base, Tensor) else np.asarray(base)
    ph, pw = patch.shape[-3], patch.shape[-2]
    if base.shape[:-3] != patch.shape[:-3] or base.shape[-1] != patch.shape[-1]:
        raise ShapeError(f"paste: patch {patch.shape} incompatible with canvas {base.shape}")
    if y0 < 0 or x0 < 0 or y0 + ph > base.shape[-3] or x0 + pw > base.shape[-2]:
        raise ShapeError(f"paste: patch {patch.shape} at ({y0},{x0}) leaves canvas {base.shape}")
    out = base.astype(patch.data.dtype, copy=True)
    region = (Ellipsis, slice(y0, y0 + ph), slice(x0, x0 + pw), slice(None))
    out[region] = patch.data
    return _record(out, (patch,), lambda g: (g[region].copy(),), "paste")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(leaf) to every leaf that requires gradients.

    Leaf ``.grad`` is overwritten, not accumulated. Returns ``{leaf: grad}``.
    The tape the loss was recorded on is consumed; a second call raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise TapeError("loss is detached from any tape (nothing requires grad)")
    tape: Tape = loss.node.tape
    if tape.consumed:
        raise TapeError("tape already consumed; rebuild the graph before calling backward again")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.runs += 1
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.node is None:
                leaves[key] = p
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key].astype(leaf.data.dtype, copy=False)
        result[leaf] = leaf.grad
    _release(tape, keep=loss.node)
    return result


def _release(tape: Tape, keep: _Node) -> None:
    """Break node <-> tensor cycles so intermediate buffers are freed at once
    rather than whenever the cyclic collector runs."""
    for node in tape.nodes:
        node.parents = ()
        node.backward = None
        if node is not keep:
            node.out.node = None
    tape.nodes.clear()


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-3,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and a
    central difference, over sampled flat coordinates.

    Relative error is ``|analytic - numeric| / max(|analytic|, 1e-8)``.
    Run under ``precision(np.float64)`` for tight tolerances.
    """
    x = np.asarray(x, dtype=default_dtype())
    leaf = Tensor(x.copy(), requires_grad=True)
    with Tape():
        out = f(leaf)
    backward(out)
    analytic = leaf.grad.reshape(-1)

    if coords is None:
        n = x.size
        if samples is None or samples >= n:
            coords = np.arange(n)
        else:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(n, size=samples, replace=False)
    worst = 0.0
    flat = x.reshape(-1)
    for i in coords:
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            with no_grad():
                v = float(f(Tensor(probe.reshape(x.shape))).data)
            if not np.isfinite(v):
                raise FloatingPointError(f"f is not finite at coordinate {i} offset {sign * h}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        a = float(analytic[i])
        worst = max(worst, abs(a - numeric) / max(abs(a), 1e-8))
    return worst


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              clip_norm: float | None = None) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} / moment {m.shape} vs param {p.shape}")
    if clip_norm is not None:
        total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        if total > clip_norm:
            grads = [g * (clip_norm / total) for g in grads]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.data.dtype)
    return state
