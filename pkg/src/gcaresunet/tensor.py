"""Rank-4 tensors with a reverse-mode autodiff tape.

Every tensor is a dense ``(B, C, H, W)`` array.  Operations that touch a
tensor with ``requires_grad`` append a node to the active :class:`Tape`;
:func:`backward` walks that tape in reverse creation order, which is a valid
topological order because a node can only consume tensors that already exist.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

AXES = {"B": 0, "C": 1, "H": 2, "W": 3}

_state = threading.local()


def _local():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.dtype = np.float32
    return _state


def default_dtype():
    return _local().dtype


@contextlib.contextmanager
def precision(dtype):
    """Run the enclosed code with tensors created in ``dtype``."""
    st = _local()
    prev = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _local().grad_enabled


class BranchLog:
    """Branch decisions (ReLU masks, argmax picks) in evaluation order.

    In record mode every decision is appended to ``decisions``.  In replay
    mode the ops read back the decisions of an earlier recorded run instead
    of deciding afresh, which evaluates the network on that run's smooth
    piece.
    """

    def __init__(self, replay: list | None = None):
        self.decisions: list = []
        self.replay = replay
        self.pos = 0

    def same_as(self, other: "BranchLog") -> bool:
        return len(self.decisions) == len(other.decisions) and all(
            np.array_equal(a, b) for a, b in zip(self.decisions, other.decisions))


@contextlib.contextmanager
def branch_trace(replay: BranchLog | None = None):
    st = _local()
    prev = getattr(st, "branches", None)
    st.branches = BranchLog(replay.decisions if replay is not None else None)
    try:
        yield st.branches
    finally:
        st.branches = prev


def decide(decision: np.ndarray) -> np.ndarray:
    """Route a branch decision through the active :class:`BranchLog`, if any."""
    log = getattr(_local(), "branches", None)
    if log is None:
        return decision
    if log.replay is not None:
        if log.pos >= len(log.replay) or log.replay[log.pos].shape != decision.shape:
            raise RuntimeError("branch replay does not match the recorded evaluation")
        decision = log.replay[log.pos]
        log.pos += 1
    log.decisions.append(decision)
    return decision


@dataclass
class Node:
    kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence]
    out: "Tensor | None" = None


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


def get_tape() -> Tape:
    return _local().tape


def reset_tape() -> None:
    get_tape().clear()


def _axis(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}; expected one of B, C, H, W") from None
    if axis not in (0, 1, 2, 3):
        raise ValueError(f"axis {axis} out of range for a rank-4 tensor")
    return axis


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "decay")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim != 4:
            raise ValueError(f"Tensor requires rank-4 data, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self.name = name
        self.decay = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return broadcast_mul(self, other)

    def __rmul__(self, other):
        return broadcast_mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=default_dtype())
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    return Tensor(arr)


def make_op(data: np.ndarray, kind: str, inputs: tuple, backward_fn) -> Tensor:
    """Wrap ``data`` as an op output, recording a tape node when needed."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, inputs, backward_fn)
        out.node_id = get_tape().record(node)
        node.out = out
    return out


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {a} and {b} are not broadcast-compatible")
        out.append(max(da, db))
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes where ``shape`` was broadcast from 1."""
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, "sub", (a, b), bw)


def broadcast_mul(a, b) -> Tensor:
    """Elementwise product with size-1 axes stretched to match."""
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad * bd, "mul", (a, b), bw)


mul = broadcast_mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad / bd, "div", (a, b), bw)


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return make_op(x.data * k, "scale", (x,), lambda g: (g * k,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.log(xd), "log", (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------


def sum(x: Tensor, axes: Iterable = (0, 1, 2, 3)) -> Tensor:  # noqa: A001
    axes = tuple(_axis(a) for a in axes)
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(x.data.sum(axis=axes, keepdims=True), "sum", (x,), bw)


def mean(x: Tensor, axes: Iterable = (0, 1, 2, 3)) -> Tensor:
    axes = tuple(_axis(a) for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes), 1.0 / n)


def reduce_axis(x: Tensor, axis: str, mode: str = "mean") -> Tensor:
    """Collapse the H or W axis to size 1 by its mean or max.

    Max keeps the argmax (lowest index on ties) so the backward pass routes
    the gradient to that single position.
    """
    ax = _axis(axis)
    if ax not in (2, 3):
        raise ValueError(f"reduce_axis works on H or W, got {axis!r}")
    return reduce_any(x, ax, mode)


def reduce_any(x: Tensor, axis, mode: str = "mean") -> Tensor:
    """:func:`reduce_axis` without the spatial-axis restriction."""
    ax = _axis(axis)
    n = x.shape[ax]
    shape = x.shape
    if mode == "mean":
        y = x.data.mean(axis=ax, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g / n, shape).copy(),)

    elif mode == "max":
        idx = decide(np.expand_dims(np.argmax(x.data, axis=ax), ax))
        y = np.take_along_axis(x.data, idx, axis=ax)

        def bw(g):
            gx = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(gx, idx, g, axis=ax)
            return (gx,)

    else:
        raise ValueError(f"unknown reduce mode {mode!r}; expected 'mean' or 'max'")
    return make_op(y, f"reduce_{mode}", (x,), bw)


def concat(parts: Sequence[Tensor], axis="C") -> Tensor:
    if not parts:
        raise ValueError("concat needs at least one tensor")
    ax = _axis(axis)
    ref = parts[0].shape
    for p in parts[1:]:
        for i in range(4):
            if i != ax and p.shape[i] != ref[i]:
                raise ValueError(
                    f"concat along axis {axis}: shape {p.shape} does not match {ref} off-axis"
                )
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    data = np.concatenate([p.data for p in parts], axis=ax)
    return make_op(data, "concat", tuple(parts), bw)


def slice_axis(x: Tensor, start: int, stop: int, axis="C") -> Tensor:
    ax = _axis(axis)
    if not 0 <= start < stop <= x.shape[ax]:
        raise ValueError(f"slice [{start}:{stop}] out of range for axis of size {x.shape[ax]}")
    index = (slice(None),) * ax + (slice(start, stop),)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_op(x.data[index].copy(), "slice", (x,), bw)


def split(x: Tensor, sizes: Sequence[int], axis="C") -> list:
    ax = _axis(axis)
    if builtins.sum(sizes) != x.shape[ax]:
        raise ValueError(f"split sizes {list(sizes)} do not add up to {x.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


def transpose_hw(x: Tensor) -> Tensor:
    return make_op(
        np.ascontiguousarray(x.data.transpose(0, 1, 3, 2)),
        "transpose_hw",
        (x,),
        lambda g: (g.transpose(0, 1, 3, 2),),
    )


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None, retain_grads: bool = False):
    """Accumulate d(loss)/d(leaf) into each reachable leaf's ``.grad``.

    ``wrt`` tensors that the loss never touched get zero gradients.  With
    ``retain_grads`` the intermediate tensors keep their ``.grad`` too.  The
    tape is cleared afterwards.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    tape = get_tape()
    seed = np.ones(loss.shape, dtype=loss.data.dtype)
    if loss.node_id is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
    else:
        grads = {loss.node_id: seed}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = tape.nodes[nid]
            if retain_grads:
                node.out.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype)
                if t.node_id is None:
                    t.grad = gi if t.grad is None else t.grad + gi
                elif t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + gi
                else:
                    grads[t.node_id] = gi
    tape.clear()
    if wrt is not None:
        for t in wrt:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        return [t.grad for t in wrt]
    return None


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _coords(shape, n_coords, rng):
    total = int(np.prod(shape))
    if n_coords is None or n_coords >= total:
        flat = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = np.sort(rng.choice(total, size=n_coords, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def _checked(v: float, where) -> float:
    if not np.isfinite(v):
        raise FloatingPointError(f"non-finite value {v} at coordinate {_fmt_where(where)}")
    return v


def _fmt_where(where):
    if isinstance(where, tuple) and where and isinstance(where[0], str):
        return f"{where[0]}{_fmt_where(where[1])}"
    return tuple(int(i) for i in where)


def _traced(evaluate, replay=None):
    with branch_trace(replay) as trace:
        value = evaluate()
    return value, trace


def _quotient(evaluate, set_value, orig, eps, base, where):
    """Central difference and whether it had to be taken on frozen branches.

    When either side of the stencil takes a different ReLU/argmax branch
    than the base evaluation, the plain difference measures the kink rather
    than the derivative; both sides are then re-evaluated replaying the base
    point's decisions.
    """
    set_value(orig + eps)
    fp, tp = _traced(evaluate)
    set_value(orig - eps)
    fm, tm = _traced(evaluate)
    frozen = not (tp.same_as(base) and tm.same_as(base))
    if frozen:
        set_value(orig + eps)
        fp, _ = _traced(evaluate, base)
        set_value(orig - eps)
        fm, _ = _traced(evaluate, base)
    set_value(orig)
    _checked(fp, where)
    _checked(fm, where)
    return (fp - fm) / (2 * eps), frozen


def _worst(pairs, stats, key):
    if stats is not None:
        stats[key] = {"checked": len(pairs), "frozen": builtins.sum(f for _, _, f in pairs)}
    return max((_rel_err(a, n) for a, n, _ in pairs), default=0.0)


def grad_check(f, x, eps: float = 1e-3, n_coords: int | None = None, rng=None,
               stats: dict | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor.  Both the analytic and the
    numeric evaluations run in float64 so that the difference quotient is not
    swamped by float32 rounding.  Coordinates whose +/-eps stencil flips a
    ReLU mask or an argmax pick are differenced with the base point's
    branches replayed (see :class:`BranchLog`); ``stats`` receives the
    number of checked and of such frozen coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        reset_tape()
        t = Tensor(x64.copy(), requires_grad=True)
        with branch_trace() as base:
            loss = f(t)
        (analytic,) = backward(loss, wrt=[t])
        xp = x64.copy()
        pairs = []
        with no_grad():
            for idx in _coords(x64.shape, n_coords, rng):

                def set_value(v, idx=idx):
                    xp[idx] = v

                n, frozen = _quotient(lambda: f(Tensor(xp)).item(), set_value, x64[idx], eps, base, idx)
                pairs.append((_checked(float(analytic[idx]), idx), n, frozen))
    return _worst(pairs, stats, "x")


def grad_check_params(loss_fn, params: dict, eps: float = 1e-3, n_coords: int | None = None,
                      rng=None, stats: dict | None = None) -> dict:
    """Like :func:`grad_check` but against named leaf parameters in place.

    ``loss_fn()`` must build its scalar loss from ``params``; the parameter
    arrays are temporarily promoted to float64 and restored afterwards.
    Returns ``{name: max relative error}``.
    """
    saved = {k: (p.data, p.grad, p.requires_grad) for k, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
            p.grad = None
            p.requires_grad = True
        with precision(np.float64):
            reset_tape()
            with branch_trace() as base:
                loss = loss_fn()
            grads = backward(loss, wrt=list(params.values()))
            errors = {}
            with no_grad():
                for (name, p), g in zip(params.items(), grads):
                    pairs = []
                    for idx in _coords(p.shape, n_coords, rng):

                        def set_value(v, p=p, idx=idx):
                            p.data[idx] = v

                        n, frozen = _quotient(lambda: loss_fn().item(), set_value, float(p.data[idx]),
                                              eps, base, (name, idx))
                        pairs.append((float(g[idx]), n, frozen))
                    errors[name] = _worst(pairs, stats, name)
    finally:
        for k, p in params.items():
            p.data, p.grad, p.requires_grad = saved[k]
    return errors
