"""Define-by-run reverse-mode differentiation on an explicit tape.

A :class:`Tape` records every operation of one forward pass in topological
order.  :func:`backward` walks it in reverse and returns a *GradMap*
(``dict`` node id -> gradient array) holding the gradients of all parameter
nodes and of every node flagged with :meth:`Tape.retain`.  Gradients of
other intermediates are dropped as soon as they have been propagated.

The tape is never consumed by a backward pass, so the same forward pass can
be differentiated several times (per-example losses, or the two passes of
loss reweighting).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError

GradMap = dict  # node id -> np.ndarray

# vjp(upstream, needs) -> one gradient (or None) per parent
Vjp = Callable[[np.ndarray, Sequence[bool]], Sequence]


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Tape:
    """Topologically ordered record of a forward computation."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Vjp | None] = []
        self.kinds: list[str] = []
        self.grad_leaf: list[bool] = []
        self.retained: set[int] = set()
        self.params: dict[str, Var] = {}

    def __len__(self):
        return len(self.values)

    def _push(self, value, parents, vjp, kind, grad_leaf=False) -> Var:
        self.values.append(value)
        self.parents.append(tuple(parents))
        self.vjps.append(vjp)
        self.kinds.append(kind)
        self.grad_leaf.append(grad_leaf)
        return Var(self, len(self.values) - 1)

    def constant(self, value) -> Var:
        """A leaf that never receives a gradient unless retained."""
        return self._push(np.asarray(value, dtype=T.DTYPE), (), None, "const")

    def input(self, value, requires_grad: bool = False) -> Var:
        return self._push(np.asarray(value, dtype=T.DTYPE), (), None, "input", requires_grad)

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        var = self._push(value, (), None, "param", True)
        self.params[name] = var
        return var

    def record(self, value: np.ndarray, parents: Sequence[Var], vjp: Vjp, kind: str) -> Var:
        return self._push(value, [p.id for p in parents], vjp, kind)

    def retain(self, node) -> None:
        node_id = node.id if isinstance(node, Var) else int(node)
        if not 0 <= node_id < len(self.values):
            raise ContractError(f"unknown node id {node_id}")
        self.retained.add(node_id)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("operands belong to different tapes")
            return x
        return self.constant(x)

    def _live(self, params: bool = True) -> list[bool]:
        # a node can carry a gradient iff it is a gradient leaf, retained, or
        # depends on one
        live = [False] * len(self.values)
        leaf = self.grad_leaf
        if not params:
            pids = {v.id for v in self.params.values()}
            leaf = [g and i not in pids for i, g in enumerate(leaf)]
        for i, ps in enumerate(self.parents):
            live[i] = leaf[i] or i in self.retained or any(live[p] for p in ps)
        return live


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("at least one operand must be a Var")


def backward(tape: Tape, loss: Var, seed: np.ndarray | None = None,
             live: list[bool] | None = None, params: bool = True) -> GradMap:
    """Gradients of the scalar ``loss`` w.r.t. every parameter and retained node.

    ``seed`` overrides the upstream gradient of ``loss`` (default 1.0), which
    makes the pass linear in it.  With ``params=False`` only retained nodes
    are reported and parameter gradients are never formed.
    """
    if loss.tape is not tape:
        raise ContractError("loss node belongs to another tape")
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if live is None:
        live = tape._live(params)
    keep = set(tape.retained)
    if params:
        keep.update(v.id for v in tape.params.values())
    grads: dict[int, np.ndarray] = {}
    grads[loss.id] = np.ones((), dtype=T.DTYPE) if seed is None else np.asarray(seed, dtype=T.DTYPE)
    out: GradMap = {}
    for i in range(loss.id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if i in keep:
            out[i] = g
        vjp = tape.vjps[i]
        ps = tape.parents[i]
        if vjp is None or not ps:
            continue
        needs = [live[p] for p in ps]
        if not any(needs):
            continue
        for p, need, pg in zip(ps, needs, vjp(g, needs)):
            if not need or pg is None:
                continue
            prev = grads.get(p)
            grads[p] = pg if prev is None else prev + pg
    for i in keep:
        if i not in out and i <= loss.id:
            out[i] = np.zeros_like(tape.values[i])
    return out


def backward_per_example(tape: Tape, losses: Sequence[Var]) -> list[GradMap]:
    """One full backward pass per scalar loss over a shared forward tape."""
    live = tape._live()
    return [backward(tape, loss, live=live) for loss in losses]


def param_grads(tape: Tape, grads: GradMap) -> dict[str, np.ndarray]:
    """Re-key a GradMap by parameter name."""
    return {name: grads.get(v.id, np.zeros_like(v.value)) for name, v in tape.params.items()}


# ---------------------------------------------------------------- helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                                     _unbroadcast(g, sb) if n[1] else None), "add")


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                                     _unbroadcast(-g, sb) if n[1] else None), "sub")


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g, n: (_unbroadcast(g * bv, av.shape) if n[0] else None,
                                     _unbroadcast(g * av, bv.shape) if n[1] else None), "mul")


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(out, (a, b),
                       lambda g, n: (_unbroadcast(g / bv, av.shape) if n[0] else None,
                                     _unbroadcast(-g * out / bv, bv.shape) if n[1] else None),
                       "div")


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g, n: (-g,), "neg")


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g, n: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Var) -> Var:
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return a.tape.record(out, (a,), lambda g, n: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(a.value * mask, (a,), lambda g, n: (g * mask,), "relu")


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g, n: (g * out,), "exp")


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g, n: (g / av,), "log")


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g, n: (0.5 * g / out,), "sqrt")


def softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, n):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return a.tape.record(out, (a,), vjp, "softmax")


def log_softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return a.tape.record(out, (a,),
                         lambda g, n: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- reductions & shape


def reduce_sum(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape

    def vjp(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def vjp(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return a.tape.record(np.mean(a.value, axis=axis, keepdims=keepdims), (a,), vjp, "mean")


def reshape(a: Var, shape) -> Var:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return a.tape.record(out, (a,), lambda g, n: (g.reshape(old),), "reshape")


def transpose(a: Var, axes=None) -> Var:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return a.tape.record(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                         lambda g, n: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def _is_basic(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in idx)


def getitem(a: Var, index) -> Var:
    shape = a.shape
    basic = _is_basic(index)

    def vjp(g, n):
        out = np.zeros(shape, dtype=T.DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return a.tape.record(np.array(a.value[index], dtype=T.DTYPE), (a,), vjp, "getitem")


def stack(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    out = np.stack([x.value for x in xs], axis=axis)

    def vjp(g, n):
        return [np.take(g, i, axis=axis) if need else None for i, need in enumerate(n)]

    return tape.record(out, xs, vjp, "stack")


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, n):
        gs = []
        for i, need in enumerate(n):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            gs.append(g[tuple(sl)] if need else None)
        return gs

    return tape.record(np.concatenate([x.value for x in xs], axis=axis), xs, vjp, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Var:
    """Matrix product with numpy batch broadcasting over leading axes."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}") from exc

    def vjp(g, n):
        ga = gb = None
        if n[0]:
            ga = _unbroadcast(np.matmul(g, _swap(bv)), av.shape)
        if n[1]:
            if av.ndim > 2 and bv.ndim == 2:
                # fold batch axes into rows: one GEMM instead of a batched one
                k = av.shape[-1]
                gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(_swap(av), g), bv.shape)
        return ga, gb

    return tape.record(out, (a, b), vjp, "matmul")


def bmm(a: Var, b: Var) -> Var:
    T.bmm(a.value, b.value)  # shape validation
    return matmul(a, b)


def unfold(x: Var, kernel: Sequence[int], stride: int = 1, padding: int = 0) -> Var:
    """im2col as a tape op, for 2-D (``len(kernel) == 2``) or 3-D kernels."""
    kernel = tuple(kernel)
    shape = x.shape
    cols = T._unfold(x.value, kernel, stride, padding)
    return x.tape.record(cols, (x,),
                         lambda g, n: (T._fold(g, shape, kernel, stride, padding),), "im2col")


def maxpool(x: Var, size: int, stride: int | None = None) -> Var:
    """Max-pooling over the trailing spatial axes with a square window.

    Trailing rows/columns that do not fill a whole window are discarded.
    """
    stride = size if stride is None else stride
    if stride != size:
        raise DimensionError("maxpool supports non-overlapping windows only (stride == size)")
    xv = x.value
    nd = xv.ndim - 2
    spatial = xv.shape[2:]
    out_sp = tuple(s // size for s in spatial)
    if any(o < 1 for o in out_sp):
        raise DimensionError(f"pool window {size} larger than input extent {spatial}")
    crop = xv[(slice(None), slice(None), *(slice(0, o * size) for o in out_sp))]
    shp = [*xv.shape[:2]]
    for o in out_sp:
        shp += [o, size]
    win = crop.reshape(shp)
    win_axes = tuple(3 + 2 * i for i in range(nd))
    out = win.max(axis=win_axes)
    # ties go to every maximal entry; split the gradient evenly among them
    mask = win == np.expand_dims(out, win_axes)
    mask = mask / mask.sum(axis=win_axes, keepdims=True)

    def vjp(g, n):
        gw = mask * np.expand_dims(g, win_axes)
        full = np.zeros(xv.shape, dtype=T.DTYPE)
        full[(slice(None), slice(None), *(slice(0, o * size) for o in out_sp))] = gw.reshape(crop.shape)
        return (full,)

    return x.tape.record(np.ascontiguousarray(out), (x,), vjp, "maxpool")


def cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Per-example softmax cross-entropy; returns a [t] vector of losses."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [t, k] logits and [t] targets, got "
                             f"{logits.shape} and {targets.shape}")
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=T.DTYPE)
    onehot[np.arange(len(targets)), targets] = 1.0
    return neg(reduce_sum(mul(logp, onehot), axis=1))


def split_losses(losses: Var) -> list[Var]:
    """Scalar views ``losses[i]`` suitable for :func:`backward_per_example`."""
    return [getitem(losses, i) for i in range(losses.shape[0])]

