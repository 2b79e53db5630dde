"""Eager reverse-mode differentiation on an explicit tape.

Every op computes its value immediately and appends a node holding a
backward closure. ``Tape.backward`` replays the nodes in reverse recording
order, accumulating gradients additively, so a value used twice receives
the sum of both path gradients.

Parameters are plain arrays owned by models. ``Tape.param`` wraps an array
once per tape (keyed on identity), which lets a training step read the
gradient back with ``Tape.grad_for(array)``.
"""
from __future__ import annotations

import builtins
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, UsageError


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, tape, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self._params: dict[int, tuple] = {}

    def leaf(self, value, requires_grad=False, name=None) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self, requires_grad, name=name)
        self.nodes.append(v)
        return v

    def param(self, array: np.ndarray, requires_grad=True) -> Var:
        """Var wrapping a model-owned array; one Var per array per tape."""
        entry = self._params.get(id(array))
        if entry is None:
            var = Var(array, self, requires_grad)
            self.nodes.append(var)
            # keep the array alive so its id cannot be recycled mid-tape
            self._params[id(array)] = entry = (var, array)
        return entry[0]

    def grad_for(self, array: np.ndarray):
        entry = self._params.get(id(array))
        return None if entry is None else entry[0].grad

    def record(self, value, parents, backward_fn) -> Var:
        """Append a computed node. ``backward_fn(g)`` returns one gradient per parent."""
        needs = any(p.requires_grad for p in parents)
        v = Var(value, self, needs, tuple(parents), backward_fn if needs else None)
        self.nodes.append(v)
        return v

    def backward(self, out: Var, grad=None):
        if out.tape is not self:
            raise UsageError("backward called on a Var from another tape")
        if grad is None:
            if out.value.size != 1:
                raise ShapeError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(out.value)
        out.grad = _accumulate(out.grad, np.asarray(grad, dtype=np.float64))
        for node in reversed(self.nodes):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = _accumulate(parent.grad, g)

    def zero_grad(self):
        for node in self.nodes:
            node.grad = None

    def release(self):
        """Drop recorded nodes so their buffers are freed without waiting for gc.

        Vars already handed out keep their values; the tape cannot be
        backpropagated afterwards.
        """
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
        self.nodes = []
        self._params = {}


def _accumulate(current, g):
    return g.copy() if current is None else current + g


def _tape_of(*operands) -> Tape:
    tape = None
    for op in operands:
        if isinstance(op, Var):
            if tape is None:
                tape = op.tape
            elif op.tape is not tape:
                raise UsageError("operands belong to different tapes")
    if tape is None:
        raise UsageError("at least one operand must be a Var")
    return tape


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), tape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def abs(x: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.value)
    return x.tape.record(np.abs(x.value), (x,), lambda g: (g * s,))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape.record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


# ---------------------------------------------------------------- reductions

def sum(x: Var, axis=None, keepdims=False) -> Var:  # noqa: A001
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record(np.asarray(out, dtype=np.float64), (x,), back)


def mean(x: Var, axis=None, keepdims=False) -> Var:
    shape = x.shape
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(shape[a] for a in axes)
    out = np.mean(x.value, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return x.tape.record(np.asarray(out, dtype=np.float64), (x,), back)


# ---------------------------------------------------------------- structure

def reshape(x: Var, shape) -> Var:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {shape}") from None
    return x.tape.record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Var, axes) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return x.tape.record(np.ascontiguousarray(x.value.transpose(axes)), (x,),
                         lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(xs, axis=0) -> Var:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tape.record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a, b) -> Var:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} are incompatible")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return tape.record(av @ bv, (a, b), back)


# ---------------------------------------------------------------- image ops

def _im2col(xp, k, stride, ho, wo):
    """Patches ``[N, ho, wo, k, k, C]`` from a channels-last padded input."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x: Var, w, b=None, stride=1, padding=0) -> Var:
    """Cross-correlation of ``x[N, Cin, H, W]`` with ``w[Cout, Cin, k, k]``."""
    tape = _tape_of(x, w, *([b] if b is not None else []))
    x, w = _lift(tape, x), _lift(tape, w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or wv.shape[1] != xv.shape[1] or wv.shape[2] != wv.shape[3]:
        raise ShapeError(f"conv2d shapes {xv.shape} and {wv.shape} are incompatible")
    n, cin, h, wd = xv.shape
    cout, _, k, _ = wv.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} too large for input {h}x{wd} with padding {padding}")
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin))
    xp[:, padding:padding + h, padding:padding + wd] = xv.transpose(0, 2, 3, 1)
    cols_mat = _im2col(xp, k, stride, ho, wo).reshape(n * ho * wo, k * k * cin)
    w_mat = wv.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = (cols_mat @ w_mat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = _lift(tape, b)
        out = out + b.value.reshape(1, cout, 1, 1)
        parents.append(b)
    out = np.ascontiguousarray(out)

    def back(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g_mat.T @ cols_mat).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        dcols = (g_mat @ w_mat).reshape(n, ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + wd].transpose(0, 3, 1, 2)
        grads = [np.ascontiguousarray(gx), np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return tape.record(out, tuple(parents), back)


def upsample_nearest_2x(x: Var) -> Var:
    n, c, h, w = x.shape
    out = x.value.repeat(2, axis=2).repeat(2, axis=3)
    return x.tape.record(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- estimators

class _SteReplay:
    """Offsets ``q - x`` captured at a reference point and replayed later."""

    def __init__(self):
        self.offsets = []
        self.recording = True
        self.pos = 0


_ste_replay: _SteReplay | None = None


def straight_through(x: Var, q) -> Var:
    """Forward value ``q``; backward passes the upstream gradient to ``x`` unchanged."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != x.shape:
        raise ShapeError(f"straight_through shapes differ: {x.shape} vs {q.shape}")
    value = q.copy()
    state = _ste_replay
    if state is not None:
        if state.recording:
            state.offsets.append(q - x.value)
        else:
            value = x.value + state.offsets[state.pos]
            state.pos += 1
    return x.tape.record(value, (x,), lambda g: (g,))


def stop_gradient(x: Var) -> np.ndarray:
    return x.value.copy()


# ---------------------------------------------------------------- checking

def grad_check(f, point, step=1e-5) -> float:
    """Max over inputs of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` receives one Var per array in ``point`` and must return a scalar Var.
    Straight-through nodes are differenced as identity maps: the offset
    ``q - x`` seen at ``point`` is held fixed while inputs are perturbed.
    """
    global _ste_replay
    arrays = [np.array(p, dtype=np.float64) for p in point] if isinstance(point, (list, tuple)) \
        else [np.array(point, dtype=np.float64)]
    replay = _SteReplay()
    _ste_replay = replay
    try:
        tape = Tape()
        inputs = [tape.leaf(a, requires_grad=True) for a in arrays]
        out = f(*inputs)
        if out.value.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        tape.backward(out)
        analytic = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in inputs]
        replay.recording = False

        def evaluate(vals):
            replay.pos = 0
            t = Tape()
            val = float(f(*[t.leaf(a) for a in vals]).value)
            if not math.isfinite(val):
                raise NumericError("function value is not finite during grad_check")
            return val

        worst = 0.0
        for i, a in enumerate(arrays):
            flat = a.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = evaluate(arrays)
                flat[j] = orig - step
                fm = evaluate(arrays)
                flat[j] = orig
                numeric = (fp - fm) / (2.0 * step)
                ana = analytic[i].reshape(-1)[j]
                if not math.isfinite(ana):
                    raise NumericError("analytic gradient is not finite")
                worst = max(worst, builtins.abs(ana - numeric) / max(1.0, builtins.abs(ana)))
        return worst
    finally:
        _ste_replay = None


# ---------------------------------------------------------------- optimizers

def _check_pairs(params, grads):
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, expected {p.shape}")


def sgd_step(params: dict, grads: dict, lr: float):
    _check_pairs(params, grads)
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            p -= lr * g


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    _check_pairs(params, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0) -> float:
    if total_steps <= 1:
        return base_lr
    frac = min(step, total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
