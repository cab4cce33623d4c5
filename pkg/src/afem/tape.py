"""Reverse-mode tape over numpy arrays.

Every differentiable operation is an :class:`Op` with a ``forward`` that
returns ``(value, ctx)`` and a ``backward`` that maps the output cotangent to
one cotangent per input.  Ops hold configuration only; everything computed
during the forward pass lives in ``ctx``, which lets a recorded graph be
replayed at new control values (:meth:`ReducedFunctional.rebuild`).

Cotangents accumulate: calling :func:`backward` twice without
:meth:`Tape.zero_cotangents` adds the second pass to the first.
"""
from __future__ import annotations

import graphlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, TapeError

_ids = itertools.count()


class Op:
    name = "op"

    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, ctx, cotangent, needs):
        """Return one cotangent (or ``None``) per input; ``needs[i]`` is False
        for inputs whose cotangent will be discarded."""
        raise NotImplementedError

    def __repr__(self):
        return self.name


class Variable:
    __slots__ = ("id", "tape", "value", "cotangent", "op", "parents", "ctx", "requires_grad", "name")

    def __init__(self, tape, value, op=None, parents=(), ctx=None, requires_grad=True, name=None):
        self.id = next(_ids)
        self.tape = tape
        self.value = value
        self.cotangent = None
        self.op = op
        self.parents = tuple(parents)
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.op is None

    def __repr__(self):
        label = self.name or (self.op.name if self.op else "leaf")
        return f"Variable(id={self.id}, {label}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.apply(Add(), self, other)

    def __radd__(self, other):
        return self.tape.apply(Add(), other, self)

    def __sub__(self, other):
        return self.tape.apply(Sub(), self, other)

    def __rsub__(self, other):
        return self.tape.apply(Sub(), other, self)

    def __mul__(self, other):
        return self.tape.apply(Mul(), self, other)

    def __rmul__(self, other):
        return self.tape.apply(Mul(), other, self)

    def __neg__(self):
        return self.tape.apply(Scale(-1.0), self)


def _as_value(x) -> np.ndarray:
    return np.array(x, dtype=np.float64)


class Tape:
    def __init__(self):
        self.nodes: list[Variable] = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value, requires_grad=True, name=None) -> Variable:
        v = Variable(self, _as_value(value), requires_grad=requires_grad, name=name)
        self.nodes.append(v)
        return v

    def constant(self, value, name=None) -> Variable:
        return self.variable(value, requires_grad=False, name=name)

    def lift(self, x) -> Variable:
        if isinstance(x, Variable):
            if x.tape is not self:
                raise TapeError(f"{x!r} belongs to a different tape")
            return x
        return self.constant(x)

    def apply(self, op: Op, *inputs) -> Variable:
        parents = [self.lift(x) for x in inputs]
        value, ctx = op.forward(*(p.value for p in parents))
        v = Variable(
            self,
            _as_value(value),
            op=op,
            parents=parents,
            ctx=ctx,
            requires_grad=any(p.requires_grad for p in parents),
        )
        self.nodes.append(v)
        return v

    def zero_cotangents(self):
        for v in self.nodes:
            v.cotangent = None

    def find(self, op_type: type) -> list[Variable]:
        return [v for v in self.nodes if isinstance(v.op, op_type)]


def _ancestors(output: Variable) -> list[Variable]:
    seen = {output.id: output}
    stack = [output]
    while stack:
        v = stack.pop()
        for p in v.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return list(seen.values())


def topological_order(output: Variable) -> list[Variable]:
    """Ancestors of ``output`` (inclusive), parents before children."""
    nodes = _ancestors(output)
    by_id = {v.id: v for v in nodes}
    sorter = graphlib.TopologicalSorter({v.id: sorted(p.id for p in v.parents) for v in nodes})
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise TapeError(f"tape contains a cycle: {exc.args[1]}") from exc
    return [by_id[i] for i in order]


class ReducedFunctional:
    """An output viewed as a function of the chosen controls only.

    Backward passes visit just the nodes that lie on a path from a control to
    the output.  ``controls=None`` selects every leaf that requires a gradient.
    """

    def __init__(self, output: Variable, controls: Sequence[Variable] | None = None):
        self.output = output
        self.order = topological_order(output)
        on_tape = {v.id for v in output.tape.nodes}
        if controls is None:
            controls = [v for v in self.order if v.is_leaf and v.requires_grad]
        self.controls = list(controls)
        for c in self.controls:
            if not isinstance(c, Variable) or c.id not in on_tape:
                raise TapeError(f"control {c!r} is not on the output's tape")

        control_ids = {c.id for c in self.controls}
        reaches = {}
        for v in self.order:
            reaches[v.id] = v.id in control_ids or (
                v.requires_grad and any(reaches[p.id] for p in v.parents)
            )
        self.relevant = [v for v in self.order if reaches[v.id]]
        self._relevant_ids = {v.id for v in self.relevant}

    def __call__(self, control_values) -> np.ndarray:
        return self.rebuild(control_values).output.value

    def rebuild(self, control_values=None) -> "ReducedFunctional":
        """Replay the recorded graph on a fresh tape, optionally at new control values."""
        new_values = {}
        if control_values is not None:
            if len(control_values) != len(self.controls):
                raise ShapeError(f"expected {len(self.controls)} control values")
            for c, val in zip(self.controls, control_values):
                val = _as_value(val)
                if val.shape != c.shape:
                    raise ShapeError(f"control value shape {val.shape} != {c.shape}")
                new_values[c.id] = val
        tape = Tape()
        mapping: dict[int, Variable] = {}
        for v in self.order:
            if v.id in new_values:
                mapping[v.id] = tape.variable(new_values[v.id], requires_grad=True, name=v.name)
            elif v.is_leaf:
                mapping[v.id] = tape.variable(v.value, requires_grad=v.requires_grad, name=v.name)
            else:
                mapping[v.id] = tape.apply(v.op, *(mapping[p.id] for p in v.parents))
        return ReducedFunctional(mapping[self.output.id], [mapping[c.id] for c in self.controls])

    def control_values(self) -> list[np.ndarray]:
        return [c.value.copy() for c in self.controls]


def backward(rf: ReducedFunctional, seed=None) -> list[np.ndarray]:
    """Propagate ``seed`` from ``rf.output`` back to the controls.

    ``seed`` defaults to 1 for scalar outputs.  Returns the accumulated
    cotangent of every control (zeros for controls the output does not
    depend on).
    """
    out = rf.output
    if seed is None:
        if out.shape != ():
            raise ShapeError(f"a seed is required for non-scalar output of shape {out.shape}")
        seed = 1.0
    seed = _as_value(seed)
    if seed.shape != out.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {out.shape}")

    pending: dict[int, np.ndarray] = {}
    if out.id in rf._relevant_ids:
        pending[out.id] = seed.copy()
    for v in reversed(rf.relevant):
        cot = pending.get(v.id)
        if cot is None or v.is_leaf:
            continue
        needs = tuple(p.id in rf._relevant_ids for p in v.parents)
        grads = v.op.backward(v.ctx, cot, needs)
        for p, g, need in zip(v.parents, grads, needs):
            if not need or g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"{v.op.name} produced cotangent {g.shape} for input {p.shape}")
            if p.id in pending:
                pending[p.id] = pending[p.id] + g
            else:
                pending[p.id] = g.copy()

    for v in rf.relevant:
        if v.id in pending:
            v.cotangent = pending[v.id] if v.cotangent is None else v.cotangent + pending[v.id]
    return [
        c.cotangent.copy() if c.cotangent is not None else np.zeros(c.shape) for c in rf.controls
    ]


def _dot(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return float(sum(np.vdot(x, y) for x, y in zip(a, b)))


def directional_derivative(rf: ReducedFunctional, direction, seed=None) -> float:
    """<seed, dJ . direction> computed with one adjoint pass on a fresh replay."""
    grads = backward(rf.rebuild(), seed)
    return _dot(grads, [_as_value(d) for d in direction])


def finite_difference(rf: ReducedFunctional, direction, h=1e-5, seed=None) -> float:
    """Central-difference estimate of the same quantity as :func:`directional_derivative`."""
    m = rf.control_values()
    d = [_as_value(x) for x in direction]
    plus = rf([mi + h * di for mi, di in zip(m, d)])
    minus = rf([mi - h * di for mi, di in zip(m, d)])
    diff = (plus - minus) / (2 * h)
    w = np.ones(()) if seed is None else _as_value(seed)
    return float(np.vdot(w, diff))


@dataclass
class TaylorResult:
    h: list[float]
    remainders: list[float]
    orders: list[float]
    exact: bool = False
    threshold: float = field(default=1e-12, repr=False)

    def passed(self, lo=1.9, hi=math.inf) -> bool:
        if self.exact:
            return True
        return bool(self.orders) and all(lo <= o <= hi for o in self.orders)

    def __str__(self):
        if self.exact:
            return "exact"
        return ", ".join(f"{o:.3f}" for o in self.orders)


def taylor_test(
    rf: ReducedFunctional,
    control_point=None,
    direction=None,
    h_list: Iterable[float] = (1e-2, 5e-3, 2.5e-3, 1.25e-3),
    gradient=None,
    exact_tol: float = 1e-12,
) -> TaylorResult:
    """Convergence orders of |J(m + h d) - J(m) - h <dJ, d>| over ``h_list``.

    A correct gradient gives orders near 2; a wrong one near 1.  If every
    remainder is below ``exact_tol`` the functional is (numerically) linear
    along ``direction`` and the result is flagged ``exact``.  Passing
    ``gradient`` replaces the adjoint gradient, which is how a deliberately
    wrong gradient can be checked.
    """
    h_list = [float(h) for h in h_list]
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be strictly decreasing")
    base = rf.rebuild(control_point)
    if base.output.shape != ():
        raise ShapeError("taylor_test needs a scalar functional")
    m = base.control_values()
    if direction is None:
        rng = np.random.default_rng(0)
        direction = [rng.standard_normal(x.shape) for x in m]
    d = [_as_value(x) for x in direction]
    j0 = float(base.output.value)
    grads = backward(base) if gradient is None else [_as_value(g) for g in gradient]
    dj = _dot(grads, d)

    rem = []
    for h in h_list:
        jh = float(base([mi + h * di for mi, di in zip(m, d)]))
        rem.append(abs(jh - j0 - h * dj))
    if all(r < exact_tol for r in rem):
        return TaylorResult(h_list, rem, [], exact=True, threshold=exact_tol)
    orders = []
    for (h1, r1), (h2, r2) in zip(zip(h_list, rem), zip(h_list[1:], rem[1:])):
        with np.errstate(all="ignore"):
            orders.append(float(np.log(r1 / r2) / np.log(h1 / h2)) if r1 > 0 and r2 > 0 else math.nan)
    return TaylorResult(h_list, rem, orders, threshold=exact_tol)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b, (a.shape, b.shape)

    def backward(self, ctx, w, needs):
        sa, sb = ctx
        return _unbroadcast(w, sa), _unbroadcast(w, sb)


class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        return a - b, (a.shape, b.shape)

    def backward(self, ctx, w, needs):
        sa, sb = ctx
        return _unbroadcast(w, sa), _unbroadcast(-w, sb)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b, (a, b)

    def backward(self, ctx, w, needs):
        a, b = ctx
        return (
            _unbroadcast(w * b, a.shape) if needs[0] else None,
            _unbroadcast(w * a, b.shape) if needs[1] else None,
        )


class Scale(Op):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def forward(self, a):
        return self.factor * a, None

    def backward(self, ctx, w, needs):
        return (self.factor * w,)


class Sum(Op):
    name = "sum"

    def forward(self, a):
        return a.sum(), a.shape

    def backward(self, ctx, w, needs):
        return (np.broadcast_to(w, ctx).copy(),)


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return a.reshape(self.shape), a.shape

    def backward(self, ctx, w, needs):
        return (w.reshape(ctx),)


class Tanh(Op):
    name = "tanh"

    def forward(self, a):
        y = np.tanh(a)
        return y, y

    def backward(self, ctx, w, needs):
        return (w * (1.0 - ctx * ctx),)


class Relu(Op):
    name = "relu"

    def forward(self, a):
        mask = a > 0
        return np.where(mask, a, 0.0), mask

    def backward(self, ctx, w, needs):
        return (np.where(ctx, w, 0.0),)


def add(a, b, tape=None):
    return _tape_of(tape, a, b).apply(Add(), a, b)


def mul(a, b, tape=None):
    return _tape_of(tape, a, b).apply(Mul(), a, b)


def vsum(a):
    return a.tape.apply(Sum(), a)


def reshape(a, shape):
    return a.tape.apply(Reshape(shape), a)


def tanh(a):
    return a.tape.apply(Tanh(), a)


def relu(a):
    return a.tape.apply(Relu(), a)


def _tape_of(tape, *xs) -> Tape:
    if tape is not None:
        return tape
    for x in xs:
        if isinstance(x, Variable):
            return x.tape
    raise TapeError("no tape given and no Variable among the inputs")
