"""Array-valued reverse-mode differentiation.

A :class:`Tape` records elementary numpy operations as nodes.  Each node keeps
only the arrays its backward rule declares as *saved*, and the tape can report
how many bytes those arrays occupy.  That byte count is what makes the
difference between a naively taped coherent PSF (which saves ray x grid
broadcast intermediates) and the custom PSF node (which saves only per-ray and
per-grid inputs) measurable.

The module-level functions (:func:`sqrt`, :func:`sin`, ...) accept either
plain numpy values or :class:`Var` objects, so the same geometric code runs
untaped (fast numpy) or taped (differentiable).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class UnsupportedPrimitive(ValueError):
    pass


class ArityError(ValueError):
    pass


@dataclass
class Node:
    name: str
    parents: tuple  # parent node index per operand, None for constants
    shapes: tuple  # operand shapes, for unbroadcasting
    vjp: Callable | None = None
    saved: tuple = ()
    params: dict = field(default_factory=dict)
    custom: bool = False

    @property
    def saved_bytes(self) -> int:
        return sum(np.asarray(a).nbytes for a in self.saved)


@dataclass(frozen=True)
class Primitive:
    forward: Callable  # (*values, **params) -> (out, saved)
    vjp: Callable  # (g, saved, shapes, **params) -> tuple of operand cotangents


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make numpy operands defer to the reflected operators

    def __init__(self, tape: "Tape", index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.nodes[self.index].name}, value={self.value!r})"

    def __float__(self):
        return float(self.value)

    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        return self.tape.record("mul", self, other)

    def __rmul__(self, other):
        return self.tape.record("mul", other, self)

    def __truediv__(self, other):
        return self.tape.record("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.record("div", other, self)

    def __neg__(self):
        return self.tape.record("neg", self)

    def __pow__(self, exponent):
        if isinstance(exponent, Var):
            raise UnsupportedPrimitive("only constant exponents are supported")
        return self.tape.record("power", self, exponent=float(exponent))

    def __abs__(self):
        return self.tape.record("abs", self)

    def __getitem__(self, index):
        return self.tape.record("getitem", self, index=index)

    # comparisons act on values and return plain boolean arrays
    def __lt__(self, other):
        return np.asarray(self.value < value(other))

    def __le__(self, other):
        return np.asarray(self.value <= value(other))

    def __gt__(self, other):
        return np.asarray(self.value > value(other))

    def __ge__(self, other):
        return np.asarray(self.value >= value(other))

    def sum(self, axis=None):
        return self.tape.record("sum", self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", self, shape=shape)


def value(x):
    """Underlying numpy value of a Var (or the argument itself)."""
    return x.value if isinstance(x, Var) else x


def is_var(x) -> bool:
    return isinstance(x, Var)


# ---------------------------------------------------------------------------
# primitive rules
# ---------------------------------------------------------------------------


def _fwd_add(a, b):
    return a + b, ()


def _vjp_add(g, saved, shapes):
    return _unbroadcast(g, shapes[0]), _unbroadcast(g, shapes[1])


def _fwd_sub(a, b):
    return a - b, ()


def _vjp_sub(g, saved, shapes):
    return _unbroadcast(g, shapes[0]), _unbroadcast(-g, shapes[1])


def _fwd_mul(a, b):
    return a * b, (a, b)


def _vjp_mul(g, saved, shapes):
    a, b = saved
    return _unbroadcast(g * b, shapes[0]), _unbroadcast(g * a, shapes[1])


def _fwd_div(a, b):
    return a / b, (a, b)


def _vjp_div(g, saved, shapes):
    a, b = saved
    return _unbroadcast(g / b, shapes[0]), _unbroadcast(-g * a / (b * b), shapes[1])


def _fwd_neg(a):
    return -a, ()


def _vjp_neg(g, saved, shapes):
    return (-g,)


def _fwd_power(a, exponent):
    return np.power(a, exponent), (a,)


def _vjp_power(g, saved, shapes, exponent):
    (a,) = saved
    return (g * exponent * np.power(a, exponent - 1.0),)


def _fwd_sqrt(a):
    out = np.sqrt(a)
    return out, (out,)


def _vjp_sqrt(g, saved, shapes):
    (out,) = saved
    return (g * 0.5 / out,)


def _fwd_sin(a):
    return np.sin(a), (a,)


def _vjp_sin(g, saved, shapes):
    return (g * np.cos(saved[0]),)


def _fwd_cos(a):
    return np.cos(a), (a,)


def _vjp_cos(g, saved, shapes):
    return (-g * np.sin(saved[0]),)


def _fwd_exp(a):
    out = np.exp(a)
    return out, (out,)


def _vjp_exp(g, saved, shapes):
    return (g * saved[0],)


def _fwd_log(a):
    return np.log(a), (a,)


def _vjp_log(g, saved, shapes):
    return (g / saved[0],)


def _fwd_abs(a):
    return np.abs(a), (np.sign(a),)


def _vjp_abs(g, saved, shapes):
    return (g * saved[0],)


def _fwd_maximum(a, b):
    pick_a = np.asarray(a > b)
    return np.where(pick_a, a, b), (pick_a,)


def _fwd_minimum(a, b):
    pick_a = np.asarray(a < b)
    return np.where(pick_a, a, b), (pick_a,)


def _vjp_select(g, saved, shapes):
    (pick_a,) = saved
    return (
        _unbroadcast(np.where(pick_a, g, 0.0), shapes[0]),
        _unbroadcast(np.where(pick_a, 0.0, g), shapes[1]),
    )


def _fwd_where(a, b, cond):
    return np.where(cond, a, b), (cond,)


def _vjp_where(g, saved, shapes, cond):
    return _vjp_select(g, saved, shapes)


def _fwd_sum(a, axis):
    return np.sum(a, axis=axis), ()


def _vjp_sum(g, saved, shapes, axis):
    shape = shapes[0]
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _fwd_reshape(a, shape):
    return np.reshape(a, shape), ()


def _vjp_reshape(g, saved, shapes, shape):
    return (np.reshape(g, shapes[0]),)


def _fwd_getitem(a, index):
    return np.asarray(a)[index], ()


def _vjp_getitem(g, saved, shapes, index):
    out = np.zeros(shapes[0])
    np.add.at(out, index, g)
    return (out,)


def _fwd_stack(*vals, axis):
    return np.stack(np.broadcast_arrays(*vals), axis=axis), ()


def _vjp_stack(g, saved, shapes, axis):
    parts = np.moveaxis(g, axis, 0)
    return tuple(_unbroadcast(p, s) for p, s in zip(parts, shapes))


def _fwd_concatenate(*vals, axis):
    return np.concatenate(vals, axis=axis), ()


def _vjp_concatenate(g, saved, shapes, axis):
    sizes = [s[axis] for s in shapes]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _fwd_dot(a, b):
    return np.sum(a * b, axis=-1), (a, b)


def _vjp_dot(g, saved, shapes):
    a, b = saved
    g = np.expand_dims(g, -1)
    return _unbroadcast(g * b, shapes[0]), _unbroadcast(g * a, shapes[1])


def _fwd_cross(a, b):
    return np.cross(a, b), (a, b)


def _vjp_cross(g, saved, shapes):
    a, b = saved
    return _unbroadcast(np.cross(b, g), shapes[0]), _unbroadcast(np.cross(g, a), shapes[1])


def _fwd_norm(a):
    n = np.sqrt(np.sum(a * a, axis=-1))
    return n, (a, n)


def _vjp_norm(g, saved, shapes):
    a, n = saved
    return (np.expand_dims(g / n, -1) * a,)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(_fwd_add, _vjp_add),
    "sub": Primitive(_fwd_sub, _vjp_sub),
    "mul": Primitive(_fwd_mul, _vjp_mul),
    "div": Primitive(_fwd_div, _vjp_div),
    "neg": Primitive(_fwd_neg, _vjp_neg),
    "power": Primitive(_fwd_power, _vjp_power),
    "sqrt": Primitive(_fwd_sqrt, _vjp_sqrt),
    "sin": Primitive(_fwd_sin, _vjp_sin),
    "cos": Primitive(_fwd_cos, _vjp_cos),
    "exp": Primitive(_fwd_exp, _vjp_exp),
    "log": Primitive(_fwd_log, _vjp_log),
    "abs": Primitive(_fwd_abs, _vjp_abs),
    "maximum": Primitive(_fwd_maximum, _vjp_select),
    "minimum": Primitive(_fwd_minimum, _vjp_select),
    "where": Primitive(_fwd_where, _vjp_where),
    "sum": Primitive(_fwd_sum, _vjp_sum),
    "reshape": Primitive(_fwd_reshape, _vjp_reshape),
    "getitem": Primitive(_fwd_getitem, _vjp_getitem),
    "stack": Primitive(_fwd_stack, _vjp_stack),
    "concatenate": Primitive(_fwd_concatenate, _vjp_concatenate),
    "dot": Primitive(_fwd_dot, _vjp_dot),
    "cross": Primitive(_fwd_cross, _vjp_cross),
    "norm": Primitive(_fwd_norm, _vjp_norm),
}


class Gradients:
    """Cotangents of one backward pass, looked up by leaf Var."""

    def __init__(self, grads: dict[int, np.ndarray], tape: "Tape"):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads.get(var.index)
        if g is None:
            return np.zeros(np.shape(var.value))
        return g

    def __contains__(self, var: Var) -> bool:
        return var.index in self._grads


class Tape:
    """Linear record of operations for reverse accumulation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node, out) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, out)

    def variable(self, x, name: str = "leaf") -> Var:
        v = np.asarray(x, dtype=float)
        return self._push(Node(name, (), ()), v.copy() if v.ndim else v)

    def _operand(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand belongs to a different tape")
            return x.index, x.value
        return None, x

    def record(self, name: str, *operands, **params) -> Var:
        """Apply primitive ``name`` to the operands and record it."""
        try:
            prim = PRIMITIVES[name]
        except KeyError:
            raise UnsupportedPrimitive(f"no primitive named {name!r}") from None
        parents, vals = zip(*(self._operand(x) for x in operands))
        out, saved = prim.forward(*vals, **params)
        shapes = tuple(np.shape(v) for v in vals)
        if name == "where":
            saved = (np.asarray(params["cond"]),)
        elif name == "getitem" and isinstance(params["index"], np.ndarray):
            saved = (params["index"],)
        node = Node(name, tuple(parents), shapes, prim.vjp, tuple(saved), params)
        return self._push(node, out)

    def register_custom(
        self,
        forward: Callable[..., tuple[Any, tuple]],
        backward: Callable[..., Sequence],
        inputs: Sequence,
        name: str = "custom",
    ) -> Var:
        """Record a node with a hand-written adjoint.

        ``forward(*input_values)`` returns ``(output, saved)``;
        ``backward(g, *saved)`` returns one cotangent per input (``None`` for
        inputs that receive nothing).  Only ``saved`` is retained between the
        passes and only ``saved`` counts toward :meth:`saved_bytes`.
        """
        parents, vals = zip(*(self._operand(x) for x in inputs))
        out, saved = forward(*vals)
        n_in = len(inputs)

        def vjp(g, saved, shapes):
            cts = tuple(backward(g, *saved))
            if len(cts) != n_in:
                raise ArityError(
                    f"{name}: backward returned {len(cts)} cotangents for {n_in} inputs"
                )
            return cts

        shapes = tuple(np.shape(v) for v in vals)
        node = Node(name, tuple(parents), shapes, vjp, tuple(saved), custom=True)
        return self._push(node, out)

    def saved_bytes(self, start: int = 0, stop: int | None = None) -> int:
        """Bytes held by saved arrays of nodes ``start:stop`` (each array once)."""
        seen: set[int] = set()
        total = 0
        for node in self.nodes[start:stop]:
            for a in node.saved:
                if id(a) in seen:
                    continue
                seen.add(id(a))
                total += np.asarray(a).nbytes
        return total

    def backward(self, output: Var, seed=None, wrt: Sequence[Var] | None = None) -> Gradients:
        """Reverse accumulation from ``output``.

        Returns cotangents for every leaf.  If ``wrt`` is given and none of
        those leaves is reachable from the output, a warning is emitted and
        all their gradients read as zero.
        """
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if seed is None:
            seed = np.ones(np.shape(output.value))
        cot: dict[int, np.ndarray] = {output.index: np.asarray(seed, dtype=float)}
        leaves: dict[int, np.ndarray] = {}
        for i in range(output.index, -1, -1):
            g = cot.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                leaves[i] = g
                continue
            pgs = node.vjp(g, node.saved, node.shapes, **node.params)
            for p, pg in zip(node.parents, pgs):
                if p is None or pg is None:
                    continue
                pg = np.asarray(pg, dtype=float)
                if p in cot:
                    cot[p] = cot[p] + pg
                else:
                    cot[p] = pg
        if wrt is not None and wrt and not any(v.index in leaves for v in wrt):
            warnings.warn("loss is not connected to any requested parameter", RuntimeWarning)
        return Gradients(leaves, self)


# ---------------------------------------------------------------------------
# dual-dispatch operations
# ---------------------------------------------------------------------------


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unary(name, npfn):
    def op(x):
        if isinstance(x, Var):
            return x.tape.record(name, x)
        return npfn(x)

    op.__name__ = name
    return op


sqrt = _unary("sqrt", np.sqrt)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
exp = _unary("exp", np.exp)
log = _unary("log", np.log)
absolute = _unary("abs", np.abs)
norm = _unary("norm", lambda a: np.sqrt(np.sum(np.asarray(a) * a, axis=-1)))


def maximum(a, b):
    """Elementwise max; ties take the second operand's branch."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.maximum(a, b)
    return tape.record("maximum", a, b)


def minimum(a, b):
    """Elementwise min; ties take the second operand's branch."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.minimum(a, b)
    return tape.record("minimum", a, b)


def where(cond, a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.where(cond, a, b)
    return tape.record("where", a, b, cond=np.asarray(cond))


def sum(x, axis=None):  # noqa: A001
    if isinstance(x, Var):
        return x.tape.record("sum", x, axis=axis)
    return np.sum(x, axis=axis)


def mean(x, axis=None):
    n = np.size(value(x)) if axis is None else np.shape(value(x))[axis]
    return sum(x, axis=axis) / n


def stack(xs, axis=0):
    tape = _tape_of(*xs)
    if tape is None:
        return np.stack(np.broadcast_arrays(*xs), axis=axis)
    return tape.record("stack", *xs, axis=axis)


def concatenate(xs, axis=0):
    tape = _tape_of(*xs)
    if tape is None:
        return np.concatenate(xs, axis=axis)
    return tape.record("concatenate", *xs, axis=axis)


def dot(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.sum(np.asarray(a) * b, axis=-1)
    return tape.record("dot", a, b)


def cross(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.cross(a, b)
    return tape.record("cross", a, b)


def expi(phase):
    """Unit phasor ``exp(i*phase)`` as its (real, imaginary) pair."""
    return cos(phase), sin(phase)


def finite_difference(f: Callable[[np.ndarray], float], x0, steps, order: int = 2) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    ``order=4`` uses the five-point stencil, which tolerates larger steps and
    therefore less round-off.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x0 = np.asarray(x0, dtype=float)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), x0.shape)
    g = np.zeros_like(x0)

    def at(i, h):
        x = x0.copy()
        x.flat[i] += h
        return f(x)

    for i in range(x0.size):
        h = steps.flat[i]
        if order == 2:
            g.flat[i] = (at(i, h) - at(i, -h)) / (2.0 * h)
        else:
            g.flat[i] = (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2 * h) - at(i, -2 * h))) / (12.0 * h)
    return g
