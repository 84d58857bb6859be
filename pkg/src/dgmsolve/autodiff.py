"""Reverse-mode differentiation over batched numpy arrays.

The engine has two cooperating layers:

* a flat tape of ``Node`` objects recording array-valued operations, walked
  backwards once to obtain exact parameter gradients of a scalar loss;
* ``Jet`` objects carrying first- and second-order Taylor coefficients of a
  quantity along the PDE input directions (time and each state coordinate).

Input derivatives are propagated *forward* through hand-derived jet rules
while every coefficient is itself recorded on the tape, so expressions built
from values, time/space derivatives and second derivatives stay exactly
differentiable with respect to the parameters in a single reverse sweep.

All operations accept plain numpy arrays (or scalars) in place of nodes.  If
no argument is a ``Node`` the result is a plain array, which is how frozen
networks and closed-form reference solutions are evaluated without paying
any taping cost.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple

import numpy as np


class InputError(ValueError):
    """Malformed input: dimension mismatch, empty batch, bad configuration."""


class NumericError(ArithmeticError):
    """A non-finite value surfaced where a finite number is required."""


# ---------------------------------------------------------------------------
# tape and nodes
# ---------------------------------------------------------------------------


class Tape:
    """Identity of one differentiable computation.

    The tape itself only hands out creation indices; the graph lives in the
    nodes' parent links, so an evaluation is freed by reference counting the
    moment its loss node goes out of scope.  A tape is private to a single
    evaluation; concurrent evaluations must each own their tape.
    """

    __slots__ = ("_n",)

    def __init__(self):
        self._n = 0

    def next_idx(self) -> int:
        self._n += 1
        return self._n

    def leaf(self, value, name: str | None = None) -> "Node":
        return Node(self, np.asarray(value, dtype=float), name=name)

    def wrap(self, arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, "Node"]:
        """Register a dict of parameter arrays as named leaf nodes."""
        return {k: self.leaf(v, prefix + k) for k, v in arrays.items()}


class Node:
    """One array in the graph plus the local backward rule that produced it."""

    __slots__ = ("tape", "value", "idx", "parents", "vjp", "name")

    # make ndarray <op> Node defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, value: np.ndarray, parents=(), vjp=None,
                 name: str | None = None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.idx = tape.next_idx()

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; constants stay plain arrays and are folded into vjps
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return powi(self, k)

    def __repr__(self):
        return f"Node(shape={np.shape(self.value)}, idx={self.idx})"


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def value_of(x):
    """Underlying array of a node, or the argument itself."""
    return x.value if isinstance(x, Node) else x


def detach(x):
    """Constant copy of ``x``: drops any tape history."""
    return np.asarray(value_of(x))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = fwd(va, vb)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(vjp_a(g, va, vb), np.shape(va)))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(vjp_b(g, va, vb), np.shape(vb)))
    return Node(tape, out, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def add(a, b):
    return _binary(a, b, np.add, lambda g, va, vb: g, lambda g, va, vb: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, va, vb: g, lambda g, va, vb: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, va, vb: g * vb, lambda g, va, vb: g * va)


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda g, va, vb: g / vb,
        lambda g, va, vb: -g * va / (vb * vb),
    )


def _unary(x, fwd, vjp):
    if not isinstance(x, Node):
        return fwd(x)
    out = fwd(x.value)
    v = x.value
    return Node(x.tape, out, (x,), lambda g: (vjp(g, v, out),))


def exp(x):
    return _unary(x, np.exp, lambda g, v, out: g * out)


def log(x):
    return _unary(x, np.log, lambda g, v, out: g / v)


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, out: g * (1.0 - out * out))


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, out: g * 0.5 / out)


def square(x):
    return _unary(x, np.square, lambda g, v, out: g * 2.0 * v)


def sin(x):
    return _unary(x, np.sin, lambda g, v, out: g * np.cos(v))


def cos(x):
    return _unary(x, np.cos, lambda g, v, out: -g * np.sin(v))


def powi(x, k):
    if isinstance(k, Node):
        raise InputError("exponent must be a constant")
    return _unary(x, lambda v: np.power(v, k), lambda g, v, out: g * k * np.power(v, k - 1))


def maximum0(x):
    """Elementwise max(x, 0); subgradient 0 at the kink."""
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, out: g * (v > 0.0))


def linear(x, w):
    """x @ w.T for a batch x of shape (B, k) and weights of shape (M, k)."""
    va, vb = value_of(x), value_of(w)
    if va.shape[-1] != vb.shape[-1]:
        raise InputError(f"linear: {va.shape} incompatible with weights {vb.shape}")
    return _binary(
        x, w, lambda a, b: a @ b.T,
        lambda g, a, b: g @ b,
        lambda g, a, b: g.T @ a,
    )


def affine3(x, u, s, w, b=None):
    """Fused gate pre-activation: x @ u.T + s @ w.T + b.

    Any of the three summands may be omitted by passing None for its data
    argument; this keeps the per-channel graphs of gated layers to a single
    node each.
    """
    args = [a for a in (x, u, s, w, b) if a is not None]
    tape = _tape_of(*args)
    out = None
    if x is not None:
        out = value_of(x) @ value_of(u).T
    if s is not None:
        term = value_of(s) @ value_of(w).T
        out = term if out is None else out + term
    if out is None:
        raise InputError("affine3 needs at least one matmul term")
    if b is not None:
        out = out + value_of(b)
    if tape is None:
        return out
    parents, vjps = [], []
    if x is not None:
        # shape of the x @ u.T summand before any broadcast in the sum
        shape_xu = (np.shape(value_of(x))[0], np.shape(value_of(u))[0])
    if s is not None:
        shape_sw = (np.shape(value_of(s))[0], np.shape(value_of(w))[0])
    if isinstance(x, Node):
        vu = value_of(u)
        parents.append(x)
        vjps.append(lambda g: _unbroadcast(g, shape_xu) @ vu)
    if isinstance(u, Node):
        vx = value_of(x)
        parents.append(u)
        vjps.append(lambda g: _unbroadcast(g, shape_xu).T @ vx)
    if isinstance(s, Node):
        vw = value_of(w)
        parents.append(s)
        vjps.append(lambda g: _unbroadcast(g, shape_sw) @ vw)
    if isinstance(w, Node):
        vs = value_of(s)
        parents.append(w)
        vjps.append(lambda g: _unbroadcast(g, shape_sw).T @ vs)
    if isinstance(b, Node):
        shape = np.shape(value_of(b))
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g, shape))
    return Node(tape, out, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def one_minus_square(x):
    """1 - x*x in one node (tanh first-derivative chain)."""
    return _unary(x, lambda v: 1.0 - v * v, lambda g, v, out: g * (-2.0 * v))


def scaled_prod(c: float, a, b):
    """c * a * b in one node."""
    return _binary(
        a, b, lambda va, vb: c * va * vb,
        lambda g, va, vb: g * (c * vb),
        lambda g, va, vb: g * (c * va),
    )


def dotvec(s, w):
    """Row-wise dot product: (B, M) x (M,) -> (B,)."""
    return _binary(
        s, w, lambda a, b: a @ b,
        lambda g, a, b: g[:, None] * b[None, :],
        lambda g, a, b: g @ a,
    )


def mean(x):
    def fwd(v):
        if np.size(v) == 0:
            raise InputError("mean of an empty batch")
        return np.mean(v)

    return _unary(x, fwd, lambda g, v, out: np.full_like(v, g / np.size(v)))


def total(x):
    return _unary(x, np.sum, lambda g, v, out: np.full_like(v, g))


def reshape(x, shape):
    return _unary(x, lambda v: v.reshape(shape), lambda g, v, out: g.reshape(v.shape))


def rowsum(x):
    """Sum over the last axis keeping it as size one."""
    return _unary(
        x, lambda v: v.sum(axis=-1, keepdims=True),
        lambda g, v, out: np.broadcast_to(g, v.shape).copy(),
    )


def clamp_magnitude(x, floor: float):
    """Push |x| up to ``floor`` preserving sign; identity derivative elsewhere.

    The clamped region contributes zero derivative (the output is constant
    there), mirroring a hard lower bound on the magnitude of a denominator.
    """
    v = value_of(x)
    keep = np.abs(v) >= floor
    clamped = np.where(keep, v, floor * np.where(v < 0.0, -1.0, 1.0))
    if not isinstance(x, Node):
        return clamped
    return Node(x.tape, clamped, (x,), lambda g: (g * keep,))


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns gradients for every *named* leaf the loss is connected to.
    """
    if not isinstance(loss, Node):
        raise InputError("backward expects a Node")
    if np.ndim(loss.value) != 0:
        raise InputError("backward expects a scalar loss")
    # reachable subgraph, processed in reverse creation order
    seen = {id(loss)}
    stack, order = [loss], []
    while stack:
        node = stack.pop()
        order.append(node)
        for p in node.parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    order.sort(key=lambda n: n.idx, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    out: dict[str, np.ndarray] = {}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.name is not None:
            out[node.name] = np.broadcast_to(g, np.shape(node.value)).astype(
                float, copy=True
            )
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            key = id(parent)
            acc = grads.get(key)
            grads[key] = pg if acc is None else acc + pg
    return out


def grad_params(loss, params) -> dict[str, np.ndarray]:
    """Exact gradient of a scalar loss node with respect to named parameters.

    ``params`` supplies the parameter arrays (a mapping or an object with an
    ``arrays`` attribute).  Parameters the loss is not connected to get zero
    gradients.  Non-finite gradients raise :class:`NumericError`.
    """
    arrays = params.arrays if hasattr(params, "arrays") else params
    if not isinstance(loss, Node):
        raise InputError("loss is not connected to the tape")
    if not np.isfinite(loss.value):
        raise NumericError("loss is not finite")
    got = backward(loss)
    out = {}
    for name, arr in arrays.items():
        g = got.get(name)
        if g is None:
            g = np.zeros_like(np.asarray(arr, dtype=float))
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# jets: forward propagation of input derivatives
# ---------------------------------------------------------------------------


_ACTIVE_PAIRS: set | None = None


@contextmanager
def restrict_pairs(pairs):
    """Limit which second-derivative pairs jets propagate.

    Unneeded pairs are skipped at creation time, which is what keeps batched
    second-order evaluations affordable.  The filter is a module-level
    setting; evaluations are single-threaded per tape by contract.
    """
    global _ACTIVE_PAIRS
    old = _ACTIVE_PAIRS
    _ACTIVE_PAIRS = set(pairs) if pairs is not None else None
    try:
        yield
    finally:
        _ACTIVE_PAIRS = old


def _pair_allowed(pair) -> bool:
    return _ACTIVE_PAIRS is None or pair in _ACTIVE_PAIRS


class Jet:
    """Taylor coefficients of a quantity along the PDE input directions.

    ``d[k]`` is the first derivative along direction ``k`` (0 = time, then
    the state coordinates); ``dd[(i, j)]`` with ``i <= j`` are second
    derivatives.  ``None`` entries and missing pairs are identically zero.
    ``dd is None`` marks a first-order jet.  Coefficients may be nodes or
    plain arrays, matching whatever the evaluation is recorded on.
    """

    __slots__ = ("val", "d", "dd")

    __array_ufunc__ = None

    def __init__(self, val, d, dd=None):
        self.val = val
        self.d = list(d)
        self.dd = dd

    @property
    def ndirs(self):
        return len(self.d)

    @property
    def order(self):
        return 1 if self.dd is None else 2

    def _lift(self, other) -> "Jet":
        if isinstance(other, Jet):
            return other
        return Jet(other, [None] * self.ndirs, None if self.dd is None else {})

    def __add__(self, other):
        o = self._lift(other)
        d = [_zadd(a, b) for a, b in zip(self.d, o.d)]
        dd = None
        if self.dd is not None or o.dd is not None:
            dd = dict(self.dd or {})
            for k, v in (o.dd or {}).items():
                dd[k] = _zadd(dd.get(k), v)
        return Jet(add(self.val, o.val), d, dd)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            # constant scale: no Leibniz cross terms
            d = [None if a is None else mul(a, other) for a in self.d]
            dd = None if self.dd is None else {k: mul(v, other) for k, v in self.dd.items()}
            return Jet(mul(self.val, other), d, dd)
        a, b = self, other
        d = [_zadd(_zmul(a.d[k], b.val), _zmul(b.d[k], a.val)) for k in range(a.ndirs)]
        dd = None
        if a.dd is not None or b.dd is not None:
            dd = {}
            pairs = set((a.dd or {}).keys()) | set((b.dd or {}).keys())
            pairs |= {
                (i, j)
                for i in range(a.ndirs)
                for j in range(i, a.ndirs)
                if (a.d[i] is not None and b.d[j] is not None)
                or (a.d[j] is not None and b.d[i] is not None)
            }
            for i, j in pairs:
                if not _pair_allowed((i, j)):
                    continue
                term = _zadd(
                    _zmul((a.dd or {}).get((i, j)), b.val),
                    _zmul((b.dd or {}).get((i, j)), a.val),
                )
                # Leibniz cross terms; the diagonal picks the product twice
                term = _zadd(term, _zmul2(a.d[i], b.d[j]))
                term = _zadd(term, _zmul2(a.d[j], b.d[i]))
                if term is not None:
                    dd[(i, j)] = term
        return Jet(mul(a.val, b.val), d, dd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return self * (1.0 / other)
        return self * jrecip(other)

    def __rtruediv__(self, other):
        return jrecip(self) * other

    def __pow__(self, k):
        if not isinstance(k, int) or k < 0:
            raise InputError("jet powers must be non-negative integers")
        if k == 0:
            return self._lift(1.0)
        out = self
        for _ in range(k - 1):
            out = out * self
        return out


def _zadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _zmul(a, c):
    return None if a is None else mul(a, c)


def _zmul2(a, b):
    if a is None or b is None:
        return None
    return mul(a, b)


def jet_inputs(t, x, order: int = 2, with_time: bool = True):
    """Seed jets for a batch of points: time jet plus one jet per coordinate.

    ``t`` is a scalar or (B,) array, ``x`` a (B, d) array (or (d,) for a
    single point).  Returns ``(t_jet, [x_1 jet, ..., x_d jet])``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],)).copy()
    d = x.shape[1]
    n = d + 1
    dd: dict | None = {} if order >= 2 else None
    tj = Jet(t, [1.0 if (k == 0 and with_time) else None for k in range(n)],
             None if dd is None else {})
    xjs = [
        Jet(x[:, j].copy(), [1.0 if k == j + 1 else None for k in range(n)],
            None if dd is None else {})
        for j in range(d)
    ]
    return tj, xjs


def jet_univariate(j: Jet, f0: Callable, f1: Callable, f2: Callable | None) -> Jet:
    """Chain rule through a smooth scalar function given f, f' and f''."""
    v = f0(j.val)
    s1 = f1(j.val, v)
    d = [_zmul(a, s1) for a in j.d]
    dd = None
    if j.dd is not None:
        if f2 is None:
            raise InputError("second-order jet needs a second derivative rule")
        s2 = f2(j.val, v, s1)
        dd = {}
        pairs = set(j.dd.keys()) | {
            (i, k)
            for i in range(j.ndirs)
            for k in range(i, j.ndirs)
            if j.d[i] is not None and j.d[k] is not None
        }
        for (i, k) in pairs:
            if not _pair_allowed((i, k)):
                continue
            term = _zmul(j.dd.get((i, k)), s1)
            term = _zadd(term, _zmul2(_zmul2(j.d[i], j.d[k]), s2))
            if term is not None:
                dd[(i, k)] = term
    return Jet(v, d, dd)


def jexp(j: Jet) -> Jet:
    return jet_univariate(j, exp, lambda v, o: o, lambda v, o, s1: o)


def jlog(j: Jet) -> Jet:
    return jet_univariate(
        j, log, lambda v, o: div(1.0, v), lambda v, o, s1: mul(s1, s1) * -1.0
    )


def jtanh(j: Jet) -> Jet:
    return jet_univariate(
        j,
        tanh,
        lambda v, o: sub(1.0, square(o)),
        lambda v, o, s1: mul(mul(o, s1), -2.0),
    )


def jsin(j: Jet) -> Jet:
    return jet_univariate(j, sin, lambda v, o: cos(v), lambda v, o, s1: -o)


def jcos(j: Jet) -> Jet:
    return jet_univariate(j, cos, lambda v, o: -sin(v), lambda v, o, s1: -o)


def jrecip(j: Jet) -> Jet:
    return jet_univariate(
        j,
        lambda v: div(1.0, v),
        lambda v, o: mul(o, o) * -1.0,
        lambda v, o, s1: mul(mul(o, o), o) * 2.0,
    )


def jlinear(j: Jet, w) -> Jet:
    """Affine map applied coefficient-wise: jets are linear in the value."""
    d = [None if a is None else linear(a, w) for a in j.d]
    dd = None if j.dd is None else {k: linear(v, w) for k, v in j.dd.items()}
    return Jet(linear(j.val, w), d, dd)


def jdotvec(j: Jet, w) -> Jet:
    d = [None if a is None else dotvec(_row_expand(a, j.val), w) for a in j.d]
    dd = (
        None
        if j.dd is None
        else {k: dotvec(_row_expand(v, j.val), w) for k, v in j.dd.items()}
    )
    return Jet(dotvec(j.val, w), d, dd)


def _row_expand(a, like):
    """Broadcast a (1, M) coefficient up to the batch shape before reduction."""
    av, lv = value_of(a), value_of(like)
    if av.shape == lv.shape:
        return a
    return add(a, np.zeros((lv.shape[0], 1)))


# ---------------------------------------------------------------------------
# spec-level derivative operations
# ---------------------------------------------------------------------------


class FirstOrder(NamedTuple):
    value: object
    dt: object
    dx: list


class SecondOrder(NamedTuple):
    dxx: object
    dtx: object


class FdConfig(NamedTuple):
    """Step size for central-difference Hessians, in state-variable units."""

    h: float = 1e-3


def _to_float(v):
    arr = value_of(v)
    return float(arr) if np.ndim(arr) == 0 else float(np.asarray(arr).reshape(-1)[0])


def _evaluate(f, params, t, x, order: int):
    """Dispatch to a jet-aware object or a plain jet-arithmetic callable."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if hasattr(f, "jet_eval"):
        return f.jet_eval(params, np.asarray([t], dtype=float), x[None, :], order)
    if params is not None:
        raise InputError("plain callables close over their parameters; pass params=None")
    tj, xjs = jet_inputs(np.asarray([t], dtype=float), x[None, :], order=order)
    out = f(tj, xjs)
    if not isinstance(out, Jet):
        raise InputError("function must return a Jet")
    d = x.size
    zero = np.zeros(1)
    dx = [out.d[j + 1] if out.d[j + 1] is not None else zero for j in range(d)]
    dt = out.d[0] if out.d[0] is not None else zero
    dd = {}
    if out.dd is not None:
        for (i, j), v in out.dd.items():
            dd[(i, j)] = v

    class _Ev:
        pass

    ev = _Ev()
    ev.value, ev.dt, ev.dx, ev.dd = out.val, dt, dx, dd
    return ev


def grad_input(f, params, t, x) -> FirstOrder:
    """Value, time derivative and state gradient of ``f`` at one point.

    ``f`` is either an object exposing ``jet_eval`` (a parameterized network
    adapter) or a callable of ``(t_jet, x_jets)`` written in jet arithmetic.
    Results are tape nodes whenever parameters were wrapped on a tape, so a
    loss built from them stays differentiable with respect to the parameters.
    """
    ev = _evaluate(f, params, t, x, order=1)
    vals = [_to_float(ev.value), _to_float(ev.dt)] + [_to_float(g) for g in ev.dx]
    if not all(np.isfinite(v) for v in vals):
        raise NumericError("non-finite value in the derivative graph")
    return FirstOrder(ev.value, ev.dt, list(ev.dx))


def second_input(f, params, t, x) -> SecondOrder:
    """Exact second derivatives (state Hessian and mixed time-state vector)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.size
    ev = _evaluate(f, params, t, x, order=2)
    zero = np.zeros(1)
    dxx = [[None] * d for _ in range(d)]
    dtx = [None] * d
    for i in range(d):
        dtx[i] = ev.dd.get((0, i + 1), zero)
        for j in range(i, d):
            e = ev.dd.get((i + 1, j + 1), zero)
            dxx[i][j] = e
            dxx[j][i] = e
    flat = [_to_float(e) for row in dxx for e in row] + [_to_float(e) for e in dtx]
    if not all(np.isfinite(v) for v in flat):
        raise NumericError("non-finite value in the derivative graph")
    return SecondOrder(dxx, dtx)


def fd_hessian(f, params, t, x, cfg: FdConfig = FdConfig()) -> np.ndarray:
    """State Hessian from central differences of first derivatives.

    Each column j uses the gradients at ``x + h e_j`` and ``x - h e_j``; the
    result is symmetrized as 0.5 (H + H^T) and is accurate to O(h^2).
    """
    if cfg.h <= 0.0:
        raise InputError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.size
    h = cfg.h
    cols = np.empty((d, d))
    for j in range(d):
        step = np.zeros(d)
        step[j] = h
        gp = grad_input(f, params, t, x + step)
        gm = grad_input(f, params, t, x - step)
        gp_v = np.array([_to_float(g) for g in gp.dx])
        gm_v = np.array([_to_float(g) for g in gm.dx])
        cols[:, j] = (gp_v - gm_v) / (2.0 * h)
    if not np.all(np.isfinite(cols)):
        raise NumericError("non-finite gradient at a stencil point")
    return 0.5 * (cols + cols.T)
