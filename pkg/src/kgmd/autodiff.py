"""Reverse-mode tape over numpy arrays, with second-order input jets.

The engine serves one purpose: evaluate a tanh feed-forward pipeline together
with first and second derivatives along selected input coordinates, and then
differentiate any scalar built from those quantities with respect to every
network parameter.  Input derivatives travel forward as "jets": the value and
the selected d/dc, d2/dc2 entries stacked along a leading component axis.
Each jet is one tape quantity, so a single reverse sweep yields parameter
gradients of input-derivative quantities (the third-order mixed path).

All arithmetic is float64.  Operations accept tape nodes or plain numpy
values interchangeably; expressions with no node argument are evaluated
eagerly and return plain arrays, which gives a value-only fast path through
the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, StructuralError

Array = np.ndarray


def _as_value(x):
    return x.value if isinstance(x, Node) else x


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Node:
    """One recorded elementary operation (or leaf) on a :class:`Tape`."""

    __slots__ = ("value", "parents", "vjp", "fwd", "tape", "idx")

    def __init__(self, value, parents, vjp, fwd, tape, idx):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.fwd = fwd
        self.tape = tape
        self.idx = idx

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={np.shape(self.value)})"


class Tape:
    """Ordered record of elementary operations with reverse-mode adjoints."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[Node] = []

    def leaf(self, value, param: bool = False) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(value, (), None, None, self, len(self.nodes))
        self.nodes.append(node)
        if param:
            self.params.append(node)
        return node

    def record(self, value, parents, vjp, fwd=None) -> Node:
        node = Node(value, parents, vjp, fwd, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def _check_on_tape(self, node: Node):
        if not isinstance(node, Node) or node.tape is not self:
            raise StructuralError("node does not belong to this tape")
        if node.idx >= len(self.nodes) or self.nodes[node.idx] is not node:
            raise StructuralError("node index is stale for this tape")

    def adjoints(self, loss: Node, seed: float = 1.0) -> list:
        """Reverse sweep from ``loss``; returns per-node adjoint list."""
        self._check_on_tape(loss)
        if np.size(loss.value) != 1:
            raise StructuralError("reverse sweep requires a scalar loss node")
        adj: list = [None] * len(self.nodes)
        owned = [False] * len(self.nodes)
        adj[loss.idx] = np.asarray(seed, dtype=np.float64).reshape(np.shape(loss.value))
        for idx in range(loss.idx, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if not node.parents:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                p = parent.idx
                if adj[p] is None:
                    # vjp outputs may alias each other; never mutate them
                    adj[p] = pg
                elif owned[p]:
                    adj[p] += pg
                else:
                    adj[p] = adj[p] + pg
                    owned[p] = True
        return adj

    def grad(self, loss: Node, wrt: list) -> list[Array]:
        adj = self.adjoints(loss)
        out = []
        for node in wrt:
            self._check_on_tape(node)
            g = adj[node.idx]
            out.append(np.zeros_like(node.value) if g is None else g)
        return out

    def replay_matches(self) -> bool:
        """Recompute every recorded op from its parents; True if bit-identical."""
        for node in self.nodes:
            if node.fwd is None:
                continue
            recomputed = node.fwd()
            if isinstance(recomputed, tuple):
                recomputed = recomputed[0]
            if not np.array_equal(recomputed, node.value):
                return False
        return True


def param_grad(tape: Tape, loss: Node) -> Array:
    """Flat gradient over the tape's registered parameter leaves."""
    grads = tape.grad(loss, tape.params)
    if not grads:
        return np.zeros(0)
    return np.concatenate([np.asarray(g).ravel() for g in grads])


# ---------------------------------------------------------------------------
# elementary operations (node- or array-valued)
# ---------------------------------------------------------------------------

def _tape_of(*args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def add(a, b):
    tp = _tape_of(a, b)
    va, vb = _as_value(a), _as_value(b)
    out = va + vb
    if tp is None:
        return out
    pa = a if isinstance(a, Node) else None
    pb = b if isinstance(b, Node) else None

    def vjp(g):
        return (
            None if pa is None else _unbroadcast(g, np.shape(va)),
            None if pb is None else _unbroadcast(g, np.shape(vb)),
        )

    return tp.record(out, (pa, pb), vjp, lambda: _as_value(a) + _as_value(b))


def sub(a, b):
    return add(a, scale_add(b, -1.0))


def mul(a, b):
    tp = _tape_of(a, b)
    va, vb = _as_value(a), _as_value(b)
    out = va * vb
    if tp is None:
        return out
    pa = a if isinstance(a, Node) else None
    pb = b if isinstance(b, Node) else None

    def vjp(g):
        return (
            None if pa is None else _unbroadcast(g * vb, np.shape(va)),
            None if pb is None else _unbroadcast(g * va, np.shape(vb)),
        )

    return tp.record(out, (pa, pb), vjp, lambda: _as_value(a) * _as_value(b))


def square(a):
    tp = _tape_of(a)
    va = _as_value(a)
    out = va * va
    if tp is None:
        return out
    return tp.record(out, (a,), lambda g: (2.0 * va * g,), lambda: _as_value(a) ** 2)


def scale_add(a, mul_c=1.0, add_c=0.0):
    """``mul_c * a + add_c`` with parameter-independent coefficients."""
    tp = _tape_of(a)
    va = _as_value(a)
    trivial_mul = isinstance(mul_c, float) and mul_c == 1.0
    trivial_add = isinstance(add_c, float) and add_c == 0.0
    if trivial_add:
        out = va if trivial_mul else mul_c * va
    else:
        out = va + add_c if trivial_mul else mul_c * va + add_c
    if tp is None:
        return out

    def vjp(g):
        return (_unbroadcast(g if trivial_mul else mul_c * g, np.shape(va)),)

    return tp.record(out, (a,), vjp, lambda: mul_c * _as_value(a) + add_c)


def tanh_(a):
    tp = _tape_of(a)
    va = _as_value(a)
    out = np.tanh(va)
    if tp is None:
        return out

    def vjp(g):
        return ((1.0 - out * out) * g,)

    return tp.record(out, (a,), vjp, lambda: np.tanh(_as_value(a)))


def linear(x, w, b=None):
    """``x @ w.T (+ b)`` for x: (..., n_in), w: (n_out, n_in), b: (n_out,)."""
    tp = _tape_of(x, w, b)
    vx, vw = _as_value(x), _as_value(w)
    out = vx @ vw.T
    if b is not None:
        out = out + _as_value(b)
    if tp is None:
        return out
    px = x if isinstance(x, Node) else None
    pw = w if isinstance(w, Node) else None
    pb = b if isinstance(b, Node) else None

    def vjp(g):
        gx = None if px is None else g @ vw
        gw = None
        if pw is not None:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = vx.reshape(-1, vx.shape[-1])
            gw = g2.T @ x2
        gb = None if pb is None else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw, gb)

    def fwd():
        o = _as_value(x) @ _as_value(w).T
        return o if b is None else o + _as_value(b)

    return tp.record(out, (px, pw, pb), vjp, fwd)


def stack(xs, axis=0):
    tp = _tape_of(*xs)
    vals = [_as_value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if tp is None:
        return out
    parents = tuple(x if isinstance(x, Node) else None for x in xs)

    def vjp(g):
        slices = np.moveaxis(g, axis, 0)
        return tuple(None if p is None else np.ascontiguousarray(slices[i])
                     for i, p in enumerate(parents))

    return tp.record(out, parents, vjp, lambda: np.stack([_as_value(x) for x in xs], axis=axis))


def reshape_(x, shape):
    tp = _tape_of(x)
    vx = _as_value(x)
    out = vx.reshape(shape)
    if tp is None:
        return out
    return tp.record(out, (x,), lambda g: (g.reshape(vx.shape),),
                     lambda: _as_value(x).reshape(shape))


def slice_axis(x, axis, start, stop=None):
    """Slice along ``axis``; ``stop=None`` drops the axis (integer index)."""
    tp = _tape_of(x)
    vx = _as_value(x)
    idx = [slice(None)] * vx.ndim
    idx[axis] = start if stop is None else slice(start, stop)
    idx = tuple(idx)
    out = vx[idx]
    if tp is None:
        return out

    def vjp(g):
        gx = np.zeros_like(vx)
        gx[idx] = g
        return (gx,)

    return tp.record(out, (x,), vjp, lambda: _as_value(x)[idx])


def sum_axis(x, axis):
    tp = _tape_of(x)
    vx = _as_value(x)
    out = vx.sum(axis=axis)
    if tp is None:
        return out

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), vx.shape),)

    return tp.record(out, (x,), vjp, lambda: _as_value(x).sum(axis=axis))


def mean_all(x):
    tp = _tape_of(x)
    vx = _as_value(x)
    out = np.asarray(vx.mean())
    if tp is None:
        return out
    n = vx.size

    def vjp(g):
        return (np.full(vx.shape, float(g) / n),)

    return tp.record(out, (x,), vjp, lambda: np.asarray(_as_value(x).mean()))


def sum_all(x):
    tp = _tape_of(x)
    vx = _as_value(x)
    out = np.asarray(vx.sum())
    if tp is None:
        return out

    def vjp(g):
        return (np.full(vx.shape, float(g)),)

    return tp.record(out, (x,), vjp, lambda: np.asarray(_as_value(x).sum()))


def check_finite(x, where: str):
    """Raise :class:`NumericError` carrying ``where`` on non-finite entries."""
    vx = _as_value(x)
    # min/max are allocation-free single passes and propagate NaN/Inf
    if vx.size and not (np.isfinite(vx.min()) and np.isfinite(vx.max())):
        raise NumericError(f"non-finite value at {where}", where=where)
    return x


# ---------------------------------------------------------------------------
# jets: value plus selected first/second input derivatives, stacked on axis 0
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JetLayout:
    """Component ordering of a stacked jet: "v" first, then d:/dd: pairs.

    ``pairs`` lists (first-derivative row, second-derivative row) per tracked
    coordinate; the tanh rule needs d:c to propagate dd:c.
    """

    coords: tuple

    @property
    def comps(self) -> tuple:
        return ("v",) + tuple(f"d:{c}" for c in self.coords) \
            + tuple(f"dd:{c}" for c in self.coords)

    @property
    def n(self) -> int:
        return 1 + 2 * len(self.coords)

    @property
    def pairs(self) -> tuple:
        k = len(self.coords)
        return tuple((1 + i, 1 + k + i) for i in range(k))

    def index(self, comp: str) -> int:
        return self.comps.index(comp)


VALUE_ONLY = JetLayout(())


class JetArray:
    """A stacked jet quantity: node or array of shape (n_comps, ...)."""

    __slots__ = ("layout", "node", "_cache")

    def __init__(self, layout: JetLayout, node):
        self.layout = layout
        self.node = node
        self._cache = {}

    def __getitem__(self, comp: str):
        if comp not in self._cache:
            self._cache[comp] = slice_axis(self.node, 0, self.layout.index(comp))
        return self._cache[comp]

    def value(self) -> Array:
        return np.asarray(_as_value(self.node)[0])

    def values(self) -> Array:
        return np.asarray(_as_value(self.node))


def jet_affine(x: JetArray, w, b=None) -> JetArray:
    """Affine map over the trailing feature axis; bias only on the value row."""
    tp = _tape_of(x.node, w, b)
    vx, vw = _as_value(x.node), _as_value(w)
    out = vx @ vw.T
    if b is not None:
        out[0] += _as_value(b)
    if tp is None:
        return JetArray(x.layout, out)
    px = x.node if isinstance(x.node, Node) else None
    pw = w if isinstance(w, Node) else None
    pb = b if isinstance(b, Node) else None

    def vjp(g):
        gx = None if px is None else g @ vw
        gw = None
        if pw is not None:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = vx.reshape(-1, vx.shape[-1])
            gw = g2.T @ x2
        gb = None if pb is None else g[0].reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw, gb)

    def fwd():
        o = _as_value(x.node) @ _as_value(w).T
        if b is not None:
            o[0] += _as_value(b)
        return o

    return JetArray(x.layout, tp.record(out, (px, pw, pb), vjp, fwd))


def jet_tanh(x: JetArray) -> JetArray:
    """tanh with fused exact first/second derivative propagation."""
    tp = _tape_of(x.node)
    vx = _as_value(x.node)
    pairs = x.layout.pairs

    def compute(v):
        o = np.empty_like(v)
        a = np.tanh(v[0], out=o[0])
        s = a * a
        np.subtract(1.0, s, out=s)          # tanh' = 1 - a^2
        m = a * s
        m *= -2.0                            # tanh'' = -2 a (1 - a^2)
        for di, si in pairs:
            np.multiply(v[di], v[di], out=o[si])
            o[si] *= m
            tmp = s * v[si]
            o[si] += tmp
            np.multiply(s, v[di], out=o[di])
        return o, a, s, m

    out, a, s, m = compute(vx)
    if tp is None:
        return JetArray(x.layout, out)

    def vjp(g):
        gx = np.empty_like(vx)
        gv = np.multiply(s, g[0], out=gx[0])
        dsq_gs = None
        for di, si in pairs:
            tmp = vx[di] * g[di]
            tmp += vx[si] * g[si]
            tmp *= m
            gv += tmp
            d_gs = vx[di] * g[si]
            if dsq_gs is None:
                dsq_gs = vx[di] * d_gs
            else:
                dsq_gs += vx[di] * d_gs
            np.multiply(m, d_gs, out=gx[di])
            gx[di] *= 2.0
            gx[di] += s * g[di]
            np.multiply(s, g[si], out=gx[si])
        if dsq_gs is not None:
            # dm/dv = -2 s (s - 2 a^2)
            q = a * a
            q *= -2.0
            q += s
            q *= s
            q *= -2.0
            dsq_gs *= q
            gv += dsq_gs
        return (gx,)

    return JetArray(x.layout, tp.record(out, (x.node,), vjp,
                                        lambda: compute(_as_value(x.node))[0]))


def jet_const_mul(x: JetArray, c: Array) -> JetArray:
    """Leibniz product with a parameter-independent stacked jet ``c``.

    ``c`` has the same component layout as ``x`` (broadcastable trailing
    shape); only diagonal second derivatives are produced, which is exact
    because the layout is diagonal-only.
    """
    tp = _tape_of(x.node)
    vx = _as_value(x.node)
    pairs = x.layout.pairs

    def compute(v):
        o = np.empty(np.broadcast_shapes(v.shape, c.shape))
        np.multiply(c[0], v[0], out=o[0])
        for di, si in pairs:
            np.multiply(c[0], v[di], out=o[di])
            o[di] += c[di] * v[0]
            np.multiply(c[0], v[si], out=o[si])
            tmp = c[di] * v[di]
            tmp *= 2.0
            tmp += c[si] * v[0]
            o[si] += tmp
        return o

    out = compute(vx)
    if tp is None:
        return JetArray(x.layout, out)

    def vjp(g):
        gx = np.empty_like(vx)
        gv = c[0] * g[0]
        for di, si in pairs:
            gv += c[di] * g[di]
            gv += c[si] * g[si]
            tmp = c[di] * g[si]
            tmp *= 2.0
            tmp += c[0] * g[di]
            gx[di] = _unbroadcast(tmp, vx[di].shape)
            gx[si] = _unbroadcast(c[0] * g[si], vx[si].shape)
        gx[0] = _unbroadcast(gv, vx[0].shape)
        return (gx,)

    return JetArray(x.layout, tp.record(out, (x.node,), vjp,
                                        lambda: compute(_as_value(x.node))))


def jet_add(x: JetArray, y: JetArray) -> JetArray:
    return JetArray(x.layout, add(x.node, y.node))


def jet_add_const(x: JetArray, c: Array) -> JetArray:
    return JetArray(x.layout, scale_add(x.node, 1.0, c))


def const_jet_mul(a: Array, b: Array, layout: JetLayout) -> Array:
    """Leibniz product of two parameter-independent stacked jets."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[0] = a[0] * b[0]
    for di, si in layout.pairs:
        out[di] = a[di] * b[0] + a[0] * b[di]
        out[si] = a[si] * b[0] + 2.0 * a[di] * b[di] + a[0] * b[si]
    return out


def const_jet_recip(a: Array, layout: JetLayout) -> Array:
    """Reciprocal of a parameter-independent stacked jet."""
    out = np.empty_like(a)
    inv = 1.0 / a[0]
    out[0] = inv
    for di, si in layout.pairs:
        out[di] = -a[di] * inv * inv
        out[si] = (2.0 * a[di] * a[di] - a[0] * a[si]) * inv * inv * inv
    return out


# ---------------------------------------------------------------------------
# scalar jet (reporting/diagnostics form) and finite-difference oracles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Jet2:
    """Scalar jet: value, first derivatives d1[c], diagonal seconds d2[(c, c)].

    d2 lookups are symmetric in the coordinate pair.
    """

    value: float
    d1: dict = field(default_factory=dict)
    d2: dict = field(default_factory=dict)

    def d2_get(self, c1: str, c2: str) -> float:
        if (c1, c2) in self.d2:
            return self.d2[(c1, c2)]
        return self.d2[(c2, c1)]


def fd_jet(f, x0: Array, wanted_idx, step: float = 1e-4) -> Jet2:
    """Central-difference jet of a scalar function of a coordinate vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    v = float(f(x0))
    d1, d2 = {}, {}
    for name, i in wanted_idx.items():
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        fp, fm = float(f(xp)), float(f(xm))
        d1[name] = (fp - fm) / (2.0 * step)
        d2[(name, name)] = (fp - 2.0 * v + fm) / (step * step)
    return Jet2(v, d1, d2)


def fd_grad(f, theta: Array, step: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp_, tm = theta.copy(), theta.copy()
        tp_[i] += step
        tm[i] -= step
        g[i] = (float(f(tp_)) - float(f(tm))) / (2.0 * step)
    return g
