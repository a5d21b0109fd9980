"""Reverse-mode tape with forward-mode input jets layered underneath.

Nodes hold numpy arrays rather than scalars so one node covers a whole
batch of collocation points; a node's value is the elementwise value over
the batch. Input derivatives (first and pure second) of a network are
propagated forward as extra channels stacked in front of the point axis:

    channel 0          value
    channels 1..D      d/dx_i            (order >= 1)
    channels D+1..2D   d^2/dx_i^2        (order == 2)

Everything built from those channels is recorded on the tape, so a single
backward pass yields parameter gradients of losses that contain u_x, u_xx...
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import NonFiniteError, RejectedInput

# fused numba loops for the activation jet; the numpy path stays as reference
USE_KERNELS = _kernels.AVAILABLE


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """One recorded operation. ``parents`` are tape indices, all smaller than ``index``."""

    __slots__ = ("tape", "index", "kind", "parents", "value", "vjp", "needs_grad")
    __array_priority__ = 100.0  # make ndarray <op> Node dispatch to Node's reflected ops

    def __init__(self, tape, index, kind, parents, value, vjp, needs_grad):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.parents = parents
        self.value = value
        self.vjp = vjp
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index} {self.kind}, shape={self.value.shape})"

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

    def __pow__(self, exponent):
        if exponent != 2:
            raise RejectedInput("only squaring is supported")
        return square(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Append-only operation record; rebuilt for every epoch."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, value, parents=(), vjp=None):
        needs = any(p.needs_grad for p in parents)
        node = Node(self, len(self.nodes), kind, tuple(p.index for p in parents),
                    value, vjp if needs else None, needs)
        self.nodes.append(node)
        return node

    def leaf(self, value):
        value = np.array(value, dtype=self.dtype)
        node = Node(self, len(self.nodes), "leaf", (), value, None, True)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return self.record("constant", np.asarray(value, dtype=self.dtype))

    def gradients(self, root, wrt):
        """d(root)/d(w) for every node in ``wrt``; unreachable entries are zeros."""
        if root.tape is not self:
            raise RejectedInput("root node belongs to a different tape")
        if root.value.size != 1:
            raise RejectedInput(f"loss root must be scalar, got shape {root.value.shape}")
        grads: list = [None] * (root.index + 1)
        grads[root.index] = np.ones_like(root.value)
        keep = {w.index for w in wrt}
        nodes = self.nodes
        for i in range(root.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.vjp is not None:
                for p, gp in zip(node.parents, node.vjp(g)):
                    if gp is None or not nodes[p].needs_grad:
                        continue
                    grads[p] = gp if grads[p] is None else grads[p] + gp
            if i not in keep:
                grads[i] = None
        out = []
        for w in wrt:
            g = grads[w.index] if w.index <= root.index else None
            out.append(np.zeros_like(w.value) if g is None else g)
        return out


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise RejectedInput("at least one operand must be a Node")


def _split(x):
    """(value, node-or-None) for a Node or a plain constant."""
    if isinstance(x, Node):
        return x.value, x
    return np.asarray(x), None


def _binary(kind, a, b, value, ga, gb):
    tape = _tape_of(a, b)
    av, an = _split(a)
    bv, bn = _split(b)
    parents = tuple(p for p in (an, bn) if p is not None)

    def vjp(g):
        out = []
        if an is not None:
            out.append(_unbroadcast(ga(g), av.shape))
        if bn is not None:
            out.append(_unbroadcast(gb(g), bv.shape))
        return out

    return tape.record(kind, value(av, bv), parents, vjp)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b):
    av, _ = _split(a)
    bv, _ = _split(b)
    return _binary("mul", a, b, lambda x, y: x * y, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, _ = _split(a)
    bv, _ = _split(b)
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g: g / bv, lambda g: -g * av / (bv * bv))


def _unary(kind, a, value, local):
    """``local(x, y)`` returns dy/dx given input x and output y."""
    x = a.value
    y = value(x)
    return a.tape.record(kind, y, (a,), lambda g: (g * local(x, y),))


def neg(a):
    return a.tape.record("neg", -a.value, (a,), lambda g: (-g,))


def square(a):
    return _unary("square", a, np.square, lambda x, y: 2.0 * x)


def exp(a):
    return _unary("exp", a, np.exp, lambda x, y: y)


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def sin(a):
    return _unary("sin", a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary("cos", a, np.cos, lambda x, y: -np.sin(x))


def reduce_sum(a, axis=None):
    shape = a.value.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record("sum", np.asarray(a.value.sum(axis=axis)), (a,), vjp)


def mean(a):
    n = a.value.size
    shape = a.value.shape
    return a.tape.record("mean", np.asarray(a.value.mean()), (a,),
                         lambda g: (np.full(shape, g / n, dtype=a.value.dtype),))


def getitem(a, idx):
    """Basic (slice/int) indexing only; fancy indices with repeats would lose gradient."""
    shape, dtype = a.value.shape, a.value.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return a.tape.record("getitem", a.value[idx], (a,), vjp)


def concat(parts: Sequence, axis=0):
    tape = _tape_of(*parts)
    values = [_split(p)[0] for p in parts]
    nodes = [p for p in parts if isinstance(p, Node)]
    sizes = [v.shape[axis] for v in values]
    bounds = np.cumsum([0] + sizes)
    is_node = [isinstance(p, Node) for p in parts]

    def vjp(g):
        pieces = np.split(g, bounds[1:-1], axis=axis)
        return [piece for piece, flag in zip(pieces, is_node) if flag]

    return tape.record("concat", np.concatenate(values, axis=axis), tuple(nodes), vjp)


def affine_channels(z, weight, bias):
    """Linear layer applied to every jet channel; the bias only enters channel 0.

    ``z`` has shape (C, N, fan_in), ``weight`` (fan_out, fan_in), ``bias`` (fan_out,).
    """
    tape = _tape_of(z, weight, bias)
    zv, zn = _split(z)
    wv, wn = _split(weight)
    bv, bn = _split(bias)
    c, n, fan_in = zv.shape
    out = (zv.reshape(c * n, fan_in) @ wv.T).reshape(c, n, -1)
    out[0] += bv
    parents = tuple(p for p in (zn, wn, bn) if p is not None)

    def vjp(g):
        grads = []
        if zn is not None:
            grads.append((g.reshape(c * n, -1) @ wv).reshape(c, n, fan_in))
        if wn is not None:
            grads.append(g.reshape(c * n, -1).T @ zv.reshape(c * n, fan_in))
        if bn is not None:
            grads.append(g[0].sum(axis=0))
        return grads

    return tape.record("affine", out, parents, vjp)


def _phi(kind, z):
    """Activation and its first three derivatives."""
    if kind == "tanh":
        t = np.tanh(z)
        d1 = 1.0 - t * t
        d2 = -2.0 * t * d1
        return t, d1, d2, lambda: d1 * (4.0 * t * t - 2.0 * d1)
    if kind == "sin":
        s, c = np.sin(z), np.cos(z)
        return s, c, -s, lambda: -c
    if kind == "cos":
        s, c = np.sin(z), np.cos(z)
        return c, -s, -c, lambda: s
    raise RejectedInput(f"unknown activation {kind!r}")


def activation_jet(h, slope, kind, ndims, second, order):
    """Push jet channels of ``slope * h`` through an elementwise activation.

    With z = slope * h (all channels scale alike since the map is linear):

        value   phi(z)
        first   phi'(z) z'
        second  phi'(z) z'' + phi''(z) z'^2

    ``second`` lists which first-derivative channels have a second-derivative
    channel after them.
    """
    tape = _tape_of(h, slope)
    hv, hn = _split(h)
    cv, cn = _split(slope)
    c = cv.item()
    parents = tuple(p for p in (hn, cn) if p is not None)
    if USE_KERNELS:
        return _activation_jet_fused(tape, hv, hn, cv, cn, c, kind, ndims, second, order)
    z = hv * c
    f0, f1, f2, f3 = _phi(kind, z[0])
    out = np.empty_like(z)
    out[0] = f0
    if order >= 1:
        p1 = z[1:1 + ndims]
        np.multiply(p1, f1, out=out[1:1 + ndims])
    if order >= 2:
        p2 = z[1 + ndims:]
        p1s = p1[second]
        sq = p1s * p1s
        np.multiply(p2, f1, out=out[1 + ndims:])
        out[1 + ndims:] += sq * f2

    def vjp(g):
        gz = np.empty_like(z)
        gz[0] = g[0] * f1
        if order >= 1:
            g1 = g[1:1 + ndims]
            gz[0] += f2 * np.einsum("cnw,cnw->nw", g1, p1)
            np.multiply(g1, f1, out=gz[1:1 + ndims])
        if order >= 2:
            g2 = g[1 + ndims:]
            t = f2 * p2
            t += f3() * sq
            gz[0] += np.einsum("cnw,cnw->nw", g2, t)
            gz[1:1 + ndims][second] += (2.0 * f2) * g2 * p1s
            np.multiply(g2, f1, out=gz[1 + ndims:])
        grads = []
        if hn is not None:
            grads.append(gz * c)
        if cn is not None:
            grads.append(np.asarray(np.vdot(gz.ravel(), hv.ravel()), dtype=z.dtype).reshape(cv.shape))
        return grads

    return tape.record(f"act_{kind}", out, parents, vjp)


def _activation_jet_fused(tape, hv, hn, cv, cn, c, kind, ndims, second, order):
    hv = np.ascontiguousarray(hv)
    code = _kernels.KIND_CODES.get(kind)
    if code is None:
        raise RejectedInput(f"unknown activation {kind!r}")
    sidx = _kernels.sidx_array(second, ndims) if order == 2 else np.zeros(0, dtype=np.int64)
    out = np.empty_like(hv)
    f0, f1 = _kernels.phi01(kind, hv[0] * c)
    _kernels.act_forward(hv, c, code, ndims, sidx, order, out, f0, f1)

    def vjp(g):
        gh = np.zeros_like(hv)
        gc = _kernels.act_backward(np.ascontiguousarray(g), hv, c, code, ndims, sidx, order,
                                   f0, f1, gh)
        grads = [gh] if hn is not None else []
        if cn is not None:
            grads.append(np.asarray(gc, dtype=hv.dtype).reshape(cv.shape))
        return grads

    parents = tuple(p for p in (hn, cn) if p is not None)
    return tape.record(f"act_{kind}", out, parents, vjp)


@dataclass
class Jet2:
    """Value plus first and pure-second derivatives along the tracked input dims.

    Entries are arrays over a batch of points, or tape Nodes when recorded.
    ``second`` is None when only first order was requested, ``first`` is None
    for order 0.
    """

    value: object
    first: list | None = None
    second: list | None = None

    @property
    def ndims(self):
        return 0 if self.first is None else len(self.first)

    def d(self, i):
        if self.first is None or i >= len(self.first):
            raise RejectedInput(f"jet carries no first derivative along tracked dim {i}")
        return self.first[i]

    def dd(self, i):
        if self.second is None or i >= len(self.second) or self.second[i] is None:
            raise RejectedInput(f"jet carries no second derivative along tracked dim {i}")
        return self.second[i]

    def numeric(self):
        """Copy with Nodes replaced by their values."""
        def val(x):
            return x.value if isinstance(x, Node) else x
        return Jet2(val(self.value),
                    None if self.first is None else [val(x) for x in self.first],
                    None if self.second is None else [None if x is None else val(x) for x in self.second])


class JetCounter:
    """Counts derivative-channel evaluations (points x derivative channels) by tag."""

    def __init__(self):
        self.derivatives = Counter()
        self.points = Counter()

    def record(self, tag, n_points, n_channels):
        self.points[tag] += n_points
        self.derivatives[tag] += n_points * (n_channels - 1)

    def reset(self):
        self.derivatives.clear()
        self.points.clear()


@dataclass
class BoundParams:
    """A network's parameters registered as tape leaves."""

    weights: list
    biases: list
    slopes: list

    def leaves(self):
        """Leaves in packing order: W1, b1, a1, W2, b2, a2, ..., WL, bL."""
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [w, b]
            if k < len(self.slopes):
                out.append(self.slopes[k])
        return out


def bind(tape, params) -> BoundParams:
    return BoundParams([tape.leaf(w) for w in params.weights],
                       [tape.leaf(b) for b in params.biases],
                       [tape.leaf(a) for a in params.slopes])


def eval_jet(params, points, tracked_dims, order=2, tape=None, bound=None,
             counter=None, tag="jet", second_dims=None):
    """Value and input derivatives of every network output at ``points``.

    ``params`` is anything shaped like ``network.NetworkParams``. With ``bound``
    (from :func:`bind` on ``tape``) the jets are tape Nodes and gradients flow
    to the parameters; otherwise plain arrays are returned. A single point (1-D)
    yields jets of length-1 arrays.

    ``second_dims`` restricts the pure second derivatives to a subset of
    ``tracked_dims`` (default: all of them); skipped entries are None.
    """
    pts = np.asarray(points)
    if pts.ndim == 1:
        pts = pts[None, :]
    n_in = params.weights[0].shape[1]
    if pts.ndim != 2 or pts.shape[1] != n_in:
        raise RejectedInput(f"points must have {n_in} columns, got shape {np.shape(points)}")
    tracked = list(tracked_dims)
    if any(not 0 <= d < n_in for d in tracked) or len(set(tracked)) != len(tracked):
        raise RejectedInput(f"tracked dims {tracked} invalid for input width {n_in}")
    if order not in (0, 1, 2):
        raise RejectedInput(f"order must be 0, 1 or 2, got {order}")
    if second_dims is None:
        second_dims = tracked
    if any(d not in tracked for d in second_dims):
        raise RejectedInput(f"second_dims {list(second_dims)} not a subset of tracked dims {tracked}")
    ndims = len(tracked) if order >= 1 else 0
    second = [tracked.index(d) for d in second_dims] if order == 2 else []
    n_ch = 1 + ndims + len(second)
    if tape is None:
        tape = Tape(params.weights[0].dtype)
    dtype = tape.dtype
    npts = pts.shape[0]

    z0 = np.zeros((n_ch, npts, n_in), dtype=dtype)
    z0[0] = pts
    for j in range(ndims):
        z0[1 + j, :, tracked[j]] = 1.0
    if counter is not None:
        counter.record(tag, npts, n_ch)

    if bound is None:
        weights = [tape.constant(w) for w in params.weights]
        biases = [tape.constant(b) for b in params.biases]
        slopes = [tape.constant(a) for a in params.slopes]
    else:
        weights, biases, slopes = bound.weights, bound.biases, bound.slopes

    sec = slice(None) if second == list(range(ndims)) else second
    z = tape.constant(z0)
    n_layers = len(weights)
    for k in range(n_layers):
        z = affine_channels(z, weights[k], biases[k])
        if k < n_layers - 1:
            z = activation_jet(z, slopes[k] * params.scale, params.activation, ndims, sec, order)

    jets = []
    for j in range(z.value.shape[2]):
        out = z[:, :, j]
        value = out[0]
        first = [out[1 + i] for i in range(ndims)] if order >= 1 else None
        snd = None
        if order == 2:
            snd = [None] * ndims
            for pos, i in enumerate(second):
                snd[i] = out[1 + ndims + pos]
        jets.append(Jet2(value, first, snd))
    if bound is None:
        jets = [j.numeric() for j in jets]
    return jets


def backward_params(loss_root, bound_list) -> np.ndarray:
    """Flat gradient of a scalar loss, concatenated over networks in packing order."""
    if not isinstance(bound_list, (list, tuple)):
        bound_list = [bound_list]
    leaves = [leaf for b in bound_list for leaf in b.leaves()]
    if not isinstance(loss_root, Node):
        # a loss that never touched the tape is constant in every parameter
        return np.concatenate([np.zeros(leaf.value.size, dtype=leaf.value.dtype) for leaf in leaves])
    grads = loss_root.tape.gradients(loss_root, leaves)
    return np.concatenate([g.ravel() for g in grads])


def fd_check(f: Callable[[np.ndarray], float], params, step=1e-6,
             grad: np.ndarray | None = None, grad_fn: Callable | None = None, coords=None) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|) using central differences.

    The analytic gradient comes from ``grad`` or ``grad_fn(params)``. ``coords``
    restricts the comparison to a subset of indices (default: all).
    """
    if step <= 0:
        raise RejectedInput("finite-difference step must be positive")
    x = np.array(params, dtype=np.float64)
    if grad is None:
        if grad_fn is None:
            raise RejectedInput("need an analytic gradient or a function computing it")
        grad = grad_fn(x)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise RejectedInput(f"gradient shape {grad.shape} != parameter shape {x.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("analytic gradient is not finite", int(np.flatnonzero(~np.isfinite(grad))[0]))
    worst = 0.0
    for i in (range(x.size) if coords is None else coords):
        saved = x[i]
        x[i] = saved + step
        fp = float(f(x))
        x[i] = saved - step
        fm = float(f(x))
        x[i] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("objective not finite under perturbation", i)
        g_fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(grad[i] - g_fd) / max(1.0, abs(g_fd)))
    return worst
