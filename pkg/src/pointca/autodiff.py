"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation on a tensor that requires gradients appends a node to a
:class:`Tape`. Nodes are recorded in creation order, so walking the tape
backwards is a valid reverse topological order. A tape can be consumed by
exactly one ``backward`` call; a new forward pass is needed for the next.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    backward(y)
    x.grad  # array([2., 4.])
"""

from __future__ import annotations

import contextlib
import heapq
import itertools
import threading

import numpy as np

from .errors import EmptyCloud, NotScalar, ShapeMismatch, StaleTape
from .metrics import mutual_nearest

_state = threading.local()
_sequence = itertools.count()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tape:
    """Ordered record of the operations reachable from one forward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def record(self, node):
        if self.consumed:
            raise StaleTape("tape already consumed by backward(); run a new forward pass")
        self.nodes.append(node)

    def absorb(self, other):
        """Merge another live tape into this one, keeping creation order."""
        if other.consumed:
            raise StaleTape("input belongs to a graph that was already differentiated")
        self.nodes = list(heapq.merge(self.nodes, other.nodes, key=lambda n: n._seq))
        for n in other.nodes:
            n._tape = self
        other.nodes = []
        other.consumed = True

    def backward(self, loss, seed=1.0):
        if loss.values.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise StaleTape("backward() was already called on this graph")
        self.consumed = True
        grads = {id(loss): np.full(loss.shape, float(seed))}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes = []


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_tape", "_seq")
    __array_priority__ = 100

    def __init__(self, values, requires_grad=False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None
        self._seq = 0

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.values.reshape(-1)[0])

    def numpy(self):
        return self.values

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=1.0):
        backward(self, seed)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __truediv__ = lambda self, o: mul(self, 1.0 / o)


def backward(loss: Tensor, seed=1.0):
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` set."""
    if loss.values.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            loss.grad = np.full(loss.shape, float(seed)) + (0 if loss.grad is None else loss.grad)
        return
    loss._tape.backward(loss, seed)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward_fn):
    out = Tensor(values)
    if not _grad_enabled() or not any(p.requires_grad for p in parents):
        return out
    tape = None
    for p in parents:
        if p._tape is not None:
            if p._tape.consumed:
                raise StaleTape("input belongs to a graph that was already differentiated")
            if tape is None:
                tape = p._tape
            elif p._tape is not tape:
                tape.absorb(p._tape)
    if tape is None:
        tape = Tape()
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward_fn
    out._tape = tape
    out._seq = next(_sequence)
    tape.record(out)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    av, bv = a.values, b.values
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., p) and a 2-D ``b`` of shape (p, q)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def grads(g):
        ga = g @ bv.T
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return _make(av @ bv, (a, b), grads)


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def square(x):
    x = as_tensor(x)
    v = x.values
    return _make(v * v, (x,), lambda g: (2.0 * v * g,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.values)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def log(x):
    x = as_tensor(x)
    v = x.values
    return _make(np.log(v), (x,), lambda g: (g / v,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,))


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def grads(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.values.sum(axis=axis), (x,), grads)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.values.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def max_over_points(x):
    """Max over the point axis (second to last); ties route to the lowest index."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatch(f"max_over_points needs (..., N, C), got {x.shape}")
    arg = np.argmax(x.values, axis=-2)
    out = np.take_along_axis(x.values, arg[..., None, :], axis=-2)[..., 0, :]

    def grads(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _make(out, (x,), grads)


def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    """Numerically stable ``log(softmax(x))`` over the last axis."""
    x = as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def l2_norm_rows(x):
    """Euclidean norm over the last axis; the gradient at a zero row is zero."""
    x = as_tensor(x)
    v = x.values
    n = np.sqrt((v * v).sum(axis=-1))

    def grads(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], v / safe[..., None], 0.0) * g[..., None],)

    return _make(n, (x,), grads)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=axis)))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def differentiable_chamfer(a, b, variant="CD_P"):
    """Chamfer distance between (N, 3) clouds, differentiable in both inputs.

    Nearest-neighbor correspondences are fixed at forward time and treated as
    constants in the backward pass. Batched inputs (B, N, 3) give the mean over
    the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3 or a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeMismatch(f"chamfer needs matching (.., N, 3) inputs, got {a.shape}, {b.shape}")
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise EmptyCloud("chamfer of an empty cloud")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeMismatch("batch sizes differ")
    if variant not in ("CD_P", "CD_T"):
        raise ShapeMismatch(f"unknown Chamfer variant {variant!r}")
    av = a.values.reshape(-1, *a.shape[-2:])
    bv = b.values.reshape(-1, *b.shape[-2:])
    batch = av.shape[0]
    ga, gb = np.zeros_like(av), np.zeros_like(bv)
    total = 0.0
    for s in range(batch):
        pa, pb = av[s], bv[s]
        iab, dab, iba, dba = mutual_nearest(pa, pb)
        dif_ab = pa - pb[iab]
        dif_ba = pb - pa[iba]
        na, nb = pa.shape[0], pb.shape[0]
        if variant == "CD_P":
            total += 0.5 * (dab.mean() + dba.mean())
            u_ab = np.where(dab[:, None] > 0, dif_ab / np.where(dab > 0, dab, 1.0)[:, None], 0.0)
            u_ba = np.where(dba[:, None] > 0, dif_ba / np.where(dba > 0, dba, 1.0)[:, None], 0.0)
            c_ab, c_ba = 0.5 / na * u_ab, 0.5 / nb * u_ba
        else:
            total += (dab**2).mean() + (dba**2).mean()
            c_ab, c_ba = 2.0 / na * dif_ab, 2.0 / nb * dif_ba
        ga[s] += c_ab
        np.add.at(gb[s], iab, -c_ab)
        gb[s] += c_ba
        np.add.at(ga[s], iba, -c_ba)
    value = total / batch
    ga = ga.reshape(a.shape) / batch
    gb = gb.reshape(b.shape) / batch
    return _make(np.array(value), (a, b), lambda g: (g * ga, g * gb))


def differentiable_kl(p_logits, q_logits):
    """KL(softmax(p) || softmax(q)) over the last axis, summed over leading axes."""
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ShapeMismatch(f"KL needs equal shapes, got {p_logits.shape} and {q_logits.shape}")
    log_p = log_softmax(p_logits)
    log_q = log_softmax(q_logits)
    p = softmax(p_logits)
    return sum(mul(p, sub(log_p, log_q)))


def cross_entropy(logits, label):
    """Negative log-likelihood of integer ``label`` under softmax(logits)."""
    logits = as_tensor(logits)
    onehot = np.zeros(logits.shape)
    onehot[..., label] = 1.0
    return mul(sum(mul(log_softmax(logits), onehot)), -1.0)
