"""Reverse-mode autodiff over dense float64 numpy tensors.

Operations on tensors that require gradients are recorded on the active
:class:`Tape`. A tape supports exactly one backward pass::

    with Tape() as tape:
        loss = ((W @ x) ** 2).sum()
    grads = backward(tape, loss)

Also hosts the Adam optimiser, a finite-difference gradient checker and the
``EQF1`` binary checkpoint format.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_ACTIVE_TAPES: list["Tape"] = []


class ShapeMismatch(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def record(self, node):
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        self.nodes.append(node)


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None

    # -- plumbing -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # -- operator sugar -------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis):
        return max_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        if _ACTIVE_TAPES:
            _ACTIVE_TAPES[-1].record(out)
    return out


def unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- binary elementwise ------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    take_a = a.data <= b.data
    return _node(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(np.where(take_a, g, 0.0), a.shape),
                            unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch axes into one contraction instead of a batched product + sum
                ga_full = np.broadcast_to(a.data, g.shape[:-1] + (a.shape[-1],))
                gb = ga_full.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), back)


# -- unary elementwise -------------------------------------------------------
def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def elu(a):
    a = as_tensor(a)
    pos = a.data > 0.0
    expm = np.expm1(np.minimum(a.data, 0.0))
    return _node(np.where(pos, a.data, expm), (a,),
                 lambda g: (np.where(pos, g, g * (expm + 1.0)),))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def abs_(a):
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def norm_rows(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the subgradient at zero is zero."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, g * a.data / safe, 0.0),)

    return _node(n if keepdims else np.squeeze(n, axis=axis), (a,), back)


ACTIVATIONS = {"relu": relu, "elu": elu, "tanh": tanh, "identity": lambda a: a}


# -- reductions ----------------------------------------------------------------
def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand_like(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1) if a.size else 1
    return _node(out, (a,), lambda g: (_expand_like(g, a.shape, axis, keepdims) / count,))


def max_(a, axis):
    """Max over one axis; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def back(g):
        z = np.zeros(a.shape)
        np.put_along_axis(z, idx, np.expand_dims(g, axis), axis=axis)
        return (z,)

    return _node(np.squeeze(out, axis=axis), (a,), back)


# -- structural -----------------------------------------------------------------
def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, idx):
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)

    def back(g):
        z = np.zeros(a.shape)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _node(a.data[idx], (a,), back)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def sparse_left_matmul(A, h):
    """A @ h applied along axis -2 of h, for a constant scipy.sparse matrix A."""
    h = as_tensor(h)
    if h.ndim < 2 or A.shape[1] != h.shape[-2]:
        raise ShapeMismatch(f"sparse operand {A.shape} does not match {h.shape}")
    At = A.T.tocsr()

    def apply(M, x):
        moved = np.moveaxis(x, -2, 0)
        flat = moved.reshape(moved.shape[0], -1)
        out = np.asarray(M @ flat).reshape((M.shape[0],) + moved.shape[1:])
        return np.moveaxis(out, 0, -2)

    return _node(apply(A, h.data), (h,), lambda g: (apply(At, g),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _node(data, (a,), lambda g: (unbroadcast(g, a.shape),))


def expand_dims(a, axis):
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


# -- backward ------------------------------------------------------------------
def backward(tape: Tape, loss: Tensor):
    """Propagate d(loss) to every leaf reached; sets ``leaf.grad``.

    Returns a dict mapping each leaf tensor's id to its gradient array.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a backward pass")
    tape.consumed = True
    grads = {id(loss): np.ones(loss.shape)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None:
                leaves[id(parent)] = parent
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[key] = leaf.grad
    if loss.backward_fn is None and loss.requires_grad:
        loss.grad = np.ones(loss.shape)
        out[id(loss)] = loss.grad
    return out


def value_and_grad(f, params):
    """Evaluate ``f(tensors)`` on leaf copies of ``params`` (dict of arrays).

    Returns (loss value, dict name -> gradient array, zeros where unused).
    """
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = f(leaves)
    backward(tape, loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def grad_check(f, params, eps=1e-5, grad_fn=None):
    """Largest |analytic - central difference| / max(1, |analytic|) over all entries.

    ``grad_fn`` overrides the analytic gradient (used to test the checker itself).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if grad_fn is None:
        _, analytic = value_and_grad(f, params)
    else:
        analytic = grad_fn(params)

    def value(p):
        with Tape():
            return float(f({k: Tensor(v) for k, v in p.items()}).data)

    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value(params)
            flat[i] = orig - eps
            fm = value(params)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


# -- optimiser ---------------------------------------------------------------------
def adam_init(params):
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    step = state["step"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k!r} has shape {g.shape}, expected {p.shape}")
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, {"step": step, "m": new_m, "v": new_v}


def glorot_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# -- checkpoints -----------------------------------------------------------------
MAGIC = b"EQF1"


def save_checkpoint(path, tensors):
    """Write ``{name: array}`` in the EQF1 little-endian format."""
    chunks = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an EQF1 checkpoint")
    pos = 4
    out = {}
    while pos < len(buf):
        (name_len,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    return out
