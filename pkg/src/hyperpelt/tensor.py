"""Dense tensors with reverse-mode differentiation.

Every tensor wraps a row-major numpy array (float32 for model state, float64
inside the gradient checker).  Operations record their parents and a closure
computing input gradients; :func:`backward` walks the recorded graph in
reverse topological order.

Only the primitives the model needs are provided.  Broadcasting follows numpy
rules for ``add``/``mul``/``matmul`` and gradients are summed back to the
operand shapes.
"""

import contextlib
import itertools
import math

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "tensor", "no_grad", "grad_enabled", "backward", "graph_nodes",
    "matmul", "add", "sub", "mul", "neg", "concat", "take_slice", "softmax",
    "layernorm", "gelu", "relu", "adaptive_mean_pool", "embedding",
    "cross_entropy", "reshape", "transpose", "broadcast_to", "sum",
    "forward_primitive", "LN_EPS",
]

LN_EPS = 1e-6

_GELU_C = math.sqrt(2.0 / math.pi)
_grad_enabled = True
_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents",
                 "_backward", "_op", "_id")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum(self, axis)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op, data, parents, backward_fn):
    if not np.isfinite(data).all():
        shapes = ", ".join(str(p.shape) for p in parents)
        raise NumericError(f"{op}: non-finite output (input shapes {shapes})")
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), bw)


def gelu_grad(x):
    """Derivative of the tanh-approximated GeLU."""
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def gelu(x):
    xd = x.data
    out = 0.5 * xd * (1.0 + np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3)))
    return _make("gelu", out.astype(xd.dtype, copy=False), (x,),
                 lambda g: (g * gelu_grad(xd),))


def relu(x):
    xd = x.data
    return _make("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


# --------------------------------------------------------------------------
# linear algebra and layout

def matmul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    src = x.shape
    return _make("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, src),))


def sum(x, axis=None):
    xd = x.data
    out = xd.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            shapes = [tt.shape for tt in tensors]
            raise DimensionError(f"concat: shapes {shapes} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        grads = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(bounds[i], bounds[i + 1])
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return _make("concat", out, tensors, bw)


def take_slice(x, key):
    """Basic (view) indexing: ints and slices only."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, slice, np.integer)) and k is not Ellipsis:
            raise ContractError(f"slice: unsupported index {k!r}")
    try:
        out = x.data[key]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {x.shape}") from None

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make("slice", np.array(out), (x,), bw)


# --------------------------------------------------------------------------
# normalisation and activations

def softmax(x):
    """Softmax over the last axis."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def layernorm(x, scale, bias, eps=LN_EPS):
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    scale = _as_tensor(scale, x)
    bias = _as_tensor(bias, x)
    d = x.shape[-1]
    if scale.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layernorm: scale {scale.shape} / bias {bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * scale.data + bias.data

    def bw(g):
        gx = gs = gb = None
        if x.requires_grad:
            gh = g * scale.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if scale.requires_grad:
            gs = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gs, gb

    return _make("layernorm", out.astype(xd.dtype, copy=False), (x, scale, bias), bw)


def _pool_matrix(n, out_size, dtype):
    p = np.zeros((out_size, n), dtype=dtype)
    for i in range(out_size):
        lo = (i * n) // out_size
        hi = -((-(i + 1) * n) // out_size)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


def adaptive_mean_pool(x, out_size, axis=-2):
    """Segment-mean pooling of ``axis`` down to ``out_size`` entries."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if out_size < 1 or out_size > n:
        raise DimensionError(f"adaptive_mean_pool: cannot pool extent {n} to {out_size}")
    p = _pool_matrix(n, out_size, x.dtype)
    moved = np.moveaxis(x.data, ax, -1)
    out = np.moveaxis(moved @ p.T, -1, ax)

    def bw(g):
        gm = np.moveaxis(g, ax, -1) @ p
        return (np.moveaxis(gm, -1, ax),)

    return _make("adaptive_mean_pool", np.ascontiguousarray(out), (x,), bw)


def embedding(table, ids):
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding: id out of range [0, {table.shape[0]}) (got {ids.min()}..{ids.max()})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding", table.data[ids], (table,), bw)


def cross_entropy(logits, targets, weights=None):
    """Weighted sum of token negative log-likelihoods.

    ``weights`` has the shape of ``targets``; when omitted every position gets
    ``1 / targets.size`` (a plain mean).
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}")
    if targets.size == 0:
        raise ContractError("cross_entropy: empty target")
    if weights is None:
        weights = np.full(targets.shape, 1.0 / targets.size)
    w = np.asarray(weights, dtype=logits.dtype)
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = (np.log(s) + m)[..., 0]
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray((w * (lse - picked)).sum(), dtype=z.dtype)

    def bw(g):
        p = e / s
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w[..., None] * g),)

    return _make("cross_entropy", loss, (logits,), bw)


# --------------------------------------------------------------------------

_PRIMITIVES = {
    "matmul": lambda ins, at: matmul(*ins),
    "add": lambda ins, at: add(*ins),
    "mul": lambda ins, at: mul(*ins),
    "concat": lambda ins, at: concat(ins, at.get("axis", 0)),
    "slice": lambda ins, at: take_slice(ins[0], at["key"]),
    "softmax_lastdim": lambda ins, at: softmax(ins[0]),
    "layernorm": lambda ins, at: layernorm(*ins, eps=at.get("eps", LN_EPS)),
    "gelu": lambda ins, at: gelu(ins[0]),
    "relu": lambda ins, at: relu(ins[0]),
    "adaptive_mean_pool": lambda ins, at: adaptive_mean_pool(
        ins[0], at.get("out_size", 1), at.get("axis", -2)),
    "embedding_lookup": lambda ins, at: embedding(ins[0], at["ids"]),
    "cross_entropy": lambda ins, at: cross_entropy(ins[0], at["targets"], at.get("weights")),
}


def forward_primitive(kind, inputs, **attrs):
    """Apply a named primitive; used by generic drivers and tests."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn([_as_tensor(t) for t in inputs], attrs)


# --------------------------------------------------------------------------
# reverse pass

def graph_nodes(root):
    """Tensors reachable from ``root`` through recorded ops, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p._id not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss._id: np.ones_like(loss.data)}
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
