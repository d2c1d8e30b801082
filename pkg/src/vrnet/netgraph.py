"""Small reverse-mode automatic differentiation engine on NumPy arrays.

Every operation returns a :class:`Node` holding its value and a closure that
maps the output adjoint to input adjoints. Calling :meth:`Node.backward` on a
scalar walks the graph in reverse topological order and accumulates
gradients into leaf nodes (typically :class:`Parameter`).

Everything runs in float64.
"""
import json
import math
import os
from collections import OrderedDict

import numpy as np

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class Node:
    """A value in the computation graph.

    Parameters
    ----------
    value : array_like
        Forward value, stored as float64.
    parents : tuple of Node
        Inputs of the operation that produced this node.
    backward : callable, optional
        ``backward(g) -> tuple`` of adjoints, one per parent (``None`` to skip).
    requires_grad : bool
        Only meaningful for leaves; interior nodes inherit it from parents.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        if parents:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = bool(requires_grad)
        if self.requires_grad and backward is not None:
            self.parents = tuple(parents)
            self._backward = backward
        else:
            self.parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate ``d self / d leaf`` into every reachable leaf's ``grad``."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ValueError(f"seed shape {grad.shape} does not match {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swap_last(self)


class Parameter(Node):
    """Trainable leaf with AdamW moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, value):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def constant(x):
    return Node(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g / bv, av.shape),
                           _unbroadcast(-g * out / bv, bv.shape)))


def square(x):
    x = as_node(x)
    xv = x.value
    return Node(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sqrt(x):
    x = as_node(x)
    out = np.sqrt(x.value)
    return Node(out, (x,), lambda g: (0.5 * g / out,))


def exp(x):
    x = as_node(x)
    out = np.exp(x.value)
    return Node(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_node(x)
    xv = x.value
    return Node(np.log(xv), (x,), lambda g: (g / xv,))


def absolute(x):
    """``|x|`` with subgradient 0 at 0."""
    x = as_node(x)
    sgn = np.sign(x.value)
    return Node(np.abs(x.value), (x,), lambda g: (g * sgn,))


def matmul(a, b):
    """Batched matrix product of operands with at least two dimensions."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Node(av @ bv, (a, b), back)


def swap_last(x):
    x = as_node(x)
    return Node(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def dense(x, w, b=None):
    """Affine map ``x @ w + b`` with ``w`` of shape (in, out)."""
    x, w = as_node(x), as_node(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- reductions and shape

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_node(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(x.value.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_node(x)
    n = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


def _extreme(x, axis, fn):
    x = as_node(x)
    xv = x.value
    axes = tuple(range(xv.ndim)) if axis is None else tuple(np.atleast_1d(axis) % xv.ndim)
    keep = [a for a in range(xv.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = np.transpose(xv, perm)
    lead = moved.shape[:len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = fn(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        gm = gf.reshape(moved.shape)
        return (np.transpose(gm, np.argsort(perm)),)

    return Node(out, (x,), back)


def amax(x, axis=None):
    """Maximum over ``axis``; the adjoint flows to the first maximiser."""
    return _extreme(x, axis, np.argmax)


def amin(x, axis=None):
    return _extreme(x, axis, np.argmin)


def reshape(x, shape):
    x = as_node(x)
    old = x.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    x = as_node(x)
    return reshape(x, (x.shape[0], -1))


def getitem(x, index):
    x = as_node(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Node(x.value[index], (x,), back)


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(np.concatenate(vals, axis=axis), tuple(nodes), back)


def stack(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return Node(out, tuple(nodes), back)


def frobenius_norm(x, axes=(-2, -1)):
    """``sqrt(sum x^2)`` over ``axes``; zero adjoint where the norm vanishes."""
    x = as_node(x)
    xv = x.value
    nrm = np.sqrt(np.sum(xv * xv, axis=axes, keepdims=True))
    safe = np.where(nrm > 0.0, nrm, 1.0)

    def back(g):
        return (np.expand_dims(g, axes) * np.where(nrm > 0.0, xv / safe, 0.0),)

    return Node(np.squeeze(nrm, axis=axes), (x,), back)


# ---------------------------------------------------------------- activations

def relu(x):
    x = as_node(x)
    pos = x.value > 0.0
    return Node(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(v):
    # numerically stable in both tails
    out = np.empty_like(v)
    pos = v >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = as_node(x)
    out = _sigmoid(x.value)
    return Node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = as_node(x)
    out = np.tanh(x.value)
    return Node(out, (x,), lambda g: (g * (1.0 - out * out),))


def selu(x):
    x = as_node(x)
    xv = x.value
    neg = np.expm1(np.minimum(xv, 0.0))
    out = SELU_SCALE * np.where(xv > 0.0, xv, SELU_ALPHA * neg)
    d = SELU_SCALE * np.where(xv > 0.0, 1.0, SELU_ALPHA * (neg + 1.0))
    return Node(out, (x,), lambda g: (g * d,))


def identity(x):
    return as_node(x)


ACTIVATIONS = {
    "relu": relu,
    "selu": selu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": identity,
}


def mixed_activation(x):
    """Apply [SELU, Tanh, Sigmoid, Identity] to four contiguous feature blocks.

    The last axis is split into four blocks of ``width // 4``; any remainder
    joins the identity block.
    """
    x = as_node(x)
    width = x.shape[-1]
    q = width // 4
    if q == 0:
        return x
    xv = x.value
    out = xv.copy()
    d = np.ones_like(xv)
    a = xv[..., :q]
    neg = np.expm1(np.minimum(a, 0.0))
    out[..., :q] = SELU_SCALE * np.where(a > 0.0, a, SELU_ALPHA * neg)
    d[..., :q] = SELU_SCALE * np.where(a > 0.0, 1.0, SELU_ALPHA * (neg + 1.0))
    t = np.tanh(xv[..., q:2 * q])
    out[..., q:2 * q] = t
    d[..., q:2 * q] = 1.0 - t * t
    s = _sigmoid(xv[..., 2 * q:3 * q])
    out[..., 2 * q:3 * q] = s
    d[..., 2 * q:3 * q] = s * (1.0 - s)
    return Node(out, (x,), lambda g: (g * d,))


# ---------------------------------------------------------------- image ops

def _kernel_taps(k, n):
    """Circular offsets of a centred length-``k`` correlation kernel on ``n`` pixels."""
    return (k // 2 - np.arange(k)) % n


def _kernel_image(w, h, wd):
    cout, cin, kh, kw = w.shape
    rows = _kernel_taps(kh, h)[:, None]
    cols = _kernel_taps(kw, wd)[None, :]
    img = np.zeros((cout, cin, h, wd))
    if kh <= h and kw <= wd:
        img[:, :, rows, cols] = w
    else:
        # kernel wider than the image: aliased taps add up
        np.add.at(img, (slice(None), slice(None), rows, cols), w)
    return img, rows, cols


def conv2d_periodic(x, w):
    """Periodic 2D cross-correlation with a centred kernel.

    ``out[b, o, i, j] = sum_{c, di, dj} w[o, c, di, dj] x[b, c, i + di - k//2, j + dj - k//2]``
    with indices wrapped modulo the image size (no padding pixels).

    Parameters
    ----------
    x : Node, shape (B, Cin, H, W)
    w : Node, shape (Cout, Cin, kh, kw)
    """
    x, w = as_node(x), as_node(w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {xv.shape}, kernel {wv.shape}")
    b, cin, h, wd = xv.shape
    need_x = x.requires_grad
    if wv.shape[2:] == (1, 1):
        wm = wv[:, :, 0, 0]

        def back1(g):
            gx = np.einsum("bohw,oc->bchw", g, wm, optimize=True) if need_x else None
            gw = np.einsum("bohw,bchw->oc", g, xv, optimize=True)[:, :, None, None]
            return gx, gw

        return Node(np.einsum("bchw,oc->bohw", xv, wm, optimize=True), (x, w), back1)
    kimg, rows, cols = _kernel_image(wv, h, wd)
    xh = np.fft.rfft2(xv)
    kh = np.fft.rfft2(kimg)
    # per-frequency channel mixing as a batched matmul
    xf = xh.transpose(2, 3, 0, 1)
    kf = kh.transpose(2, 3, 1, 0)
    yh = (xf @ kf).transpose(2, 3, 0, 1)
    out = np.fft.irfft2(yh, s=(h, wd))

    def back(g):
        gf = np.fft.rfft2(g).transpose(2, 3, 0, 1)
        gx = None
        if need_x:
            gx = np.fft.irfft2((gf @ np.conj(kf).swapaxes(-1, -2)).transpose(2, 3, 0, 1), s=(h, wd))
        gk = np.fft.irfft2((gf.swapaxes(-1, -2) @ np.conj(xf)).transpose(2, 3, 0, 1), s=(h, wd))
        gw = gk[:, :, rows, cols]
        return gx, gw

    return Node(out, (x, w), back)


def avgpool2(x):
    """2x2 average pooling with stride 2 on (B, C, H, W); odd edges are dropped."""
    x = as_node(x)
    xv = x.value
    b, c, h, w = xv.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError("avgpool2 needs at least 2x2 spatial input")
    out = xv[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def back(g):
        gx = np.zeros_like(xv)
        gx[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return Node(out, (x,), back)


def batchnorm(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Batch normalisation over every axis except axis 1.

    Parameters
    ----------
    state : dict
        Holds ``running_mean``, ``running_var`` (per channel) and
        ``num_batches``; updated in place in training mode.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    xv = x.value
    axes = (0,) + tuple(range(2, xv.ndim))
    bshape = [1] * xv.ndim
    bshape[1] = xv.shape[1]
    n = xv.size // xv.shape[1]
    if training:
        if n < 2:
            raise ValueError("batchnorm training needs more than one value per channel")
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        state["running_mean"] *= 1.0 - momentum
        state["running_mean"] += momentum * mu
        state["running_var"] *= 1.0 - momentum
        state["running_var"] += momentum * var * n / (n - 1)
        state["num_batches"] += 1
    else:
        if state["num_batches"] == 0:
            raise RuntimeError("batchnorm in eval mode before any training statistics exist")
        mu = state["running_mean"]
        var = state["running_var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu.reshape(bshape)) * inv.reshape(bshape)
    gv = gamma.value.reshape(bshape)
    out = gv * xhat + beta.value.reshape(bshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gv
        if training:
            dx = (inv.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return Node(out, (x, gamma, beta), back)


# ---------------------------------------------------------------- matrix exponential

_PADE_ORDER = 6
_PADE = [math.factorial(2 * _PADE_ORDER - k) * math.factorial(_PADE_ORDER)
         / (math.factorial(2 * _PADE_ORDER) * math.factorial(k) * math.factorial(_PADE_ORDER - k))
         for k in range(_PADE_ORDER + 1)]


def expm_array(a):
    """Matrix exponential of a batch ``(..., m, m)`` by Padé(6,6) scaling and squaring.

    The scaling exponent is chosen per matrix so that ``|a / 2^s|_1 <= 0.5``.
    """
    a = np.asarray(a, dtype=np.float64)
    shape = a.shape
    m = shape[-1]
    x = a.reshape(-1, m, m)
    norm1 = np.abs(x).sum(axis=1).max(axis=1)
    s = np.maximum(0, np.ceil(np.log2(np.maximum(norm1, 1e-300) / 0.5))).astype(int)
    x = x / (2.0 ** s)[:, None, None]
    eye = np.broadcast_to(np.eye(m), x.shape)
    num = _PADE[0] * eye
    den = _PADE[0] * eye
    p = eye
    for k in range(1, _PADE_ORDER + 1):
        p = p @ x
        num = num + _PADE[k] * p
        den = den + (-1) ** k * _PADE[k] * p
    e = np.linalg.solve(den, num)
    for k in range(int(s.max(initial=0))):
        sq = e @ e
        e = np.where((k < s)[:, None, None], sq, e)
    return e.reshape(shape)


def expm_frechet_adjoint(a, g):
    """``<g, d expm(a)[e]> = <expm_frechet_adjoint(a, g), e>`` for every ``e``."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    m = a.shape[-1]
    at = np.swapaxes(a, -1, -2)
    gn = np.sqrt(np.sum(g * g, axis=(-2, -1), keepdims=True))
    scale = np.where(gn > 0.0, gn, 1.0)
    # the Fréchet derivative is linear in its direction, so rescale the
    # direction to keep the block norm comparable to |a|
    an = np.maximum(np.sqrt(np.sum(a * a, axis=(-2, -1), keepdims=True)), 1.0)
    blk = np.zeros(a.shape[:-2] + (2 * m, 2 * m))
    blk[..., :m, :m] = at
    blk[..., m:, m:] = at
    blk[..., :m, m:] = g / scale * an
    return expm_array(blk)[..., :m, m:] * scale / an


def expm(x):
    """Differentiable batched matrix exponential."""
    x = as_node(x)
    xv = x.value
    return Node(expm_array(xv), (x,), lambda g: (expm_frechet_adjoint(xv, g),))


def custom(value, parents, vjp):
    """Wrap an externally computed value with a user supplied vector-Jacobian product."""
    return Node(value, tuple(as_node(p) for p in parents), vjp)


# ---------------------------------------------------------------- modules

class Module:
    """Container of parameters, buffers and sub-modules."""

    _buffers = ()

    def __init__(self):
        self.training = True

    def children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, self.buffer_get(name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def buffer_get(self, name):
        return getattr(self, name)

    def buffer_set(self, name, value):
        getattr(self, name)[...] = value

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        """Ordered mapping name -> array (parameters first, then buffers)."""
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.value
        for name, b in self.named_buffers():
            out[name] = np.asarray(b, dtype=np.float64)
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        targets = list(params) + [n for n, _ in self.named_buffers()]
        missing = [n for n in targets if n not in state]
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.value.shape}")
            p.value = arr.copy()
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
            p.step = 0
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for name in self._buffers:
            self.buffer_set(name, state[prefix + name])
        for name, child in self.children():
            child._load_buffers(state, prefix + name + ".")


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    """Affine layer with fan-in uniform initialisation."""

    def __init__(self, n_in, n_out, rng, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, bound, (n_in, n_out)))
        self.bias = Parameter(_uniform(rng, bound, (n_out,))) if bias else None

    def __call__(self, x):
        return dense(x, self.weight, self.bias)


class PeriodicConv2d(Module):
    """Bias-free periodic convolution (followed by batchnorm in practice)."""

    def __init__(self, c_in, c_out, k, rng):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, k, k)))

    def __call__(self, x):
        return conv2d_periodic(x, self.weight)


class BatchNorm(Module):
    """Batch normalisation over the channel axis (axis 1)."""

    _buffers = ("running_mean", "running_var", "num_batches")

    def __init__(self, n, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(n))
        self.beta = Parameter(np.zeros(n))
        self.momentum = momentum
        self.eps = eps
        self.state = {
            "running_mean": np.zeros(n),
            "running_var": np.ones(n),
            "num_batches": 0,
        }

    def buffer_get(self, name):
        return np.asarray(self.state[name], dtype=np.float64)

    def buffer_set(self, name, value):
        if name == "num_batches":
            self.state[name] = int(np.asarray(value).reshape(()))
        else:
            self.state[name] = np.array(value, dtype=np.float64).reshape(self.state[name].shape)

    def __call__(self, x):
        return batchnorm(x, self.gamma, self.beta, self.state, self.training,
                         self.momentum, self.eps)


# ---------------------------------------------------------------- optimisation

class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks parameters by ``1 - lr * weight_decay`` and then
    applies the bias-corrected Adam update.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        b1, b2 = betas
        if not lr > 0.0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= b1 < 1.0:
            raise ValueError("beta1 must lie in [0, 1)")
        if not 0.0 < b2 < 1.0:
            raise ValueError("beta2 must lie in (0, 1)")
        if not eps > 0.0:
            raise ValueError("eps must be positive")
        if weight_decay < 0.0:
            raise ValueError("weight decay must be non-negative")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)

    def step(self):
        adamw_step(self.params, self.lr, *self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adamw_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One AdamW update of every parameter with a populated gradient."""
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.step += 1
        if weight_decay:
            p.value *= 1.0 - lr * weight_decay
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * mhat / (np.sqrt(vhat) + eps)


class LrSchedule:
    """Reduce-on-plateau learning-rate schedule.

    Parameters
    ----------
    lr : float
        Initial learning rate.
    factor : float
        Multiplier applied after ``patience`` epochs without improvement.
    patience : int
    min_lr : float
        Floor; the rate never drops below it.
    threshold : float
        Relative improvement needed to reset the counter.
    """

    def __init__(self, lr, factor=0.5, patience=50, min_lr=0.0, threshold=0.0):
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if patience < 0:
            raise ValueError("patience must be non-negative")
        self.current_lr = float(lr)
        self.factor = float(factor)
        self.patience = int(patience)
        self.min_lr = float(min_lr)
        self.threshold = float(threshold)
        self.best = math.inf
        self.stagnant = 0

    def step(self, metric):
        metric = float(metric)
        if not math.isfinite(metric):
            raise ValueError("plateau metric must be finite")
        if metric < self.best * (1.0 - self.threshold) or self.best == math.inf:
            self.best = metric
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                self.current_lr = max(self.current_lr * self.factor, self.min_lr)
                self.stagnant = 0
        return self.current_lr

    def copy(self):
        new = LrSchedule.__new__(LrSchedule)
        new.__dict__.update(self.__dict__)
        return new


def plateau_step(schedule, metric):
    """Functional form of :meth:`LrSchedule.step`; returns an updated copy."""
    new = schedule.copy()
    new.step(metric)
    return new


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "vrnet-checkpoint"


def _bin_path(manifest_path):
    root, _ = os.path.splitext(manifest_path)
    return root + ".bin"


def save_checkpoint(path, module, meta=None):
    """Write ``path`` (JSON manifest) and a sibling ``.bin`` of little-endian float64."""
    state = module.state_dict()
    entries, blobs, offset = [], [], 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dtype": "<f8",
        "binary": os.path.basename(_bin_path(path)),
        "tensors": entries,
        "meta": meta or {},
    }
    with open(_bin_path(path), "wb") as fh:
        for b in blobs:
            fh.write(b)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def read_checkpoint(path):
    """Return ``(state, meta)`` from a checkpoint manifest path."""
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint manifest")
    data = np.fromfile(os.path.join(os.path.dirname(path) or ".", manifest["binary"]), dtype="<f8")
    state = OrderedDict()
    for e in manifest["tensors"]:
        chunk = data[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"checkpoint binary truncated at {e['name']}")
        state[e["name"]] = chunk.reshape(e["shape"]).astype(np.float64)
    return state, manifest["meta"]
