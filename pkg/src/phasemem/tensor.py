"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it depends on something
that requires a gradient, remembers its parents and a closure mapping the
upstream gradient to one gradient per parent.  ``loss.backward()`` walks the
recorded graph in reverse topological order.

Arithmetic never broadcasts implicitly.  Shapes must agree exactly, and any
replication (a bias over a batch, a position table over frames) goes
through the explicit :func:`expand` op so that its gradient reduction is
visible in the graph.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import DimensionError, InputError, NumericError, UsageError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64``)."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaf gradients accumulate across calls; call ``zero_grad`` between
        optimisation steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor without autodiff lineage")

        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None and hasattr(like, "dtype"):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product of equal shapes, or scaling by a Python number."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b, like=a)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(x):
    x = as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x):
    x = as_tensor(x)
    return mul(tensor_sum(x), 1.0 / x.data.size)


def matmul(a, b):
    """Matrix product of 2-D tensors, or of stacks with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    x = as_tensor(x)
    k, n = weight.shape
    if x.shape[-1] != k:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (n,):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(lead + (k,)) if x.requires_grad else None
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ------------------------------------------------------------------- shaping

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def expand(x, shape):
    """Replicate ``x`` to ``shape``; size-1 or missing leading dims are repeated."""
    x = as_tensor(x)
    shape = tuple(shape)
    lead = len(shape) - x.ndim
    if lead < 0 or any(s != 1 and s != t for s, t in zip(x.shape, shape[lead:])):
        raise DimensionError(f"expand: cannot expand {x.shape} to {shape}")
    repeated = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(x.shape) if s == 1 and shape[lead + i] != 1)

    def backward(g):
        g = g.sum(axis=repeated, keepdims=True) if repeated else g
        return (g.reshape(x.shape),)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), backward)


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, xs, backward)


def take(x, index, axis):
    """Select one integer position along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(np.take(x.data, index, axis=axis), (x,), backward)


# --------------------------------------------------------------- nonlinear

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), backward)


def softmax(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def softmax_rows(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit (population) variance, then scale."""
    x = as_tensor(x)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: feature dimension is 0")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gb = g.sum(axis=lead)
        gg = (g * xhat).sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gain, bias), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels "
                             f"for batch of {b}")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ------------------------------------------------------------ verification

def grad_check(f, inputs, h=1e-5):
    """Largest relative disagreement between backward() and central differences.

    ``f`` maps tensors to a scalar tensor; ``inputs`` are float64 arrays or
    tensors.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x) for x in inputs]
    if any(a.dtype != np.float64 for a in arrays):
        raise UsageError("grad_check requires float64 inputs")

    with precision(np.float64):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        f(*leaves).backward()
        worst = 0.0
        for leaf, base in zip(leaves, arrays):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
            flat = base.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f(*[Tensor(a) for a in arrays]).item()
                flat[i] = orig - h
                down = f(*[Tensor(a) for a in arrays]).item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst
