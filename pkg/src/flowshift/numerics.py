"""Tensor kernels with reverse-mode gradients, a finite-difference oracle and Adam.

Every differentiable op records a closure that maps the output gradient to
its parents' gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order. Storage precision is global (``float32`` by
default); ``precision(np.float64)`` switches it for verification runs.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_DTYPE = np.float32
_GRAD_ENABLED = True


class NumericsError(RuntimeError):
    """Raised when a kernel sees non-finite data or inconsistent shapes."""


class ShapeError(NumericsError, ValueError):
    pass


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default storage dtype."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Counter-based generator (Philox); same seed gives the same stream.

    ``stream`` selects an independent sub-stream of the same seed.
    """
    if stream is None:
        return np.random.Generator(np.random.Philox(int(seed)))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise NumericsError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ----------------------------------------------------
    # make ``ndarray <op> Tensor`` defer to the reflected Tensor methods
    __array_ufunc__ = None

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2 * g * ad,))


def abs_(a):
    a = as_tensor(a)
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0, ad).astype(ad.dtype)

    def backward(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        e = np.exp(ad[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[x] for x in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), backward)


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array (no repeats)."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = indices
        full[tuple(sl)] = g
        return (full,)

    return _result(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# linear algebra, convolution, pooling
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def dense(x, weight, bias=None):
    """``x @ weight.T + bias`` for x of shape (N, in) and weight (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, backward)


def conv2d(x, kernel, bias=None, padding=0):
    """Stride-1 cross-correlation of (N, C, H, W) input with (O, C, kh, kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {ck}")
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("kernel larger than padded input")
    xd = np.ascontiguousarray(x.data)
    cols = kernels.im2col(xd, kh, kw, padding)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.ascontiguousarray(g2 @ wmat), n, c, h, w, kh, kw, padding)
        grads = [gx, (g2.T @ cols).reshape(kernel.shape)]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, backward)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    ld = logits.data
    shifted = ld - ld.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (logits,), backward)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy (natural log) over the batch."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(lp.shape, dtype=lp.dtype)
    onehot[np.arange(len(targets)), targets] = 1
    return -(sum_(lp * onehot) * (1.0 / len(targets)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **kw):
        p = param.data if isinstance(param, Tensor) else np.asarray(param)
        return cls(np.zeros_like(p), np.zeros_like(p), 0, **kw)


def adam_update(param, grad, state: AdamState, lr: float, name: str = "param"):
    """One bias-corrected Adam step. Returns ``(new_param, new_state)``."""
    param = np.asarray(param)
    grad = np.asarray(grad, dtype=param.dtype)
    if param.shape != grad.shape:
        raise ShapeError(f"{name}: grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericsError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new.astype(param.dtype), AdamState(m, v, t, state.beta1, state.beta2, state.eps)


@dataclass
class Adam:
    """Adam over a dict of named leaf tensors, updated in place."""

    params: dict
    lr: float
    states: dict = field(default_factory=dict)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, scale: float = 1.0):
        """Apply one update; gradients are multiplied by ``scale`` first.

        All-or-nothing: a fault on any parameter leaves every parameter as it was.
        """
        updates = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            state = self.states.get(name) or AdamState.zeros_like(p)
            updates[name] = adam_update(p.data, g * scale, state, self.lr, name)
        for name, (data, state) in updates.items():
            self.params[name].data, self.states[name] = data, state


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x`` (64-bit)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x.copy()))
        flat[i] = orig - eps
        down = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def finite_diff_jacobian(f, x, eps=1e-5):
    """Central-difference Jacobian of vector-valued ``f`` (flattened) at ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = np.asarray(f(x.copy()), dtype=np.float64).reshape(-1)
        flat[i] = orig - eps
        down = np.asarray(f(x.copy()), dtype=np.float64).reshape(-1)
        flat[i] = orig
        cols.append((up - down) / (2 * eps))
    return np.stack(cols, axis=1)


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


LOG_2PI = math.log(2 * math.pi)
