"""Invertible building blocks: ActNorm, LU-parameterized 1x1 convolution,
additive coupling, and the space-to-channel squeeze.

Every layer's ``forward`` returns ``(y, logdet)`` with ``logdet`` of shape
(N,); ``inverse`` runs without recording gradients.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from . import numerics as nx
from .module import Module
from .numerics import NumericsError, ShapeError, Tensor


def _nchw(x):
    x = nx.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got {x.shape}")
    return x


def _per_sample(total, n):
    """Broadcast a scalar log-determinant tensor to shape (N,)."""
    return nx.broadcast_to(nx.reshape(total, (1,)), (n,))


# ---------------------------------------------------------------------------
# squeeze
# ---------------------------------------------------------------------------

def squeeze(x):
    """(N, C, H, W) -> (N, 4C, H/2, W/2); out[n, 4i+c] = x[n, i, 2h + c//2, 2w + c%2]."""
    x = _nchw(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even spatial dims, got {h}x{w}")
    y = nx.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = nx.transpose(y, (0, 1, 3, 5, 2, 4))
    return nx.reshape(y, (n, 4 * c, h // 2, w // 2))


def unsqueeze(y):
    y = _nchw(y)
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs channels divisible by 4, got {c4}")
    c = c4 // 4
    x = nx.reshape(y, (n, c, 2, 2, h, w))
    x = nx.transpose(x, (0, 1, 4, 2, 5, 3))
    return nx.reshape(x, (n, c, 2 * h, 2 * w))


# ---------------------------------------------------------------------------
# ActNorm
# ---------------------------------------------------------------------------

class ActNorm(Module):
    """Per-channel affine map ``y = exp(log_s) * x + b`` with data-dependent init."""

    _buffers = ("initialized",)

    def __init__(self, channels):
        self.log_s = nx.parameter(np.zeros(channels))
        self.b = nx.parameter(np.zeros(channels))
        self.initialized = np.zeros((), dtype=np.float32)

    @property
    def is_initialized(self):
        return bool(self.initialized)

    def initialize(self, x, min_std=1e-6):
        """Set log_s, b so that this batch leaves the layer with zero mean, unit std."""
        if self.is_initialized:
            raise NumericsError("ActNorm already initialized")
        xd = np.asarray(nx.as_tensor(x).data, dtype=np.float64)
        if xd.shape[0] * xd.shape[2] * xd.shape[3] < 2:
            raise NumericsError("ActNorm init needs at least two values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        std = xd.std(axis=(0, 2, 3))
        bad = np.flatnonzero(std < min_std)
        if bad.size:
            raise NumericsError(f"ActNorm init: zero-variance channel(s) {bad.tolist()}")
        self.log_s.data = (-np.log(std)).astype(self.log_s.dtype)
        self.b.data = (-mean / std).astype(self.b.dtype)
        self.initialized = np.ones((), dtype=np.float32)

    def forward(self, x):
        x = _nchw(x)
        if not self.is_initialized:
            raise NumericsError("ActNorm used before initialization")
        n, c, h, w = x.shape
        scale = nx.reshape(nx.exp(self.log_s), (1, c, 1, 1))
        y = x * scale + nx.reshape(self.b, (1, c, 1, 1))
        return y, _per_sample(nx.sum_(self.log_s) * float(h * w), n)

    def inverse(self, y):
        y = _nchw(y)
        with nx.no_grad():
            c = y.shape[1]
            return Tensor((y.data - self.b.data.reshape(1, c, 1, 1))
                          * np.exp(-self.log_s.data).reshape(1, c, 1, 1), dtype=y.dtype)


# ---------------------------------------------------------------------------
# invertible 1x1 convolution
# ---------------------------------------------------------------------------

class InvConv1x1(Module):
    """W = P L (U + diag(sign * exp(log_diag))) applied per pixel."""

    _buffers = ("perm", "sign")

    def __init__(self, channels, rng=None, identity=False):
        if identity or rng is None:
            w = np.eye(channels)
        else:
            w, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
        p, lower, upper = scipy.linalg.lu(w)
        diag = np.diag(upper)
        self.perm = np.argmax(p, axis=1).astype(np.float64)  # P[i, perm[i]] = 1
        self.sign = np.sign(diag)
        self.lower = nx.parameter(np.tril(lower, -1))
        self.upper = nx.parameter(np.triu(upper, 1))
        self.log_diag = nx.parameter(np.log(np.abs(diag)))
        self._masks(channels)

    def _masks(self, c):
        self._lmask = np.tril(np.ones((c, c)), -1)
        self._umask = np.triu(np.ones((c, c)), 1)

    @property
    def channels(self):
        return self.log_diag.shape[0]

    def _perm_idx(self):
        return self.perm.astype(np.int64)

    def weight(self):
        c = self.channels
        eye = np.eye(c, dtype=self.lower.dtype)
        lower = self.lower * self._lmask.astype(self.lower.dtype) + eye
        diag = nx.reshape(nx.exp(self.log_diag) * self.sign.astype(self.lower.dtype), (1, c)) * eye
        upper = self.upper * self._umask.astype(self.upper.dtype) + diag
        # P[i, perm[i]] = 1, so (P M)[i] = M[perm[i]]
        return nx.take(nx.matmul(lower, upper), self._perm_idx(), axis=0)

    def forward(self, x):
        x = _nchw(x)
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"InvConv1x1 built for {self.channels} channels, got {c}")
        y = nx.matmul(self.weight(), nx.reshape(x, (n, c, h * w)))
        return nx.reshape(y, (n, c, h, w)), _per_sample(nx.sum_(self.log_diag) * float(h * w), n)

    def inverse(self, y):
        y = _nchw(y)
        n, c, h, w = y.shape
        yd = np.asarray(y.data, dtype=np.float64).transpose(1, 0, 2, 3).reshape(c, -1)
        z = np.empty_like(yd)
        z[self._perm_idx()] = yd  # undo P
        lower = np.tril(np.asarray(self.lower.data, np.float64), -1) + np.eye(c)
        upper = np.triu(np.asarray(self.upper.data, np.float64), 1) + np.diag(
            self.sign * np.exp(np.asarray(self.log_diag.data, np.float64)))
        z = scipy.linalg.solve_triangular(lower, z, lower=True, unit_diagonal=True)
        z = scipy.linalg.solve_triangular(upper, z, lower=False)
        return Tensor(z.reshape(c, n, h, w).transpose(1, 0, 2, 3), dtype=y.dtype)

    def _set_buffer(self, attr, value):
        super()._set_buffer(attr, value)
        self._masks(self.channels)


# ---------------------------------------------------------------------------
# additive coupling
# ---------------------------------------------------------------------------

class CouplingSubnet(Module):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> zero-initialized conv3x3."""

    def __init__(self, in_ch, out_ch, hidden, rng, init_std=0.05):
        self.w1 = nx.parameter(rng.normal(0, init_std, (hidden, in_ch, 3, 3)))
        self.b1 = nx.parameter(np.zeros(hidden))
        self.w2 = nx.parameter(rng.normal(0, init_std, (hidden, hidden, 3, 3)))
        self.b2 = nx.parameter(np.zeros(hidden))
        self.w_out = nx.parameter(np.zeros((out_ch, hidden, 3, 3)))
        self.b_out = nx.parameter(np.zeros(out_ch))

    def __call__(self, x):
        h = nx.relu(nx.conv2d(x, self.w1, self.b1, padding=1))
        h = nx.relu(nx.conv2d(h, self.w2, self.b2, padding=1))
        return nx.conv2d(h, self.w_out, self.b_out, padding=1)


class AdditiveCoupling(Module):
    """Channel-halves coupling. ``parity`` 0 updates the second half from the
    first; parity 1 updates the first half from the second."""

    def __init__(self, channels, hidden, rng, parity=0):
        if channels % 2:
            raise ShapeError(f"additive coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.parity = parity
        self.subnet = CouplingSubnet(channels // 2, channels // 2, hidden, rng)

    def _halves(self, x):
        half = self.channels // 2
        first, second = x[:, :half], x[:, half:]
        return (first, second) if self.parity == 0 else (second, first)

    def _join(self, cond, moved):
        parts = [cond, moved] if self.parity == 0 else [moved, cond]
        return nx.concat(parts, axis=1)

    def forward(self, x):
        x = _nchw(x)
        if x.shape[1] != self.channels:
            raise ShapeError(f"coupling built for {self.channels} channels, got {x.shape[1]}")
        cond, moved = self._halves(x)
        y = self._join(cond, moved + self.subnet(cond))
        return y, Tensor(np.zeros(x.shape[0]), dtype=x.dtype)

    def inverse(self, y):
        y = _nchw(y)
        if y.shape[1] != self.channels:
            raise ShapeError(f"coupling built for {self.channels} channels, got {y.shape[1]}")
        with nx.no_grad():
            cond, moved = self._halves(y)
            return self._join(cond, moved - self.subnet(cond))


class FlowStep(Module):
    """ActNorm -> invertible 1x1 conv -> additive coupling."""

    def __init__(self, channels, hidden, rng, parity=0, identity_conv=False):
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv1x1(channels, rng, identity=identity_conv)
        self.coupling = AdditiveCoupling(channels, hidden, rng, parity)

    def forward(self, x):
        x, ld1 = self.actnorm.forward(x)
        x, ld2 = self.invconv.forward(x)
        x, ld3 = self.coupling.forward(x)
        return x, ld1 + ld2 + ld3

    def inverse(self, y):
        x = self.coupling.inverse(y)
        x = self.invconv.inverse(x)
        return self.actnorm.inverse(x)
