"""Invertible conditional translation in the packed latent space.

The packed latent ``z`` (C_z channels) is concatenated with the condition
parameters ``(mu, log_sigma)`` broadcast over space, and the combined tensor
passes through ``m`` additive couplings. Couplings partition channels by
index parity, so latent and condition channels sit on both sides. Updates to
condition channels are spatially averaged before they are added; condition
channels therefore stay spatially constant and the recovered condition is
read back exactly as a vector.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .module import Module
from .numerics import NumericsError, ShapeError, Tensor

LOG_2PI = math.log(2 * math.pi)


@dataclass
class ICTMConfig:
    flows: int = 32
    latent_channels: int = 64
    cond_channels: int = 8
    hidden: int = 64
    n_groups: int = 4
    prior_hidden: int = 32

    def __post_init__(self):
        if self.flows < 1:
            raise ValueError("ICTM needs at least one flow")
        if (self.latent_channels + 2 * self.cond_channels) % 2:
            raise ValueError("combined latent + condition channels must be even")

    @property
    def combined_channels(self):
        return self.latent_channels + 2 * self.cond_channels

    def to_dict(self):
        return asdict(self)


@dataclass
class ConditionGaussian:
    """Per-channel Gaussian parameters; arrays or tensors of shape (N, C) or (C,)."""

    mu: object
    log_sigma: object

    def vector(self):
        """Concatenated ``(mu, log_sigma)`` as an array."""
        mu, ls = (np.asarray(getattr(v, "data", v)) for v in (self.mu, self.log_sigma))
        return np.concatenate([mu, ls], axis=-1)

    @property
    def sigma(self):
        return np.exp(np.asarray(getattr(self.log_sigma, "data", self.log_sigma)))

    def detach(self):
        return ConditionGaussian(*(np.array(getattr(v, "data", v)) for v in (self.mu, self.log_sigma)))


def one_hot(labels, n):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"group label out of range [0, {n})")
    out = np.zeros((len(labels), n), dtype=nx.default_dtype())
    out[np.arange(len(labels)), labels] = 1
    return out


class PriorGenerator(Module):
    """one-hot (n) -> dense(32) -> ReLU -> dense(2 * C_cond) -> (mu, log_sigma)."""

    def __init__(self, n_groups, cond_channels, hidden=32, rng=None, zero_init=False):
        rng = rng if rng is not None else nx.make_rng(0)
        self.n_groups = n_groups
        self.cond_channels = cond_channels
        self.w1 = nx.parameter(rng.normal(0, 1.0, (hidden, n_groups)))
        self.b1 = nx.parameter(np.zeros(hidden))
        if zero_init:
            self.w2 = nx.parameter(np.zeros((2 * cond_channels, hidden)))
        else:
            self.w2 = nx.parameter(rng.normal(0, 0.5 / math.sqrt(hidden), (2 * cond_channels, hidden)))
        self.b2 = nx.parameter(np.zeros(2 * cond_channels))

    def __call__(self, onehot) -> ConditionGaussian:
        oh = np.asarray(getattr(onehot, "data", onehot))
        if oh.ndim == 1:
            oh = oh[None]
        if oh.shape[-1] != self.n_groups or not (
                np.all((oh == 0) | (oh == 1)) and np.all(oh.sum(axis=-1) == 1)):
            raise ValueError("condition must be a one-hot vector over the age groups")
        h = nx.relu(nx.dense(oh.astype(self.w1.dtype), self.w1, self.b1))
        out = nx.dense(h, self.w2, self.b2)
        c = self.cond_channels
        return ConditionGaussian(out[:, :c], out[:, c:])

    def for_groups(self, groups) -> ConditionGaussian:
        return self(one_hot(groups, self.n_groups))


class ChannelAttention(Module):
    """Squeeze-and-excitation gate: pool -> dense(C/4) -> ReLU -> dense(C) -> sigmoid."""

    def __init__(self, channels, rng, reduction=4):
        mid = max(channels // reduction, 1)
        self.w_sq = nx.parameter(rng.normal(0, 1 / math.sqrt(channels), (mid, channels)))
        self.b_sq = nx.parameter(np.zeros(mid))
        self.w_ex = nx.parameter(rng.normal(0, 1 / math.sqrt(mid), (channels, mid)))
        self.b_ex = nx.parameter(np.zeros(channels))

    def gate(self, x):
        pooled = nx.global_avg_pool(x)
        return nx.sigmoid(nx.dense(nx.relu(nx.dense(pooled, self.w_sq, self.b_sq)), self.w_ex, self.b_ex))

    def __call__(self, x):
        n, c = x.shape[:2]
        return x * nx.reshape(self.gate(x), (n, c, 1, 1))


class ICTMSubnet(Module):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> channel attention -> zero-init conv3x3."""

    def __init__(self, in_ch, out_ch, hidden, rng, init_std=0.05):
        self.w1 = nx.parameter(rng.normal(0, init_std, (hidden, in_ch, 3, 3)))
        self.b1 = nx.parameter(np.zeros(hidden))
        self.w2 = nx.parameter(rng.normal(0, init_std, (hidden, hidden, 3, 3)))
        self.b2 = nx.parameter(np.zeros(hidden))
        self.attention = ChannelAttention(hidden, rng)
        self.w_out = nx.parameter(np.zeros((out_ch, hidden, 3, 3)))
        self.b_out = nx.parameter(np.zeros(out_ch))

    def __call__(self, x):
        h = nx.relu(nx.conv2d(x, self.w1, self.b1, padding=1))
        h = nx.relu(nx.conv2d(h, self.w2, self.b2, padding=1))
        h = self.attention(h)
        return nx.conv2d(h, self.w_out, self.b_out, padding=1)


class ICTMFlow(Module):
    """Additive coupling over a parity partition of the combined channels."""

    def __init__(self, channels, latent_channels, hidden, rng, parity):
        self.parity = parity
        idx = np.arange(channels)
        self.cond_idx = idx[idx % 2 == parity]
        self.moved_idx = idx[idx % 2 != parity]
        self.inv_order = np.argsort(np.concatenate([self.cond_idx, self.moved_idx]))
        moved_is_cond = self.moved_idx >= latent_channels
        self._spatial_mask = (~moved_is_cond).astype(np.float64).reshape(1, -1, 1, 1)
        self._pooled_mask = moved_is_cond.astype(np.float64).reshape(1, -1, 1, 1)
        self.subnet = ICTMSubnet(len(self.cond_idx), len(self.moved_idx), hidden, rng)

    def _update(self, cond):
        upd = self.subnet(cond)
        dtype = upd.dtype
        pooled = nx.mean(upd, axis=(2, 3), keepdims=True)
        return upd * self._spatial_mask.astype(dtype) + pooled * self._pooled_mask.astype(dtype)

    def forward(self, u):
        cond = nx.take(u, self.cond_idx, axis=1)
        moved = nx.take(u, self.moved_idx, axis=1)
        out = nx.concat([cond, moved + self._update(cond)], axis=1)
        return nx.take(out, self.inv_order, axis=1)

    def inverse(self, u):
        with nx.no_grad():
            cond = nx.take(u, self.cond_idx, axis=1)
            moved = nx.take(u, self.moved_idx, axis=1)
            out = nx.concat([cond, moved - self._update(cond)], axis=1)
            return nx.take(out, self.inv_order, axis=1)


class ICTM(Module):
    def __init__(self, config: ICTMConfig | None = None, rng=None):
        self.config = config or ICTMConfig()
        rng = rng if rng is not None else nx.make_rng(0)
        c = self.config.combined_channels
        self.flows = [ICTMFlow(c, self.config.latent_channels, self.config.hidden, rng, parity=j % 2)
                      for j in range(self.config.flows)]

    def _combine(self, z, cond: ConditionGaussian):
        z = nx.as_tensor(z)
        if z.ndim != 4 or z.shape[1] != self.config.latent_channels:
            raise ShapeError(f"expected (N, {self.config.latent_channels}, H, W) latent, got {z.shape}")
        n, _, h, w = z.shape
        parts = []
        for v in (cond.mu, cond.log_sigma):
            v = nx.as_tensor(v)
            if v.ndim == 1:
                v = nx.broadcast_to(nx.reshape(v, (1, -1)), (n, v.shape[0]))
            if v.shape != (n, self.config.cond_channels):
                raise ShapeError(f"condition shape {v.shape} != ({n}, {self.config.cond_channels})")
            parts.append(nx.broadcast_to(nx.reshape(v, (n, self.config.cond_channels, 1, 1)),
                                         (n, self.config.cond_channels, h, w)))
        return nx.concat([z, *parts], axis=1)

    def _separate(self, u):
        cz, cc = self.config.latent_channels, self.config.cond_channels
        z = u[:, :cz]
        # condition channels are spatially constant, so any cell equals the
        # spatial mean; reading one cell keeps the identity case bit-exact
        mu = u[:, cz:cz + cc, 0, 0]
        ls = u[:, cz + cc:, 0, 0]
        return z, ConditionGaussian(mu, ls)

    def forward_combined(self, u):
        for flow in self.flows:
            u = flow.forward(u)
        return u

    def inverse_combined(self, u):
        u = nx.as_tensor(u)
        for flow in reversed(self.flows):
            u = flow.inverse(u)
        return u

    def forward(self, z_s, cond_t: ConditionGaussian):
        """``(z_s, target condition) -> (z_t, recovered source condition)``."""
        u = self.forward_combined(self._combine(z_s, cond_t))
        if not np.all(np.isfinite(u.data)):
            raise NumericsError("non-finite ICTM output")
        return self._separate(u)

    def inverse(self, z_t, cond_s: ConditionGaussian):
        """``(z_t, source condition) -> (z_s, recovered target condition)``."""
        with nx.no_grad():
            return self._separate(self.inverse_combined(self._combine(z_t, cond_s)))


def consistency_loss(rec: ConditionGaussian, true: ConditionGaussian):
    """Unit-variance Gaussian NLL of the recovered condition around the true
    one, summed over condition dims and averaged over the batch."""
    def vec(c):
        mu, ls = nx.as_tensor(c.mu), nx.as_tensor(c.log_sigma)
        if mu.ndim == 1:
            mu, ls = nx.reshape(mu, (1, -1)), nx.reshape(ls, (1, -1))
        return nx.concat([mu, ls], axis=1)

    diff = vec(rec) - vec(true)
    d = diff.shape[1]
    per_sample = nx.sum_(nx.square(diff), axis=1) * 0.5 + 0.5 * d * LOG_2PI
    return nx.mean(per_sample)
