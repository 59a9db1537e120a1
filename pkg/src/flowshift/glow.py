"""Multi-scale flow encoder/decoder with exact likelihood.

Layout per scale: squeeze, ``steps`` flow steps, then (except at the last
scale) half of the channels are factored out as a latent split. All latent
parts share a standard Gaussian prior.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .flow_layers import FlowStep, squeeze, unsqueeze
from .module import Module
from .numerics import NumericsError, ShapeError, Tensor

LOG_2PI = math.log(2 * math.pi)


@dataclass
class GlowConfig:
    levels: int = 3
    steps: int = 8
    in_shape: tuple = (1, 32, 32)
    hidden: int = 64
    n_bins: int = 256

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)
        c, h, w = self.in_shape
        if self.levels < 1 or self.steps < 1:
            raise ValueError("levels and steps must be positive")
        if h % (2 ** self.levels) or w % (2 ** self.levels):
            raise ValueError(f"spatial dims {h}x{w} not divisible by 2^{self.levels}")

    @property
    def dim(self):
        return int(np.prod(self.in_shape))

    def to_dict(self):
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d


@dataclass
class LatentState:
    """Factored-out splits (one per scale but the last) plus the deepest tensor."""

    splits: list = field(default_factory=list)
    final: object = None

    def parts(self):
        return [*self.splits, self.final]

    def numel(self):
        return int(sum(np.asarray(_data(p)).size for p in self.parts()))

    def arrays(self):
        return LatentState([np.asarray(_data(s)) for s in self.splits], np.asarray(_data(self.final)))

    def batch(self):
        return _data(self.final).shape[0]


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# dequantization
# ---------------------------------------------------------------------------

def preprocess(image, rng=None, noise=None, n_bins=256):
    """Uniform dequantization: ``x = (image + u)/n_bins - 0.5``.

    ``noise`` overrides the uniform draw (use 0.5 for a deterministic
    bin-centre encoding). Returns ``(x, logdet_pre)`` with one log-determinant
    entry per sample.
    """
    img = np.asarray(image)
    if img.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) images, got {img.shape}")
    if img.size and (img.min() < 0 or img.max() > n_bins - 1):
        raise ValueError(f"pixel values must lie in [0, {n_bins - 1}]")
    if noise is None:
        if rng is None:
            raise ValueError("preprocess needs an rng or explicit noise")
        noise = rng.random(img.shape)
    x = (img.astype(np.float64) + noise) / n_bins - 0.5
    d = int(np.prod(img.shape[1:]))
    logdet = np.full(img.shape[0], -d * math.log(n_bins))
    return x.astype(nx.default_dtype()), logdet


def postprocess(x, n_bins=256):
    """Inverse of :func:`preprocess` up to the dequantization noise; clamps to 8 bits."""
    x = np.asarray(_data(x), dtype=np.float64)
    return np.clip(np.floor((x + 0.5) * n_bins), 0, n_bins - 1).astype(np.uint8)


def log_standard_normal(z):
    """Per-sample log N(z; 0, I) for a (N, ...) tensor."""
    z = nx.as_tensor(z)
    n = z.shape[0]
    d = int(np.prod(z.shape[1:]))
    sq = nx.sum_(nx.reshape(nx.square(z), (n, d)), axis=1)
    return sq * -0.5 - 0.5 * d * LOG_2PI


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Glow(Module):
    def __init__(self, config: GlowConfig | None = None, rng=None, identity_conv=False):
        self.config = config or GlowConfig()
        rng = rng if rng is not None else nx.make_rng(0)
        c = self.config.in_shape[0]
        self.scales = []
        for level in range(self.config.levels):
            c *= 4
            steps = [FlowStep(c, self.config.hidden, rng, parity=j % 2, identity_conv=identity_conv)
                     for j in range(self.config.steps)]
            self.scales.append(_Scale(steps))
            if level < self.config.levels - 1:
                c //= 2

    # -- shapes ------------------------------------------------------------
    def latent_shapes(self):
        """Per-sample shapes of every split and of the final tensor."""
        c, h, w = self.config.in_shape
        shapes = []
        for level in range(self.config.levels):
            c, h, w = c * 4, h // 2, w // 2
            if level < self.config.levels - 1:
                c //= 2
                shapes.append((c, h, w))
        shapes.append((c, h, w))
        return shapes

    def packed_shape(self):
        *splits, final = self.latent_shapes()
        fc, fh, fw = final
        channels = fc + sum(c * (h // fh) * (w // fw) for c, h, w in splits)
        return (channels, fh, fw)

    @property
    def initialized(self):
        return all(step.actnorm.is_initialized for sc in self.scales for step in sc.steps)

    # -- flows -------------------------------------------------------------
    def forward(self, x, init=False):
        """Encode with gradients recorded; returns ``(LatentState, logdet)``.

        With ``init=True`` every uninitialized ActNorm is data-initialized on
        the activations it sees.
        """
        x = nx.as_tensor(x)
        if x.shape[1:] != self.config.in_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != configured {self.config.in_shape}")
        n = x.shape[0]
        logdet = Tensor(np.zeros(n), dtype=x.dtype)
        splits = []
        h = x
        idx = 0
        for level, scale in enumerate(self.scales):
            h = squeeze(h)
            for step in scale.steps:
                if init and not step.actnorm.is_initialized:
                    step.actnorm.initialize(h)
                h, ld = step.forward(h)
                if not np.all(np.isfinite(h.data)):
                    raise NumericsError(f"non-finite activations after flow step {idx} (scale {level})")
                logdet = logdet + ld
                idx += 1
            if level < len(self.scales) - 1:
                half = h.shape[1] // 2
                splits.append(h[:, half:])
                h = h[:, :half]
        return LatentState(splits, h), logdet

    def encode(self, x):
        """Gradient-free encode; returns ``(LatentState of arrays, logdet array)``."""
        with nx.no_grad():
            z, logdet = self.forward(x)
        return z.arrays(), np.asarray(logdet.data)

    def decode(self, z: LatentState):
        with nx.no_grad():
            if len(z.splits) != len(self.scales) - 1:
                raise ShapeError("latent split count does not match the model")
            h = nx.as_tensor(z.final)
            for level in reversed(range(len(self.scales))):
                if level < len(self.scales) - 1:
                    h = nx.concat([h, nx.as_tensor(z.splits[level])], axis=1)
                for step in reversed(self.scales[level].steps):
                    h = step.inverse(h)
                h = unsqueeze(h)
            return np.asarray(h.data)

    def log_prior(self, z: LatentState):
        total = None
        for part in z.parts():
            lp = log_standard_normal(part)
            total = lp if total is None else total + lp
        return total

    def nll(self, x, logdet_pre=None):
        """Per-sample negative log-likelihood in nats (Tensor of shape (N,))."""
        z, logdet = self.forward(x)
        out = -(self.log_prior(z) + logdet)
        if logdet_pre is not None:
            out = out - np.asarray(logdet_pre, dtype=out.dtype)
        return out

    def bits_per_dim(self, nll):
        return np.asarray(_data(nll)) / (self.config.dim * math.log(2))

    def sample(self, rng, n=1, temperature=0.7):
        """Draw ``n`` images (uint8, N x C x H x W) from the tempered prior."""
        shapes = self.latent_shapes()
        parts = [temperature * rng.standard_normal((n, *s)) for s in shapes]
        parts = [p.astype(nx.default_dtype()) for p in parts]
        z = LatentState(parts[:-1], parts[-1])
        return postprocess(self.decode(z), self.config.n_bins), z

    # -- latent packing ------------------------------------------------------
    def pack(self, z: LatentState):
        return pack_latent(z)

    def unpack(self, packed):
        return unpack_latent(packed, self.latent_shapes())


class _Scale(Module):
    def __init__(self, steps):
        self.steps = steps


def pack_latent(z: LatentState):
    """Squeeze every split down to the final resolution and stack on channels.

    Works on arrays or tensors (gradients flow through for tensors).
    """
    final = z.final
    fh = _data(final).shape[2]
    parts = []
    for s in z.splits:
        while _data(s).shape[2] > fh:
            s = squeeze(s)
        parts.append(nx.as_tensor(s))
    packed = nx.concat([*parts, nx.as_tensor(final)], axis=1)
    if isinstance(final, Tensor) or any(isinstance(s, Tensor) for s in z.splits):
        return packed
    return np.asarray(packed.data)


def unpack_latent(packed, shapes):
    """Exact inverse of :func:`pack_latent` given per-sample latent shapes."""
    as_tensor = isinstance(packed, Tensor)
    packed = nx.as_tensor(packed) if as_tensor else Tensor(packed, dtype=np.asarray(packed).dtype)
    *split_shapes, final_shape = shapes
    fh = final_shape[1]
    parts = []
    offset = 0
    for c, h, w in split_shapes:
        times = int(round(math.log2(h // fh)))
        width = c * 4 ** times
        s = packed[:, offset:offset + width]
        for _ in range(times):
            s = unsqueeze(s)
        parts.append(s)
        offset += width
    final = packed[:, offset:offset + final_shape[0]]
    if offset + final_shape[0] != packed.shape[1]:
        raise ShapeError(f"packed tensor has {packed.shape[1]} channels, expected {offset + final_shape[0]}")
    if as_tensor:
        return LatentState(parts, final)
    return LatentState([np.asarray(p.data) for p in parts], np.asarray(final.data))
