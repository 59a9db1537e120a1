"""Latent-space discriminator with an age-classification head, and the
least-squares adversarial, classification and combined objectives."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .module import Module


@dataclass
class LossWeights:
    akd: float = 1.0
    al: float = 1.0
    acl: float = 1.0
    cl: float = 0.01
    acl_d: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    def to_dict(self):
        return asdict(self)


def _l2n(v, eps=1e-12):
    return v / max(float(np.linalg.norm(v)), eps)


def spectral_normalize(w, u, iters=1):
    """Power-iteration estimate of the top singular value of ``w`` (out, in).

    Returns ``(w / sigma, u_new, sigma)``; ``u`` lives in the output space.
    """
    w = np.asarray(w, dtype=np.float64)
    u = _l2n(np.asarray(u, dtype=np.float64))
    v = None
    for _ in range(max(int(iters), 1)):
        v = _l2n(w.T @ u)
        u = _l2n(w @ v)
    sigma = float(u @ w @ v)
    return w / sigma, u, sigma


class SNDense(Module):
    """Dense layer whose weight is divided by its power-iteration spectral norm."""

    _buffers = ("u",)

    def __init__(self, in_dim, out_dim, rng):
        self.weight = nx.parameter(rng.normal(0, 1 / np.sqrt(in_dim), (out_dim, in_dim)))
        self.bias = nx.parameter(np.zeros(out_dim))
        self.u = _l2n(rng.standard_normal(out_dim))

    def power_iteration(self, iters=1):
        """Advance the persisted ``u`` vector; call once per training step."""
        _, self.u, _ = spectral_normalize(self.weight.data, self.u, iters)

    def normalized_weight(self):
        # sigma = u^T W v with u, v held constant (standard spectral-norm gradient)
        w = np.asarray(self.weight.data, dtype=np.float64)
        v = _l2n(w.T @ self.u)
        outer = np.outer(self.u, v).astype(self.weight.dtype)
        sigma = nx.sum_(self.weight * outer)
        return self.weight / sigma

    def __call__(self, x):
        return nx.dense(x, self.normalized_weight(), self.bias)


class Dense(Module):
    def __init__(self, in_dim, out_dim, rng):
        self.weight = nx.parameter(rng.normal(0, 1 / np.sqrt(in_dim), (out_dim, in_dim)))
        self.bias = nx.parameter(np.zeros(out_dim))

    def __call__(self, x):
        return nx.dense(x, self.weight, self.bias)


class Discriminator(Module):
    """Two spectrally normalized 512-unit layers (leaky ReLU 0.2), then a
    1-unit adversarial head and an n-unit age head."""

    def __init__(self, in_dim=1024, hidden=512, n_groups=4, rng=None, slope=0.2):
        rng = rng if rng is not None else nx.make_rng(0)
        self.in_dim = in_dim
        self.slope = slope
        self.dense1 = SNDense(in_dim, hidden, rng)
        self.dense2 = SNDense(hidden, hidden, rng)
        self.head_gan = Dense(hidden, 1, rng)
        self.head_age = Dense(hidden, n_groups, rng)

    def power_iteration(self, iters=1):
        self.dense1.power_iteration(iters)
        self.dense2.power_iteration(iters)

    def __call__(self, z):
        """``z`` of shape (N, ...) -> (scores (N,), age logits (N, n))."""
        z = nx.as_tensor(z)
        x = nx.reshape(z, (z.shape[0], -1))
        if x.shape[1] != self.in_dim:
            raise nx.ShapeError(f"discriminator expects {self.in_dim} inputs, got {x.shape[1]}")
        h = nx.leaky_relu(self.dense1(x), self.slope)
        h = nx.leaky_relu(self.dense2(h), self.slope)
        score = nx.reshape(self.head_gan(h), (x.shape[0],))
        return score, self.head_age(h)


def generator_adv_loss(scores_fake):
    """Least-squares generator objective ``0.5 * mean((D(z') - 1)^2)``."""
    return nx.mean(nx.square(nx.as_tensor(scores_fake) - 1.0)) * 0.5


def age_cls_loss(logits, targets):
    """Softmax cross-entropy (natural log), averaged over the batch."""
    logits = nx.as_tensor(logits)
    if logits.ndim == 1:
        logits = nx.reshape(logits, (1, -1))
    return nx.cross_entropy(logits, np.atleast_1d(targets))


def total_generator_loss(parts, weights: LossWeights):
    """Weighted sum of the distillation, adversarial, classification and
    consistency terms; ``parts`` maps ``akd/al/acl/cl`` to scalars or tensors."""
    total = 0.0
    for key in ("akd", "al", "acl", "cl"):
        w = getattr(weights, key)
        if key in parts and w:
            total = total + parts[key] * w
    return total


def discriminator_loss(scores_real, scores_fake, real_age_logits, real_targets, weights: LossWeights):
    real = nx.mean(nx.square(nx.as_tensor(scores_real) - 1.0)) * 0.5
    fake = nx.mean(nx.square(nx.as_tensor(scores_fake))) * 0.5
    return real + fake + age_cls_loss(real_age_logits, real_targets) * weights.acl_d
