"""Prototype latents, linear latent edits and the distillation target/loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError


class MissingPrototype(KeyError):
    pass


@dataclass
class PrototypeTable:
    """Mean packed latent per (age group, attribute value) cell."""

    n_groups: int
    n_attrs: int
    means: dict = field(default_factory=dict)   # (g, a) -> array
    counts: dict = field(default_factory=dict)  # (g, a) -> int

    @property
    def shape(self):
        return next(iter(self.means.values())).shape

    def empty_cells(self):
        return [(g, a) for g in range(self.n_groups) for a in range(self.n_attrs)
                if self.counts.get((g, a), 0) == 0]

    def cell(self, g, a):
        if self.counts.get((g, a), 0) == 0:
            raise MissingPrototype(f"no samples for prototype cell (group={g}, attr={a})")
        return self.means[g, a]

    def group(self, g):
        """Count-weighted mean over all attribute values of group ``g``."""
        cells = [(self.means[g, a], self.counts[g, a]) for a in range(self.n_attrs)
                 if self.counts.get((g, a), 0)]
        if not cells:
            raise MissingPrototype(f"no samples for age group {g}")
        total = sum(c for _, c in cells)
        return sum(m.astype(np.float64) * c for m, c in cells) / total

    def require(self, cells):
        missing = [c for c in cells if self.counts.get(c, 0) == 0]
        if missing:
            raise MissingPrototype(f"empty prototype cells: {missing}")

    # checkpoint naming: proto/<g>/<a>, proto_count/<g>/<a>
    def to_tensors(self):
        out = {}
        for (g, a), m in self.means.items():
            out[f"proto/{g}/{a}"] = np.asarray(m)
            out[f"proto_count/{g}/{a}"] = np.array([self.counts[g, a]], dtype=np.float64)
        return out

    @classmethod
    def from_tensors(cls, tensors, n_groups, n_attrs):
        table = cls(n_groups, n_attrs)
        for g in range(n_groups):
            for a in range(n_attrs):
                key = f"proto/{g}/{a}"
                if key in tensors:
                    table.means[g, a] = np.asarray(tensors[key])
                    table.counts[g, a] = int(np.asarray(tensors[f"proto_count/{g}/{a}"])[0])
        return table


def compute_prototypes(latents, age_labels, attr_labels, n_groups=4, n_attrs=2):
    """Arithmetic mean of packed latents per (group, attribute) cell.

    Accumulation is in float64 in sample order, so the result does not
    depend on how the input was batched.
    """
    latents = np.asarray(latents)
    age_labels = np.asarray(age_labels, dtype=np.int64)
    attr_labels = np.asarray(attr_labels, dtype=np.int64)
    if len(latents) != len(age_labels) or len(latents) != len(attr_labels):
        raise ShapeError("latents and labels differ in length")
    if age_labels.size and (age_labels.min() < 0 or age_labels.max() >= n_groups):
        raise ValueError("age label out of range")
    if attr_labels.size and (attr_labels.min() < 0 or attr_labels.max() >= n_attrs):
        raise ValueError("attribute label out of range")
    table = PrototypeTable(n_groups, n_attrs)
    for g in range(n_groups):
        for a in range(n_attrs):
            mask = (age_labels == g) & (attr_labels == a)
            count = int(mask.sum())
            table.counts[g, a] = count
            if count:
                table.means[g, a] = latents[mask].astype(np.float64).mean(axis=0).astype(latents.dtype)
            else:
                table.means[g, a] = np.zeros(latents.shape[1:], dtype=latents.dtype)
    return table


def manipulate(z_s, z_pos, z_neg, s):
    """Linear latent edit ``z_s + s * (z_pos - z_neg)``."""
    z_s, z_pos, z_neg = (np.asarray(v) for v in (z_s, z_pos, z_neg))
    if z_pos.shape != z_neg.shape or z_s.shape[-z_pos.ndim:] != z_pos.shape:
        raise ShapeError(f"shape mismatch: {z_s.shape}, {z_pos.shape}, {z_neg.shape}")
    return z_s + s * (z_pos - z_neg)


def akd_target(z_s, table: PrototypeTable, g_src, g_tgt, attr, s=1.0):
    """Distillation target: move ``z_s`` by the target-minus-source prototype
    difference taken at the sample's own attribute value.

    Arguments may be scalars or per-sample arrays (batched ``z_s``).
    """
    z_s = np.asarray(z_s)
    g_src, g_tgt, attr = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (g_src, g_tgt, attr))
    batched = z_s.ndim == len(table.shape) + 1
    if not batched:
        return manipulate(z_s, table.cell(int(g_tgt[0]), int(attr[0])),
                          table.cell(int(g_src[0]), int(attr[0])), s)
    tgt = np.stack([table.cell(int(t), int(a)) for t, a in zip(g_tgt, attr)])
    src = np.stack([table.cell(int(g), int(a)) for g, a in zip(g_src, attr)])
    return (z_s + s * (tgt - src)).astype(z_s.dtype)


def akd_loss(z_pred, target):
    """Mean absolute difference over all elements (a Tensor when ``z_pred`` is)."""
    target = np.asarray(target)
    if tuple(np.shape(getattr(z_pred, "data", z_pred))) != target.shape:
        raise ShapeError("prediction and target shapes differ")
    return nx.mean(nx.abs_(nx.sub(z_pred, target.astype(nx.as_tensor(z_pred).dtype))))
