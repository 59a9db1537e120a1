"""Image-to-image translation through the flow latent space, and the
oracle-based evaluation report."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .checkpoint import ModelCheckpoint
from .glow import postprocess, preprocess
from .ictm import ConditionGaussian
from .numerics import NumericsError
from .semantics import manipulate
from .toydata import N_ATTRS, N_GROUPS, SIZE, OracleError, oracle_age, oracle_attr, oracle_center
from .training import glow_from_checkpoint, prototypes_from_checkpoint, translator_from_checkpoint

MODES = ("ictm", "ictm-inverse", "glow-manip", "glow-attr-manip")
# displacement charged when an output has no foreground to locate
MISSING_CENTROID_PX = float(SIZE)


class Translator:
    """Frozen flow plus whatever latent editors the checkpoint provides."""

    def __init__(self, ckpt: ModelCheckpoint, s=None):
        self.glow = glow_from_checkpoint(ckpt)
        self.table = prototypes_from_checkpoint(ckpt) if ckpt.has("proto") else None
        self.ictm = self.prior = None
        if ckpt.has("ictm"):
            self.ictm, self.prior, _ = translator_from_checkpoint(ckpt)
        if s is None:
            s = ckpt.meta.get("train_ictm", ckpt.meta.get("train", {})).get("s", 1.0)
        self.s = float(s)

    # -- latent level --------------------------------------------------------
    def _need(self, mode):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
        if mode.startswith("ictm") and self.ictm is None:
            raise NumericsError(f"mode {mode} needs a trained translator in the checkpoint")
        if mode.startswith("glow") and self.table is None:
            raise NumericsError(f"mode {mode} needs prototypes in the checkpoint")

    def nearest_cell(self, z):
        """(group, attribute) of the closest prototype, per latent."""
        cells = [(g, a) for g in range(N_GROUPS) for a in range(N_ATTRS)]
        protos = np.stack([self.table.cell(g, a) for g, a in cells]).reshape(len(cells), -1)
        d = ((z.reshape(len(z), 1, -1) - protos[None]) ** 2).sum(-1)
        best = np.argmin(d, axis=1)
        return np.array([cells[b][0] for b in best]), np.array([cells[b][1] for b in best])

    def recovered_group(self, cond: ConditionGaussian):
        """Age group whose prior condition is nearest the recovered one."""
        with nx.no_grad():
            ref = self.prior.for_groups(np.arange(self.prior.n_groups)).vector()
        return np.argmin(((cond.vector()[:, None] - ref[None]) ** 2).sum(-1), axis=1)

    def translate_latent(self, z, target, mode, source=None, attr=None, cond=None):
        """Edit packed latents ``z`` towards ``target`` groups.

        Returns ``(z_out, recovered)`` where ``recovered`` is the recovered
        condition for the ICTM modes and the assumed source groups otherwise.
        ``cond`` overrides the prior-generated condition (ICTM modes).
        """
        self._need(mode)
        z = np.asarray(z)
        target = np.broadcast_to(np.asarray(target, dtype=np.int64), (len(z),))
        if mode.startswith("ictm"):
            with nx.no_grad():
                c = cond if cond is not None else self.prior.for_groups(target).detach()
                if mode == "ictm":
                    z_out, rec = self.ictm.forward(z, c)
                else:
                    z_out, rec = self.ictm.inverse(z, c)
            return np.asarray(z_out.data), rec.detach()
        guess_g, guess_a = self.nearest_cell(z)
        source = guess_g if source is None else np.broadcast_to(np.asarray(source, dtype=np.int64), (len(z),))
        if mode == "glow-manip":
            out = [manipulate(zi, self.table.group(t), self.table.group(g), self.s)
                   for zi, t, g in zip(z, target, source)]
        else:
            attr = guess_a if attr is None else np.broadcast_to(np.asarray(attr, dtype=np.int64), (len(z),))
            out = [manipulate(zi, self.table.cell(t, a), self.table.cell(g, a), self.s)
                   for zi, t, g, a in zip(z, target, source, attr)]
        return np.stack(out).astype(z.dtype), np.asarray(source)

    # -- pixel level -----------------------------------------------------------
    def encode(self, x):
        z, _ = self.glow.encode(x)
        return self.glow.pack(z)

    def decode(self, z):
        return self.glow.decode(self.glow.unpack(z))

    def translate_x(self, x, target, mode, **kw):
        """Continuous (dequantized) images in, continuous images out."""
        z_out, rec = self.translate_latent(self.encode(x), target, mode, **kw)
        return self.decode(z_out), rec

    def translate_image(self, image, target, mode, **kw):
        """uint8 images (N, C, H, W) in, re-quantized uint8 images out."""
        x, _ = preprocess(np.asarray(image), noise=0.5, n_bins=self.glow.config.n_bins)
        x_out, rec = self.translate_x(x, target, mode, **kw)
        return postprocess(x_out, self.glow.config.n_bins), rec


def translate_image(image, target_group, mode, checkpoint: ModelCheckpoint, s=None, **kw):
    """One-shot translation of a single uint8 image (C, H, W) or a batch."""
    image = np.asarray(image)
    single = image.ndim == 3
    out, rec = Translator(checkpoint, s=s).translate_image(image[None] if single else image, target_group, mode, **kw)
    return (out[0] if single else out), rec


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class PairStats:
    count: int = 0
    age_hits: int = 0
    attr_hits: int = 0
    displacement: float = 0.0
    cosine: float = 0.0

    def as_row(self):
        c = max(self.count, 1)
        return (100.0 * self.age_hits / c, 100.0 * self.attr_hits / c, self.displacement / c, self.cosine / c)


@dataclass
class EvalReport:
    mode: str
    n_groups: int = N_GROUPS
    pairs: dict = field(default_factory=dict)  # (g, g') -> PairStats

    def pair_keys(self):
        return [(g, t) for g in range(self.n_groups) for t in range(self.n_groups) if g != t]

    def _mean(self, col):
        rows = [self.pairs[k].as_row()[col] for k in self.pair_keys() if self.pairs[k].count]
        return float(np.mean(rows)) if rows else float("nan")

    @property
    def age_accuracy(self):
        return self._mean(0)

    @property
    def attr_preservation(self):
        return self._mean(1)

    @property
    def displacement(self):
        return self._mean(2)

    @property
    def cosine(self):
        return self._mean(3)

    def summary(self):
        return {"mode": self.mode, "age_accuracy": self.age_accuracy, "attr_preservation": self.attr_preservation,
                "displacement_px": self.displacement, "cosine": self.cosine}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "target", "count", "age_acc", "attr_pres", "displacement_px", "cosine"])
        for g, t in self.pair_keys():
            st = self.pairs[g, t]
            w.writerow([g, t, st.count, *(repr(v) for v in st.as_row())])
        w.writerow(["mean", "mean", sum(self.pairs[k].count for k in self.pair_keys()),
                    *(repr(v) for v in (self.age_accuracy, self.attr_preservation, self.displacement, self.cosine))])
        return buf.getvalue()

    def to_table(self):
        """Age accuracy (%) with source groups as rows and targets as columns,
        then the per-mode means."""
        head = "src\\tgt" + "".join(f"{t:>9d}" for t in range(self.n_groups))
        lines = [f"mode: {self.mode}", "age accuracy (%)", head]
        for g in range(self.n_groups):
            cells = "".join(f"{'-':>9}" if g == t else f"{self.pairs[g, t].as_row()[0]:9.1f}"
                            for t in range(self.n_groups))
            lines.append(f"{g:>7d}" + cells)
        lines += [f"{'age accuracy':<22}{self.age_accuracy:8.2f} %",
                  f"{'attribute preservation':<22}{self.attr_preservation:8.2f} %",
                  f"{'centroid shift':<22}{self.displacement:8.3f} px",
                  f"{'pixel cosine':<22}{self.cosine:8.4f}"]
        return "\n".join(lines)


def _cosine(a, b):
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den else 0.0


def score_translation(src_img, out_img, target):
    """Oracle readings of one translated image: (age hit, attr kept, px shift, cosine)."""
    cos = _cosine(src_img, out_img)
    try:
        age_hit = oracle_age(out_img) == target
        attr_hit = oracle_attr(out_img) == oracle_attr(src_img)
        (x0, y0), (x1, y1) = oracle_center(src_img), oracle_center(out_img)
        shift = float(np.hypot(x1 - x0, y1 - y0))
    except OracleError:
        return False, False, MISSING_CENTROID_PX, cos
    return bool(age_hit), bool(attr_hit), shift, cos


def evaluate_fn(translate, images, groups, mode, n_groups=N_GROUPS):
    """Evaluate a batch translator ``translate(images, targets, sources) -> images``
    on every (sample, target != source) pair."""
    images = np.asarray(images)
    groups = np.asarray(groups, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("evaluation split is empty")
    report = EvalReport(mode, n_groups, {k: PairStats() for k in
                                         [(g, t) for g in range(n_groups) for t in range(n_groups) if g != t]})
    for shift in range(1, n_groups):
        targets = (groups + shift) % n_groups
        outs = translate(images, targets, groups)
        for img, out, g, t in zip(images, outs, groups, targets):
            age_hit, attr_hit, px, cos = score_translation(img, out, t)
            st = report.pairs[int(g), int(t)]
            st.count += 1
            st.age_hits += age_hit
            st.attr_hits += attr_hit
            st.displacement += px
            st.cosine += cos
    return report


def evaluate(ckpt: ModelCheckpoint, dataset, mode, batch=64, s=None):
    """Translate every test sample to every other group and score with the oracles."""
    tr = Translator(ckpt, s=s)
    tr._need(mode)
    if len(dataset) == 0:
        raise ValueError("evaluation split is empty")
    x, _ = preprocess(dataset.images, noise=0.5, n_bins=tr.glow.config.n_bins)
    z = np.concatenate([tr.encode(x[i:i + batch]) for i in range(0, len(x), batch)])

    def translate(images, targets, sources):
        out = []
        for i in range(0, len(images), batch):
            sl = slice(i, i + batch)
            # edits start from the labelled source group (and attribute)
            kw = {"source": sources[sl]} if mode.startswith("glow") else {}
            if mode == "glow-attr-manip":
                kw["attr"] = dataset.a[sl]
            z_out, _ = tr.translate_latent(z[sl], targets[sl], mode, **kw)
            out.append(postprocess(tr.decode(z_out), tr.glow.config.n_bins))
        return np.concatenate(out)

    return evaluate_fn(translate, dataset.images, dataset.g, mode)
