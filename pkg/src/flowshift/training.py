"""Two-stage optimization: maximum-likelihood flow training, prototype
extraction, then alternating translator / discriminator updates on the
frozen flow's latents."""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .adversary import (Discriminator, LossWeights, age_cls_loss, discriminator_loss,
                        generator_adv_loss, total_generator_loss)
from .checkpoint import ModelCheckpoint
from .glow import Glow, GlowConfig, preprocess
from .ictm import ICTM, ICTMConfig, PriorGenerator, consistency_loss
from .numerics import NumericsError
from .semantics import PrototypeTable, akd_loss, akd_target, compute_prototypes
from .toydata import N_ATTRS, N_GROUPS

# sub-streams of the run seed, one per consumer
_STREAM_GLOW_INIT, _STREAM_GLOW_DATA, _STREAM_ICTM_INIT, _STREAM_ICTM_DATA = range(4)


class ConfigError(ValueError):
    pass


class TrainingDiverged(NumericsError):
    """Carries the last checkpoint whose loss was finite."""

    def __init__(self, message, checkpoint, iteration):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration


@dataclass
class TrainConfig:
    seed: int = 0
    lr_glow: float = 1e-5
    lr_ictm: float = 1e-5
    lr_disc: float = 1e-4
    micro_batch: int = 16
    accumulation: int = 4
    glow_iters: int = 200
    ictm_iters: int = 2000
    s: float = 1.0
    disc_hidden: int = 512
    data: str | None = None
    checkpoint: str | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    glow: GlowConfig = field(default_factory=GlowConfig)
    ictm: ICTMConfig = field(default_factory=ICTMConfig)

    def __post_init__(self):
        for name in ("lr_glow", "lr_ictm", "lr_disc"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.micro_batch < 1 or self.accumulation < 1:
            raise ConfigError("micro_batch and accumulation must be >= 1")
        if self.glow_iters < 0 or self.ictm_iters < 0:
            raise ConfigError("iteration counts must be non-negative")

    @property
    def effective_batch(self):
        return self.micro_batch * self.accumulation

    def to_dict(self):
        d = asdict(self)
        d["glow"] = self.glow.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"weights": LossWeights, "glow": GlowConfig, "ictm": ICTMConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key, typ in nested.items():
                if key in d:
                    sub = d[key]
                    fields = {f.name for f in dataclasses.fields(typ)}
                    bad = set(sub) - fields
                    if bad:
                        raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                    d[key] = typ(**sub)
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# checkpoint <-> modules
# ---------------------------------------------------------------------------

def glow_from_checkpoint(ckpt: ModelCheckpoint) -> Glow:
    if not ckpt.has("glow"):
        raise NumericsError("checkpoint holds no flow parameters")
    glow = Glow(GlowConfig(**ckpt.meta["glow"]))
    glow.load_state_dict(ckpt.group("glow"))
    return glow


def prototypes_from_checkpoint(ckpt: ModelCheckpoint) -> PrototypeTable:
    if not ckpt.has("proto"):
        raise NumericsError("checkpoint holds no prototype table")
    tensors = {k: v for k, v in ckpt.tensors.items() if k.startswith("proto")}
    return PrototypeTable.from_tensors(tensors, N_GROUPS, N_ATTRS)


def translator_from_checkpoint(ckpt: ModelCheckpoint):
    """``(ICTM, PriorGenerator, Discriminator)`` restored from a trained checkpoint."""
    if not ckpt.has("ictm"):
        raise NumericsError("checkpoint holds no trained translator")
    cfg = ICTMConfig(**ckpt.meta["ictm"])
    ictm = ICTM(cfg)
    ictm.load_state_dict(ckpt.group("ictm"))
    prior = PriorGenerator(cfg.n_groups, cfg.cond_channels, cfg.prior_hidden)
    prior.load_state_dict(ckpt.group("prior"))
    disc = None
    if ckpt.has("disc"):
        d = ckpt.meta["disc"]
        disc = Discriminator(d["in_dim"], d["hidden"], cfg.n_groups)
        disc.load_state_dict(ckpt.group("disc"))
    return ictm, prior, disc


def _fmt(v):
    return repr(float(v))


class _CsvLog:
    def __init__(self, columns, path=None):
        self.columns = columns
        self.buffer = io.StringIO()
        self.writer = csv.writer(self.buffer, lineterminator="\n")
        self.writer.writerow(columns)
        self.path = path
        self.rows = []

    def add(self, row):
        self.rows.append(row)
        self.writer.writerow([row[0], *(_fmt(v) for v in row[1:])])

    def text(self):
        return self.buffer.getvalue()

    def flush(self):
        if self.path:
            with open(self.path, "w", newline="") as fh:
                fh.write(self.text())


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def _glow_checkpoint(glow, config, iteration):
    ckpt = ModelCheckpoint(meta={"glow": config.glow.to_dict(), "train": config.to_dict(),
                                 "glow_iter": iteration})
    ckpt.put("glow", glow.state_dict())
    return ckpt


def train_glow(config: TrainConfig, images, log_path=None, progress=None):
    """Maximum-likelihood training of a fresh flow on uint8 ``images``.

    ActNorm layers are data-initialized on the first effective batch; each
    iteration averages ``accumulation`` micro-batch gradients into one Adam
    step. Returns ``(checkpoint, log_rows)``.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty training set")
    if images.shape[1:] != config.glow.in_shape:
        raise nx.ShapeError(f"images {images.shape[1:]} do not match flow input {config.glow.in_shape}")
    glow = Glow(config.glow, nx.make_rng(config.seed, _STREAM_GLOW_INIT))
    rng = nx.make_rng(config.seed, _STREAM_GLOW_DATA)
    mb, acc = config.micro_batch, config.accumulation

    init_idx = rng.integers(0, len(images), size=min(len(images), config.effective_batch))
    x0, _ = preprocess(images[init_idx], rng)
    with nx.no_grad():
        glow.forward(x0, init=True)

    opt = nx.Adam(glow.parameters(), config.lr_glow)
    log = _CsvLog(["iter", "loss", "nll", "bpd"], log_path)
    denom = config.glow.dim * math.log(2)
    for it in range(1, config.glow_iters + 1):
        opt.zero_grad()
        total = 0.0
        try:
            for _ in range(acc):
                idx = rng.integers(0, len(images), size=mb)
                x, ld_pre = preprocess(images[idx], rng)
                loss = nx.mean(glow.nll(x, ld_pre))
                if not np.isfinite(loss.item()):
                    raise NumericsError(f"non-finite flow loss at iteration {it}")
                loss.backward()
                total += loss.item() / acc
            opt.step(scale=1.0 / acc)
        except NumericsError as exc:
            log.flush()
            # the optimizer step is atomic, so the modules still hold the last good state
            raise TrainingDiverged(str(exc), _glow_checkpoint(glow, config, it - 1), it - 1) from exc
        log.add((it, total, total, total / denom))
        if progress:
            progress(it, total / denom)
    log.flush()
    return _glow_checkpoint(glow, config, config.glow_iters), log.rows


def encode_images(glow: Glow, images, batch=64):
    """Packed latents of uint8 images, encoded at bin centres (no noise)."""
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), batch):
        x, _ = preprocess(images[i:i + batch], noise=0.5, n_bins=glow.config.n_bins)
        z, _ = glow.encode(x)
        out.append(glow.pack(z))
    return np.concatenate(out) if out else np.zeros((0, *glow.packed_shape()), nx.default_dtype())


def compute_prototype_stage(ckpt: ModelCheckpoint, images, groups, attrs):
    """Encode every image with the stored flow and tabulate prototypes.

    Returns a new checkpoint that additionally holds the table.
    """
    glow = glow_from_checkpoint(ckpt)
    table = compute_prototypes(encode_images(glow, images), groups, attrs, N_GROUPS, N_ATTRS)
    table.require([(g, a) for g in range(N_GROUPS) for a in range(N_ATTRS)])
    out = ckpt.copy()
    out.drop("proto")
    out.drop("proto_count")
    for k, v in table.to_tensors().items():
        out.tensors[k] = v
    return out, table


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

ICTM_COLUMNS = ["iter", "loss", "akd", "al", "acl", "cl", "d_loss"]


def _stage2_checkpoint(base, config, ictm, prior, disc, iteration):
    ckpt = base.copy()
    for prefix in ("ictm", "prior", "disc"):
        ckpt.drop(prefix)
    ckpt.put("ictm", ictm.state_dict())
    ckpt.put("prior", prior.state_dict())
    ckpt.put("disc", disc.state_dict())
    ckpt.meta.update({"ictm": config.ictm.to_dict(), "train_ictm": config.to_dict(),
                      "disc": {"in_dim": disc.in_dim, "hidden": config.disc_hidden},
                      "ictm_iter": iteration})
    return ckpt


def build_stage2(config: TrainConfig, in_dim):
    rng = nx.make_rng(config.seed, _STREAM_ICTM_INIT)
    ictm = ICTM(config.ictm, rng)
    prior = PriorGenerator(config.ictm.n_groups, config.ictm.cond_channels, config.ictm.prior_hidden, rng)
    disc = Discriminator(in_dim, config.disc_hidden, config.ictm.n_groups, rng)
    return ictm, prior, disc


def generator_losses(ictm, prior, disc, table, z_s, g_s, g_t, attrs, config: TrainConfig):
    """Forward one micro-batch through the translator; returns the total
    generator loss, its named parts and the translated latents."""
    cond_t = prior.for_groups(g_t)
    cond_s = prior.for_groups(g_s).detach()
    z_t, rec = ictm.forward(z_s, cond_t)
    parts = {"akd": akd_loss(z_t, akd_target(z_s, table, g_s, g_t, attrs, config.s))}
    w = config.weights
    if w.al or w.acl:
        score, logits = disc(z_t)
        parts["al"] = generator_adv_loss(score)
        parts["acl"] = age_cls_loss(logits, g_t)
    else:
        parts["al"] = parts["acl"] = nx.Tensor(np.zeros(()))
    parts["cl"] = consistency_loss(rec, cond_s)
    return total_generator_loss(parts, w), parts, z_t


def train_ictm(config: TrainConfig, ckpt: ModelCheckpoint, latents, groups, attrs,
               log_path=None, progress=None, events=None):
    """Alternating translator and discriminator training on frozen latents.

    ``latents`` are packed flow latents of the training images. Each outer
    iteration accumulates ``accumulation`` translator micro-batches into one
    Adam step of translator and prior generator, then takes one discriminator
    step on real latents of the sampled target groups and the same fakes.
    ``events``, if a list, records the update order.
    """
    latents = np.asarray(latents)
    groups = np.asarray(groups, dtype=np.int64)
    attrs = np.asarray(attrs, dtype=np.int64)
    table = prototypes_from_checkpoint(ckpt)
    n = config.ictm.n_groups
    table.require([(g, a) for g in range(n) for a in range(N_ATTRS)])
    if latents.shape[1] != config.ictm.latent_channels:
        raise nx.ShapeError(f"latents have {latents.shape[1]} channels, ICTM expects {config.ictm.latent_channels}")
    pools = [np.flatnonzero(groups == g) for g in range(n)]
    if any(len(p) == 0 for p in pools):
        raise ValueError("every age group needs at least one training sample")

    ictm, prior, disc = build_stage2(config, int(np.prod(latents.shape[1:])))
    rng = nx.make_rng(config.seed, _STREAM_ICTM_DATA)
    opt_t = nx.Adam({**ictm.parameters("ictm/"), **prior.parameters("prior/")}, config.lr_ictm)
    opt_d = nx.Adam(disc.parameters("disc/"), config.lr_disc)
    log = _CsvLog(ICTM_COLUMNS, log_path)
    mb, acc, w = config.micro_batch, config.accumulation, config.weights

    for it in range(1, config.ictm_iters + 1):
        try:
            opt_t.zero_grad()
            disc.zero_grad()
            sums = dict.fromkeys(("loss", "akd", "al", "acl", "cl"), 0.0)
            fakes, targets = [], []
            for _ in range(acc):
                idx = rng.integers(0, len(latents), size=mb)
                g_s = groups[idx]
                g_t = (g_s + rng.integers(1, n, size=mb)) % n
                total, parts, z_t = generator_losses(ictm, prior, disc, table, latents[idx],
                                                     g_s, g_t, attrs[idx], config)
                value = total.item()
                if not np.isfinite(value):
                    raise NumericsError(f"non-finite translator loss at iteration {it}")
                total.backward()
                sums["loss"] += value / acc
                for k, v in parts.items():
                    sums[k] += float(np.asarray(getattr(v, "data", v))) / acc
                fakes.append(z_t.data)
                targets.append(g_t)
            opt_t.step(scale=1.0 / acc)
            if events is not None:
                events.append(("T", it))

            d_loss = 0.0
            if w.al or w.acl:
                disc.zero_grad()
                disc.power_iteration()
                fake = np.concatenate(fakes)
                g_t = np.concatenate(targets)
                real = latents[[rng.choice(pools[g]) for g in g_t]]
                s_real, l_real = disc(real)
                s_fake, _ = disc(fake)
                loss_d = discriminator_loss(s_real, s_fake, l_real, g_t, w)
                d_loss = loss_d.item()
                if not np.isfinite(d_loss):
                    raise NumericsError(f"non-finite discriminator loss at iteration {it}")
                loss_d.backward()
                opt_d.step()
                if events is not None:
                    events.append(("D", it))
        except NumericsError as exc:
            log.flush()
            raise TrainingDiverged(str(exc), _stage2_checkpoint(ckpt, config, ictm, prior, disc, it - 1),
                                   it - 1) from exc
        log.add((it, sums["loss"], sums["akd"], sums["al"], sums["acl"], sums["cl"], d_loss))
        if progress:
            progress(it, sums)
    log.flush()
    return _stage2_checkpoint(ckpt, config, ictm, prior, disc, config.ictm_iters), log.rows
