"""Command-line entry point: ``flowshift <command> ...``.

Exit status is 0 on success, 1 on a usage or configuration error and 2
when the command itself fails.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import MODES, Translator, evaluate
from .toydata import dataset_generate, load_dataset, read_pgm, write_pgm
from .training import (ConfigError, TrainConfig, TrainingDiverged, compute_prototype_stage, encode_images,
                       glow_from_checkpoint, train_glow, train_ictm)

EXIT_USAGE = 1
EXIT_FAULT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path=None, preset=None, seed=None) -> TrainConfig:
    data = {}
    if preset:
        try:
            text = resources.files("flowshift").joinpath(f"presets/{preset}.json").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"unknown preset {preset!r}") from None
        data.update(json.loads(text))
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
    if seed is not None:
        data["seed"] = seed
    return TrainConfig.from_dict(data)


def _echo(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_data_gen(args):
    rows = dataset_generate(args.count, args.seed if args.seed is not None else 0, args.out)
    n_test = sum(r["split"] == "test" for r in rows)
    _echo(f"wrote {len(rows)} images to {args.out} ({len(rows) - n_test} train / {n_test} test)")


def _train_images(cfg, data_dir):
    data_dir = data_dir or cfg.data
    if not data_dir:
        raise UsageError("no dataset given (use --data or the 'data' config key)")
    return load_dataset(data_dir, "train")


def _save_or_divergence(fn, out):
    try:
        ckpt, _ = fn()
    except TrainingDiverged as exc:
        save_checkpoint(out, exc.checkpoint)
        raise RuntimeError(f"{exc}; last good checkpoint (iteration {exc.iteration}) saved to {out}") from exc
    save_checkpoint(out, ckpt)
    return ckpt


def cmd_train_glow(args):
    cfg = load_config(args.config, args.preset, args.seed)
    if args.iters is not None:
        cfg = cfg.replace(glow_iters=args.iters)
    ds = _train_images(cfg, args.data)
    every = max(cfg.glow_iters // 20, 1)

    def progress(it, bpd):
        if it % every == 0:
            _echo(f"iter {it:5d}  bits/dim {bpd:.4f}")
    out = args.out or cfg.checkpoint
    if not out:
        raise UsageError("no output path (use --out)")
    _save_or_divergence(lambda: train_glow(cfg, ds.images, log_path=args.log, progress=progress), out)
    _echo(f"saved {out}")


def cmd_prototypes(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data, "train")
    ckpt, table = compute_prototype_stage(ckpt, ds.images, ds.g, ds.a)
    save_checkpoint(args.out, ckpt)
    for (g, a), n in sorted(table.counts.items()):
        _echo(f"group {g} attr {a}: {n} samples")
    _echo(f"saved {args.out}")


def cmd_train_ictm(args):
    cfg = load_config(args.config, args.preset, args.seed)
    if args.iters is not None:
        cfg = cfg.replace(ictm_iters=args.iters)
    ckpt = load_checkpoint(args.ckpt)
    ds = _train_images(cfg, args.data)
    if not ckpt.has("proto"):
        ckpt, _ = compute_prototype_stage(ckpt, ds.images, ds.g, ds.a)
    latents = encode_images(glow_from_checkpoint(ckpt), ds.images)
    every = max(cfg.ictm_iters // 20, 1)

    def progress(it, parts):
        if it % every == 0:
            _echo(f"iter {it:5d}  " + "  ".join(f"{k} {v:.4f}" for k, v in parts.items()))
    _save_or_divergence(lambda: train_ictm(cfg, ckpt, latents, ds.g, ds.a, log_path=args.log,
                                           progress=progress), args.out)
    _echo(f"saved {args.out}")


def cmd_translate(args):
    tr = Translator(load_checkpoint(args.ckpt), s=args.s)
    image = read_pgm(args.input)[None]
    kw = {}
    if args.source is not None:
        kw["source"] = args.source
    if args.attr is not None:
        kw["attr"] = args.attr
    out, rec = tr.translate_image(image, args.target, args.mode, **kw)
    write_pgm(args.out, out[0])
    if args.mode.startswith("ictm"):
        _echo(f"recovered condition is closest to group {int(tr.recovered_group(rec)[0])}")
    _echo(f"saved {args.out}")


def cmd_sample(args):
    glow = glow_from_checkpoint(load_checkpoint(args.ckpt))
    images, _ = glow.sample(nx.make_rng(args.seed if args.seed is not None else 0), args.n, args.temperature)
    os.makedirs(args.out, exist_ok=True)
    for i, img in enumerate(images):
        write_pgm(os.path.join(args.out, f"sample_{i:04d}.pgm"), img)
    _echo(f"wrote {len(images)} samples to {args.out}")


def cmd_eval(args):
    if not args.ckpt or not os.path.exists(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    report = evaluate(load_checkpoint(args.ckpt), load_dataset(args.data, args.split), args.mode, s=args.s)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(report.to_csv())
    _echo(report.to_table())


def cmd_inspect(args):
    ckpt = load_checkpoint(args.path)
    _echo(json.dumps(ckpt.meta, indent=2, sort_keys=True))
    width = max((len(k) for k in ckpt.tensors), default=0)
    total = 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        total += t.size
        _echo(f"{name:<{width}}  {str(t.dtype):<8} {tuple(t.shape)}")
    _echo(f"{len(ckpt.tensors)} tensors, {total} values")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="flowshift", description="Invertible latent-space age translation on toy shapes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file whose keys mirror the training config")
        sp.add_argument("--preset", help="packaged config preset, e.g. 'desk'")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    data = sub.add_parser("data", help="dataset tools")
    dsub = data.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = dsub.add_parser("gen", help="write the synthetic dataset")
    gen.add_argument("--count", type=int, default=800)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=cmd_data_gen)

    train = sub.add_parser("train", help="training stages")
    tsub = train.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    tg = tsub.add_parser("glow", help="stage 1: maximum-likelihood flow training")
    common(tg, out_required=False)
    tg.add_argument("--data")
    tg.add_argument("--iters", type=int)
    tg.add_argument("--log", help="CSV loss log")
    tg.set_defaults(fn=cmd_train_glow)
    ti = tsub.add_parser("ictm", help="stage 2: translator and discriminator training")
    common(ti)
    ti.add_argument("--ckpt", required=True, help="checkpoint with a trained flow")
    ti.add_argument("--data")
    ti.add_argument("--iters", type=int)
    ti.add_argument("--log", help="CSV loss log")
    ti.set_defaults(fn=cmd_train_ictm)

    pr = sub.add_parser("prototypes", help="tabulate mean latents per (group, attribute)")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_prototypes)

    tr = sub.add_parser("translate", help="translate one PGM image to a target age group")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--target", type=int, required=True)
    tr.add_argument("--mode", choices=MODES, default="ictm")
    tr.add_argument("--s", type=float, help="edit strength for the prototype modes")
    tr.add_argument("--source", type=int, help="source group for the prototype modes")
    tr.add_argument("--attr", type=int, help="attribute value for glow-attr-manip")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_translate)

    sa = sub.add_parser("sample", help="draw images from the flow prior")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--n", type=int, default=16)
    sa.add_argument("--temperature", type=float, default=0.7)
    sa.add_argument("--seed", type=int)
    sa.add_argument("--out", required=True)
    sa.set_defaults(fn=cmd_sample)

    ev = sub.add_parser("eval", help="oracle-scored translation report")
    ev.add_argument("--ckpt")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--mode", choices=MODES, default="ictm")
    ev.add_argument("--s", type=float)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out", help="CSV report path")
    ev.set_defaults(fn=cmd_eval)

    ins = sub.add_parser("inspect", help="inspect artifacts")
    isub = ins.add_subparsers(dest="what", required=True, parser_class=_Parser)
    ic = isub.add_parser("ckpt", help="list checkpoint tensors and metadata")
    ic.add_argument("path")
    ic.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"flowshift: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError, KeyError, CheckpointError) as exc:
        print(f"flowshift: {exc}", file=sys.stderr)
        return EXIT_FAULT
    return 0


if __name__ == "__main__":
    sys.exit(main())
