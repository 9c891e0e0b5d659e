"""Command line entry point: gen, train, eval, erf, matched-filter, ablate."""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import t32
from .config import ConfigError, TrainConfig, apply_overrides, load_config
from .dataset import DatasetError, generate


def _pairs(items):
    out = []
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out.append((key.strip(), value.strip()))
    return out


def _train_config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    pairs = _pairs(args.set)
    for flag in ("data", "out", "epochs", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            pairs.append(({"data": "data_dir", "out": "out_dir"}.get(flag, flag), str(v)))
    return apply_overrides(cfg, pairs)


def cmd_gen(args):
    psf = None
    if args.psf:
        from .optics import parse_psf
        psf = parse_psf(args.psf)
    entries = generate(args.out, args.count, args.size, seed=args.seed, psf=psf, noise_sigma=args.noise)
    print(f"wrote {len(entries)} scenes to {args.out}")


def cmd_train(args):
    from .train import train
    cfg = _train_config(args)
    train(cfg, log=print if not args.quiet else None)
    print(f"checkpoint written to {cfg.out_dir}")


def cmd_eval(args):
    from .train import evaluate
    cfg_path = args.config or os.path.join(args.ckpt, "config.cfg")
    cfg = load_config(cfg_path)
    cfg = apply_overrides(cfg, _pairs(args.set))
    rep = evaluate(cfg, args.ckpt, args.data, args.out, thresh=args.thresh)
    print(f"iou={rep.iou:.6f} niou={rep.niou:.6f} pd={rep.pd:.6f} fa={rep.fa:.6g}")


ERF_FIELDS = ["variant", "seed", "mu_x", "mu_y", "sigma_x", "sigma_y", "r2", "size", "a_align", "erf_loss"]


def cmd_erf(args):
    from .erf import align_score, erf_loss, fit_gaussian, kernel_variant, measure_erf, probe_batch, write_pgm
    from .optics import GaussianPsf, make_psf
    net = kernel_variant(args.variant, args.channels, args.depth, args.seed)
    probes = probe_batch(args.seed, (args.probes, args.channels, args.size, args.size))
    erf = measure_erf(net, probes, source=f"{args.variant} seed={args.seed}")
    fit = fit_gaussian(erf)
    hstar = make_psf(GaussianPsf(args.hstar_sigma), size=_odd_size(args.hstar_sigma, args.size)).values
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"erf_{args.variant}_s{args.seed}")
    t32.save(stem + ".t32", erf.values.astype(np.float32))
    write_pgm(stem + ".pgm", erf.values)
    row = {"variant": args.variant, "seed": args.seed, "mu_x": fit.center[0], "mu_y": fit.center[1],
           "sigma_x": fit.sigma_x, "sigma_y": fit.sigma_y, "r2": fit.r2, "size": fit.size,
           "a_align": align_score(erf, hstar), "erf_loss": erf_loss(erf, hstar)}
    with open(stem + ".csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ERF_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    print(",".join(str(row[k]) for k in ERF_FIELDS))


def _odd_size(sigma, limit):
    k = 2 * int(np.ceil(4 * sigma)) + 1
    return min(k, limit if limit % 2 else limit - 1)


def cmd_matched_filter(args):
    from .erf import FilterBank, best_filter, cauchy_schwarz_gap
    from .optics import GaussianPsf, make_psf, parse_psf
    psf = make_psf(parse_psf(args.psf), size=args.size).values
    sigmas = [float(s) for s in args.bank.split(",")]
    bank = FilterBank.from_arrays([make_psf(GaussianPsf(s), size=args.size).values for s in sigmas],
                                  [f"gaussian:{s:g}" for s in sigmas])
    print("filter,response,bound,gap")
    for name, h in bank.filters:
        cs = cauchy_schwarz_gap(psf, h, args.amplitude)
        print(f"{name},{cs.R!r},{cs.bound!r},{cs.gap!r}")
    i = best_filter(psf, bank, args.amplitude)
    print(f"best,{i},{bank.filters[i][0]}")


def cmd_ablate(args):
    from .ablate import VARIANTS, run_grid
    cfg = _train_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    work = args.work or os.path.splitext(args.out_csv)[0] + "_runs"
    run_grid(args.out_csv, work, cfg, seeds=seeds, variants=variants, quick=args.quick,
             log=None if args.quiet else print)
    print(f"wrote {args.out_csv}")


def build_parser():
    p = argparse.ArgumentParser(prog="lspst", description="Side-tuned small-target segmentation toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    g = sub.add_parser("gen", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=160)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--psf", help="gaussian:s | airy:D,lam,f,pitch | heat:alpha,t")
    g.add_argument("--noise", type=float, default=0.1)
    g.set_defaults(func=cmd_gen)

    def train_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--data")
        sp.add_argument("--out")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--quiet", action="store_true")

    t = sub.add_parser("train", help="train a model")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="defaults to the checkpoint's config.cfg")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--thresh", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("erf", help="measure the effective receptive field of a kernel variant")
    r.add_argument("--variant", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--depth", type=int, default=4)
    r.add_argument("--channels", type=int, default=4)
    r.add_argument("--size", type=int, default=65)
    r.add_argument("--probes", type=int, default=16)
    r.add_argument("--hstar-sigma", type=float, default=4.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_erf)

    m = sub.add_parser("matched-filter", help="score a Gaussian filter bank against a PSF")
    m.add_argument("--psf", default="gaussian:1.0")
    m.add_argument("--bank", default="0.5,1,2,4", help="comma-separated Gaussian sigmas")
    m.add_argument("--size", type=int, default=15)
    m.add_argument("--amplitude", type=float, default=1.0)
    m.set_defaults(func=cmd_matched_filter)

    a = sub.add_parser("ablate", help="train the ablation grid and write one CSV")
    train_flags(a)
    a.add_argument("--quick", action="store_true", help="tiny dataset and schedule")
    a.add_argument("--seeds", default="0")
    a.add_argument("--variants", help="comma-separated subset")
    a.add_argument("--work", help="directory for per-run outputs")
    a.add_argument("--out-csv", default="ablation.csv")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.func(args)
    except (ConfigError, DatasetError, ValueError, OSError, RuntimeError) as e:
        print(f"lspst {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
