"""Ablation grid: component toggles trained under one shared recipe, one CSV row each."""
from __future__ import annotations

import csv
import os
from dataclasses import replace

from .config import TrainConfig
from .dataset import generate
from .net import ModelConfig, count_params
from .train import load_splits, train

# name -> ModelConfig overrides
VARIANTS = {
    "full": {},
    "norm_only": {"side": False},
    "side_only": {"norm_tuning": False},
    "frozen": {"side": False, "norm_tuning": False},
    "no_attention": {"use_attention": False},
    "no_residual": {"use_residual": False},
    "sconv_small": {"sconv_mode": "small"},
    "sconv_small_skip": {"sconv_mode": "small_skip"},
    "sconv_square": {"sconv_mode": "square"},
    "selka_no_scaling": {"scaling": False},
    "selka_no_interaction": {"interaction": False},
    "selka_no_spatial": {"spatial_attention": False},
}

FIELDS = ["variant", "seed", "trainable", "frozen", "final_loss", "iou", "niou", "pd", "fa"]

QUICK = dict(count=10, size=32, epochs=2, batch=4)


def variant_config(name, base=None):
    if name not in VARIANTS:
        raise ValueError(f"unknown ablation variant {name!r}")
    return replace(base or ModelConfig(), **VARIANTS[name])


def run_grid(out_csv, work_dir, cfg=None, seeds=(0,), variants=None, quick=False, log=None):
    """Train every variant for every seed on one dataset; returns the CSV rows."""
    variants = list(VARIANTS) if variants is None else list(variants)
    cfg = cfg or TrainConfig()
    if quick:
        data_dir = os.path.join(work_dir, "data")
        generate(data_dir, QUICK["count"], QUICK["size"], seed=cfg.seed)
        cfg = replace(cfg, data_dir=data_dir, epochs=QUICK["epochs"], batch=QUICK["batch"])
    data = load_splits(cfg)
    rows = []
    for name in variants:
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, model=variant_config(name, cfg.model),
                              out_dir=os.path.join(work_dir, f"{name}_s{seed}"), eval_every=cfg.epochs)
            model, log_rows = train(run_cfg, data=data)
            last = log_rows[-1]
            counts = count_params(model)
            rows.append({"variant": name, "seed": seed, **counts, "final_loss": last["loss"],
                         **{k: last.get(k, "") for k in ("iou", "niou", "pd", "fa")}})
            if log:
                log(f"{name} seed={seed} iou={last.get('iou', float('nan')):.4f} loss={last['loss']:.4f}")
    os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
    return rows
