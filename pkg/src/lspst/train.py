"""Soft-IoU training with Adam and poly decay, plus checkpoint evaluation."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config
from .dataset import load_dataset
from .metrics import default_thresholds, evaluate_confidences
from .net import LspstModel
from .nn import digest
from .tensor import Tensor, backward, no_grad, reduce_mean, reduce_sum


class TrainingError(RuntimeError):
    pass


def soft_iou_loss(conf, gt):
    """Mean over the batch of 1 - sum(XY) / sum(X + Y - XY)."""
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=conf.dtype))
    if conf.shape != gt.shape:
        raise ValueError(f"soft_iou_loss: conf {conf.shape} vs gt {gt.shape}")
    axes = tuple(range(1, conf.ndim))
    xy = conf * gt
    inter = reduce_sum(xy, axes)
    union = reduce_sum(conf + gt - xy, axes)
    return reduce_mean(1.0 - inter / union)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One bias-corrected Adam update over named trainable parameters.

    Missing gradients count as zero. Frozen parameters are rejected.
    """
    b1, b2 = betas
    if not state.m:
        for name, p in params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
    names = [n for n, _ in params]
    if sorted(names) != sorted(state.m):
        raise ValueError("Adam state does not match the parameter list")
    state.t += 1
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params:
        if not p.trainable:
            raise ValueError(f"adam_step got frozen parameter {name}")
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"Adam state for {name} has shape {m.shape}, parameter {p.data.shape}")
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.state = AdamState()

    def step(self, lr):
        adam_step(self.params, self.state, lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def poly_lr(epoch, cfg):
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * (1 - epoch / cfg.epochs) ** cfg.poly_power


# ------------------------------------------------------------------ running


def build_model(cfg):
    return LspstModel(cfg.model.with_(seed=cfg.seed))


def split_holdout(n, frac):
    """Deterministic split: the last ``round(frac * n)`` scenes are held out."""
    k = int(round(frac * n))
    if k >= n:
        raise ValueError(f"holdout {frac} leaves no training scenes out of {n}")
    return np.arange(n - k), np.arange(n - k, n)


def load_splits(cfg):
    images, masks, _ = load_dataset(cfg.data_dir)
    if cfg.eval_dir:
        ev_images, ev_masks, _ = load_dataset(cfg.eval_dir)
        return (images, masks), (ev_images, ev_masks)
    tr, ev = split_holdout(len(images), cfg.holdout)
    return (images[tr], masks[tr]), (images[ev], masks[ev])


def predict(model, images, batch=8, threads=None):
    """Confidence maps (N, h, w) for a stack of (N, 1, h, w) images."""
    threads = threads or eval_threads()
    chunks = [images[i:i + batch] for i in range(0, len(images), batch)]

    def run(chunk):
        with no_grad():
            return model(Tensor(chunk)).data[:, 0]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[2:], np.float32)


def random_flips(rng, images, masks):
    """Independent random horizontal and vertical flips per sample."""
    images, masks = images.copy(), masks.copy()
    flips = rng.random((len(images), 2)) < 0.5
    for i, (fh, fv) in enumerate(flips):
        if fh:
            images[i], masks[i] = images[i][..., ::-1], masks[i][..., ::-1]
        if fv:
            images[i], masks[i] = images[i][..., ::-1, :], masks[i][..., ::-1, :]
    return images, masks


def eval_threads():
    try:
        return max(1, int(os.environ.get("LSPST_THREADS", "1")))
    except ValueError:
        return 1


RUNLOG_FIELDS = ["epoch", "lr", "loss", "iou", "niou", "pd", "fa"]


def train(cfg, log=None, data=None):
    """Train per ``cfg``; writes the checkpoint, runlog.csv and config to ``cfg.out_dir``.

    Returns (model, runlog rows). ``data`` may pass preloaded
    ((train_images, train_masks), (eval_images, eval_masks)).
    """
    (images, masks), (ev_images, ev_masks) = data or load_splits(cfg)
    model = build_model(cfg)
    opt = Adam(model.trainable_parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.cfg"), "w", newline="\n") as fh:
        fh.write(dump_config(cfg))
    rows = []
    n = len(images)
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        order = rng.permutation(n)
        total, steps = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch)):
            idx = order[start:start + cfg.batch]
            x, y = images[idx], masks[idx]
            if cfg.augment:
                x, y = random_flips(rng, x, y)
            loss = soft_iou_loss(model(Tensor(x)), Tensor(y))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
            total += value
            steps += 1
        row = {"epoch": epoch, "lr": lr, "loss": total / steps}
        if len(ev_images) and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            rep = evaluate_confidences(predict(model, ev_images), ev_masks[:, 0])
            row.update(iou=rep.iou, niou=rep.niou, pd=rep.pd, fa=rep.fa)
        rows.append(row)
        save_checkpoint(model, cfg.out_dir)
        _write_runlog(os.path.join(cfg.out_dir, "runlog.csv"), rows)
        if log:
            log(_fmt_row(row))
    return model, rows


def _fmt_row(row):
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())


def _write_runlog(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, RUNLOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_num(r.get(k, "")) for k in RUNLOG_FIELDS})


def _csv_num(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def frozen_digest(model):
    return digest(model.frozen_parameters())


# ------------------------------------------------------------------ evaluation


def write_report(out_dir, rep, ids, thresholds):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "iou", "pd_num", "pd_den", "fa_pixels", "total_pixels"])
        for sid, (iou, c) in zip(ids, rep.per_scene):
            w.writerow([sid, repr(float(iou)), c.detected, c.targets, c.fa_pixels, c.total_pixels])
        tot = [sum(getattr(c, k) for _, c in rep.per_scene) for k in ("detected", "targets", "fa_pixels", "total_pixels")]
        w.writerow(["summary", repr(rep.iou), *tot])
    with open(os.path.join(out_dir, "roc.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fa", "pd"])
        for t, (fa, pd) in zip(thresholds, rep.roc):
            w.writerow([repr(float(t)), repr(float(fa)), repr(float(pd))])
    with open(os.path.join(out_dir, "metrics.json"), "w", newline="\n") as fh:
        json.dump({"iou": rep.iou, "niou": rep.niou, "pd": rep.pd, "fa": rep.fa}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def evaluate(cfg, ckpt_dir, data_dir, out_dir, thresholds=None, thresh=0.5):
    """Run the checkpointed model over ``data_dir`` and write report/roc CSVs."""
    images, masks, entries = load_dataset(data_dir)
    model = load_checkpoint(build_model(cfg), ckpt_dir)
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=float)
    confs = predict(model, images)
    rep = evaluate_confidences(confs, masks[:, 0], thresh, thresholds)
    write_report(out_dir, rep, [e.id for e in entries], thresholds)
    return rep
