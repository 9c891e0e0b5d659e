"""On-disk scene datasets: NNNN_img.t32 / NNNN_mask.t32 pairs plus manifest.txt."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import t32
from .optics import Clutter, GaussianPsf, make_scene, parse_psf, random_scene_spec

MANIFEST = "manifest.txt"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    seed: int
    targets: int
    size: tuple
    psf: str

    def line(self):
        h, w = self.size
        return f"id={self.id} seed={self.seed} targets={self.targets} size={h}x{w} psf={self.psf}"


def scene_seed(base_seed, index):
    """Per-scene u64 seed derived from the dataset seed."""
    return int(np.random.default_rng([base_seed, index]).integers(0, 2 ** 63))


def scene_spec(seed, size=64, targets=None, psf=None, clutter=None, noise_sigma=0.1):
    """Spec for one dataset scene; target count 1..3 drawn from ``seed`` unless given."""
    if targets is None:
        targets = int(np.random.default_rng([seed, 3]).integers(1, 4))
    return random_scene_spec(seed, size=size, n_targets=targets, psf=psf or GaussianPsf(1.0),
                             clutter=clutter or Clutter(), noise_sigma=noise_sigma)


def generate(out_dir, count, size=64, seed=0, psf=None, clutter=None, noise_sigma=0.1):
    """Write ``count`` scenes and the manifest; returns the manifest entries."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(count):
        s = scene_seed(seed, i)
        spec = scene_spec(s, size, psf=psf, clutter=clutter, noise_sigma=noise_sigma)
        scene = make_scene(spec)
        sid = f"{i:04d}"
        t32.save(os.path.join(out_dir, f"{sid}_img.t32"), scene.image.data[0, 0])
        t32.save(os.path.join(out_dir, f"{sid}_mask.t32"), scene.mask.data[0, 0])
        entries.append(ManifestEntry(sid, s, len(spec.targets), spec.size, spec.psf.describe()))
    with open(os.path.join(out_dir, MANIFEST), "w", newline="\n") as fh:
        fh.writelines(e.line() + "\n" for e in entries)
    return entries


def parse_manifest_line(line, where="manifest"):
    try:
        fields = dict(tok.split("=", 1) for tok in line.split())
        h, w = (int(v) for v in fields["size"].split("x"))
        entry = ManifestEntry(fields["id"], int(fields["seed"]), int(fields["targets"]),
                              (h, w), fields["psf"])
        parse_psf(entry.psf)
    except (KeyError, ValueError) as e:
        raise DatasetError(f"{where}: malformed manifest line {line.strip()!r} ({e})") from None
    return entry


def read_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.isfile(path):
        raise DatasetError(f"missing manifest: {path}")
    with open(path) as fh:
        return [parse_manifest_line(line, f"{path}:{n}")
                for n, line in enumerate(fh, 1) if line.strip()]


def load_dataset(data_dir):
    """Images and masks as (N, 1, h, w) float32 arrays, in manifest order."""
    entries = read_manifest(data_dir)
    if not entries:
        raise DatasetError(f"empty manifest in {data_dir}")
    images, masks = [], []
    for e in entries:
        pair = []
        for kind in ("img", "mask"):
            path = os.path.join(data_dir, f"{e.id}_{kind}.t32")
            if not os.path.isfile(path):
                raise DatasetError(f"missing dataset file: {path}")
            try:
                arr = t32.load(path)
            except t32.T32Error as err:
                raise DatasetError(f"corrupt dataset file: {err}") from None
            if arr.shape != e.size:
                raise DatasetError(f"{path}: shape {arr.shape} does not match manifest size {e.size}")
            pair.append(arr)
        images.append(pair[0])
        masks.append(pair[1])
    return np.stack(images)[:, None], np.stack(masks)[:, None], entries
