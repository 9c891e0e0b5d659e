"""Checkpoints: ``ckpt.idx`` (name offset length trainable) plus ``ckpt.t32blob``."""
from __future__ import annotations

import os

from . import t32

INDEX, BLOB = "ckpt.idx", "ckpt.t32blob"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lines, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        rec = t32.encode(p.data)
        lines.append(f"{name} {offset} {len(rec)} {int(p.trainable)}\n")
        chunks.append(rec)
        offset += len(rec)
    # blob first, so a complete index always points at a complete blob
    with open(os.path.join(out_dir, BLOB), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(os.path.join(out_dir, INDEX), "w", newline="\n") as fh:
        fh.writelines(lines)


def read_checkpoint(ckpt_dir):
    """Return [(name, array, trainable)] in index order."""
    idx_path, blob_path = os.path.join(ckpt_dir, INDEX), os.path.join(ckpt_dir, BLOB)
    for path in (idx_path, blob_path):
        if not os.path.isfile(path):
            raise CheckpointError(f"missing checkpoint file: {path}")
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    out = []
    with open(idx_path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                name, off, length, trainable = line.split()
                off, length = int(off), int(length)
                if trainable not in ("0", "1"):
                    raise ValueError(f"trainable flag {trainable!r}")
            except ValueError as e:
                raise CheckpointError(f"{idx_path}:{n}: malformed index line ({e})") from None
            if off < 0 or off + length > len(blob):
                raise CheckpointError(f"{idx_path}:{n}: record {name} runs past the end of {blob_path}")
            arr = t32.decode(blob[off:off + length], f"{blob_path}[{name}]")
            out.append((name, arr, trainable == "1"))
    return out


def load_checkpoint(model, ckpt_dir):
    """Copy checkpoint values into ``model`` after validating names and shapes."""
    records = {name: (arr, tr) for name, arr, tr in read_checkpoint(ckpt_dir)}
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(records))
    extra = sorted(set(records) - set(params))
    if missing or extra:
        raise CheckpointError(f"{ckpt_dir}: checkpoint does not match model "
                              f"(missing {missing[:5]}, unexpected {extra[:5]})")
    for name, p in params.items():
        arr, _ = records[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{ckpt_dir}: {name} has shape {arr.shape}, model expects {p.data.shape}")
    for name, p in params.items():
        p.data = records[name][0].astype(p.data.dtype)
    return model
