"""Checkpoint container: one ``.npz`` holding every array plus a JSON header."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import LeanResNet, NetworkConfig

CHECKPOINT_VERSION = 1


def save_checkpoint(model: LeanResNet, path, extra: dict = None) -> Path:
    path = Path(path)
    meta = {
        "format": "leanconv-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "n_classes": model.n_classes,
        "dtype": model.dtype.name,
        "path": model.path,
        "params": list(model.params),
        "buffers": list(model.buffers),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path) -> LeanResNet:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != "leanconv-checkpoint":
            raise ValueError(f"{path} is not a leanconv checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} is newer than supported {CHECKPOINT_VERSION}")
        cfg = NetworkConfig.from_dict(meta["config"])
        model = LeanResNet(cfg, meta["n_classes"], dtype=meta["dtype"], path=meta.get("path", "auto"))
        for k in meta["params"]:
            model.params[k] = z[f"param/{k}"].copy()
        for k in meta["buffers"]:
            model.buffers[k] = z[f"buffer/{k}"].copy()
    model.zero_grad()
    return model
