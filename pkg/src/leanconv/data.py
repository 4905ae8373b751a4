"""Datasets: CIFAR-10 binary batches and a synthetic oriented-grating task."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def image_shape(self):
        return self.x_train.shape[1:]

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.x_train.astype(dtype), self.y_train, self.x_val.astype(dtype), self.y_val,
                       self.n_classes, dict(self.meta))

    def subset(self, n_train: int, n_val: Optional[int] = None) -> "Dataset":
        n_val = len(self.y_val) if n_val is None else n_val
        return Dataset(self.x_train[:n_train], self.y_train[:n_train], self.x_val[:n_val],
                       self.y_val[:n_val], self.n_classes, dict(self.meta))


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and zero-pad-then-crop, per sample."""
    b, c, h, w = x.shape
    out = np.empty_like(x)
    flips = rng.random(b) < 0.5
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = np.where(flips[:, None, None, None], x[..., ::-1], x)
    oy = rng.integers(0, 2 * pad + 1, size=b)
    ox = rng.integers(0, 2 * pad + 1, size=b)
    for i in range(b):
        out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    return out


def read_cifar_file(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} out of range; not a CIFAR-10 file")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, subset: Optional[int] = None, dtype=np.float32) -> Dataset:
    """Read the five training batches and the test batch, normalized per channel.

    Mean and standard deviation come from the (possibly subsetted) train split.
    """
    directory = Path(directory)
    parts = [read_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    x_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([p[1] for p in parts])
    x_te, y_te = read_cifar_file(directory / CIFAR_TEST_FILE)
    if subset is not None:
        x_tr, y_tr = x_tr[:subset], y_tr[:subset]
        n_test = max(1, subset // 5)
        x_te, y_te = x_te[:n_test], y_te[:n_test]
    x_tr = x_tr.astype(np.float64)
    mean = x_tr.mean(axis=(0, 2, 3), keepdims=True)
    std = x_tr.std(axis=(0, 2, 3), keepdims=True)
    norm_tr = ((x_tr - mean) / std).astype(dtype)
    norm_te = ((x_te.astype(np.float64) - mean) / std).astype(dtype)
    return Dataset(norm_tr, y_tr, norm_te, y_te, 10,
                   {"source": str(directory), "mean": mean.ravel().tolist(), "std": std.ravel().tolist()})


def make_synthetic(n_classes: int = 4, n_samples: int = 1024, size: int = 16, seed: int = 0,
                   channels: int = 1, val_fraction: float = 0.25, noise: float = 0.3,
                   dtype=np.float64) -> Dataset:
    """Oriented gratings with class-independent blob clutter and noise.

    Class ``k`` is a sinusoidal grating at orientation ``pi k / n_classes``
    with random frequency and phase. Every class has the same per-pixel value
    distribution, so models that only see pixel values (1x1 convolutions and
    pooling, or linear maps on raw pixels) stay near chance, while a small
    spatial filter bank separates them.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n_samples, channels, size, size))
    for n, k in enumerate(labels):
        theta = np.pi * k / n_classes + rng.normal(0, 0.05)
        freq = rng.uniform(0.12, 0.28)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        clutter = np.zeros_like(grating)
        for _ in range(rng.integers(0, 3)):
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(1.0, 2.5)
            clutter += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        for c in range(channels):
            images[n, c] = grating + 0.5 * clutter + noise * rng.standard_normal((size, size))
    images = (images - images.mean()) / images.std()
    n_val = int(round(n_samples * val_fraction))
    n_tr = n_samples - n_val
    return Dataset(images[:n_tr].astype(dtype), labels[:n_tr], images[n_tr:].astype(dtype), labels[n_tr:],
                   n_classes, {"source": "synthetic", "seed": seed, "size": size})


def save_dataset(ds: Dataset, path) -> Path:
    """Write a dataset to one ``.npz`` (meta stored as JSON)."""
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, x_train=ds.x_train, y_train=ds.y_train, x_val=ds.x_val, y_val=ds.y_val,
                 n_classes=np.int64(ds.n_classes), meta=np.frombuffer(json.dumps(ds.meta).encode(), dtype=np.uint8))
    return path


def load_dataset(path, dtype=None) -> Dataset:
    import json

    with np.load(Path(path), allow_pickle=False) as z:
        ds = Dataset(z["x_train"], z["y_train"], z["x_val"], z["y_val"], int(z["n_classes"]),
                     json.loads(z["meta"].tobytes().decode()))
    return ds.astype(dtype) if dtype is not None else ds
