"""Synthetic image classes and the on-disk dataset format."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import read_tensor, write_tensor
from .errors import CapacityError, ContractError
from .protocol import TEST, TRAIN, LabeledSample


@dataclass(frozen=True)
class SyntheticParams:
    classes: int = 40
    samples_per_class: int = 30
    separation: float = 1.0
    noise_std: float = 0.2
    channels: int = 3
    image_size: int = 16
    train_fraction: float = 0.8
    seed: int = 0


def generate_synthetic_dataset(params: SyntheticParams) -> list[LabeledSample]:
    """One Gaussian template per class (scaled by ``separation``) plus i.i.d. pixel noise.

    Within each class the first ``floor(train_fraction * samples_per_class)``
    samples are training data, the rest test data.
    """
    if params.classes < 2 or params.samples_per_class < 2:
        raise ContractError("need at least 2 classes and 2 samples per class")
    if params.noise_std < 0:
        raise ContractError("noise_std must be >= 0")
    n_train = int(np.floor(params.train_fraction * params.samples_per_class))
    n_test = params.samples_per_class - n_train
    if n_train < 1 or n_test < 1:
        raise CapacityError(
            f"train_fraction {params.train_fraction} splits {params.samples_per_class} samples into "
            f"{n_train} train / {n_test} test; both must be >= 1"
        )
    rng = np.random.default_rng(params.seed)
    shape = (params.channels, params.image_size, params.image_size)
    templates = rng.standard_normal((params.classes, *shape)) * params.separation
    out = []
    for label in range(params.classes):
        noise = rng.standard_normal((params.samples_per_class, *shape)) * params.noise_std
        for i in range(params.samples_per_class):
            out.append(LabeledSample(templates[label] + noise[i], label, TRAIN if i < n_train else TEST))
    return out


def save_dataset(samples: list[LabeledSample], directory: str | Path) -> Path:
    """Write ``images.bin`` (tensor records) and ``manifest.csv`` (offset, label, split)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(directory / "images.bin", "wb") as blob, open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "offset", "label", "split"])
        for s in samples:
            offset = blob.tell()
            write_tensor(blob, np.asarray(s.image, dtype=np.float64))
            writer.writerow(["images.bin", offset, s.label, s.split])
    return manifest


def load_dataset(manifest: str | Path) -> list[LabeledSample]:
    manifest = Path(manifest)
    out = []
    handles = {}
    try:
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                path = manifest.parent / row["path"]
                if path not in handles:
                    handles[path] = open(path, "rb")
                blob = handles[path]
                blob.seek(int(row["offset"]))
                out.append(LabeledSample(read_tensor(blob), int(row["label"]), row["split"]))
    finally:
        for h in handles.values():
            h.close()
    return out
