import numpy as np
import pytest

from fscil_delta.data import SyntheticParams, generate_synthetic_dataset, load_dataset, save_dataset
from fscil_delta.errors import CapacityError, ContractError


def test_noise_free_classes_are_constant():
    ds = generate_synthetic_dataset(SyntheticParams(classes=3, samples_per_class=4, noise_std=0.0, image_size=4))
    for c in range(3):
        imgs = [s.image for s in ds if s.label == c]
        assert all(np.array_equal(imgs[0], i) for i in imgs)


def test_counts_and_split():
    ds = generate_synthetic_dataset(SyntheticParams(classes=100, samples_per_class=30, image_size=4, channels=1))
    assert len(ds) == 3000
    assert sum(s.split == "train" for s in ds) == 2400
    assert sum(s.split == "test" for s in ds) == 600


def test_reproducible():
    p = SyntheticParams(classes=3, samples_per_class=5, image_size=4, seed=7)
    a, b = generate_synthetic_dataset(p), generate_synthetic_dataset(p)
    assert all(x.image.tobytes() == y.image.tobytes() and x.label == y.label for x, y in zip(a, b))


@pytest.mark.parametrize("separation, noise", [(1.0, 1.0), (1.0, 0.2), (3.0, 2.0)])
def test_within_class_correlation_dominates(separation, noise):
    ds = generate_synthetic_dataset(SyntheticParams(classes=6, samples_per_class=8, separation=separation,
                                                    noise_std=noise, image_size=8))
    flat = np.stack([s.image.ravel() for s in ds])
    labels = np.array([s.label for s in ds])
    corr = np.corrcoef(flat)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(ds), dtype=bool)
    assert corr[same & off_diag].mean() > corr[~same].mean()


def test_benchmark_geometry():
    ds = generate_synthetic_dataset(SyntheticParams(classes=10, samples_per_class=10))
    flat = np.stack([s.image.ravel() for s in ds])
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    labels = np.array([s.label for s in ds])
    means = np.stack([flat[labels == c].mean(axis=0) for c in range(10)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    between = (means @ means.T)[np.triu_indices(10, 1)]
    assert between.mean() < 0.3
    within = [flat[labels == c] @ means[c] for c in range(10)]
    assert np.mean(np.concatenate(within)) > 0.95


def test_impossible_split():
    with pytest.raises(CapacityError):
        generate_synthetic_dataset(SyntheticParams(classes=2, samples_per_class=3, train_fraction=0.2))


def test_invalid_params():
    with pytest.raises(ContractError):
        generate_synthetic_dataset(SyntheticParams(classes=1))
    with pytest.raises(ContractError):
        generate_synthetic_dataset(SyntheticParams(noise_std=-1.0))


def test_file_roundtrip(tmp_path):
    ds = generate_synthetic_dataset(SyntheticParams(classes=3, samples_per_class=4, image_size=4, channels=2))
    manifest = save_dataset(ds, tmp_path)
    header = manifest.read_text().splitlines()[0]
    assert header == "path,offset,label,split"
    back = load_dataset(manifest)
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert a.label == b.label and a.split == b.split
        assert a.image.tobytes() == b.image.tobytes()
