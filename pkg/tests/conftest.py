import numpy as np
import pytest

from lmobilenet.dataio import CIFAR10_RECORD, CIFAR100_RECORD, encode_cifar_records


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_cifar10(root, n_per_batch=40, seed=0, classes=10):
    """Synthetic batches in the official CIFAR-10 binary layout."""
    rng = np.random.default_rng(seed)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    blobs = {}
    for name in names:
        labels = rng.integers(0, classes, n_per_batch)
        pixels = rng.integers(0, 256, (n_per_batch, 3, 32, 32), dtype=np.uint8)
        blob = encode_cifar_records(pixels, labels)
        assert len(blob) == n_per_batch * CIFAR10_RECORD
        (root / name).write_bytes(blob)
        blobs[name] = (pixels, labels, blob)
    return blobs


def write_cifar100(root, n=50, seed=0):
    rng = np.random.default_rng(seed)
    blobs = {}
    for name in ("train.bin", "test.bin"):
        fine = rng.integers(0, 100, n)
        coarse = rng.integers(0, 20, n)
        pixels = rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
        blob = encode_cifar_records(pixels, fine, coarse)
        assert len(blob) == n * CIFAR100_RECORD
        (root / name).write_bytes(blob)
        blobs[name] = (pixels, fine, coarse, blob)
    return blobs
