"""CIFAR-10/100 binary readers, dataset normalization and checkpoints.

CIFAR-10 records are 3073 bytes (label, 1024 R, 1024 G, 1024 B); CIFAR-100
records are 3074 bytes (coarse label, fine label, pixels).

Checkpoint layout (little endian)::

    b"LMNC" | u32 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 dtype code | u8 ndim |
                u32 dims... | u64 payload offset | u64 payload bytes
    payload: raw tensor bytes, offsets relative to the payload start
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, NumericError, StateError

PIXELS = 3 * 32 * 32
CIFAR10_RECORD = 1 + PIXELS
CIFAR100_RECORD = 2 + PIXELS
CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]

MAGIC = b"LMNC"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, 32, 32)
    labels: np.ndarray  # (n,) int64
    class_count: int
    split: str = "train"
    mean: np.ndarray | None = None  # normalization stats, when applied
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset_per_class(self, k: int, classes=None) -> "Dataset":
        """First ``k`` images of each class (optionally of selected classes,
        relabelled 0..len(classes)-1 in the given order)."""
        keep = list(range(self.class_count)) if classes is None else list(classes)
        idx = np.concatenate([np.flatnonzero(self.labels == c)[:k] for c in keep])
        idx.sort()
        remap = np.full(self.class_count, -1)
        remap[keep] = np.arange(len(keep))
        count = self.class_count if classes is None else len(keep)
        labels = self.labels[idx] if classes is None else remap[self.labels[idx]]
        return replace(self, images=self.images[idx], labels=labels, class_count=count)


def _read_batch(path: Path, record: int, label_offset: int, max_label: int):
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % record:
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a whole number of {record}-byte records "
            f"(a full batch of 10000 records is {10000 * record} bytes)"
        )
    rec = np.frombuffer(raw, np.uint8).reshape(-1, record)
    labels = rec[:, label_offset].astype(np.int64)
    if labels.max() > max_label:
        raise DataError(f"{path}: label {labels.max()} > {max_label}")
    pixels = rec[:, record - PIXELS :].reshape(-1, 3, 32, 32)
    return pixels, labels


def _find_dir(root: Path, names: list[str], subdirs: tuple[str, ...]) -> Path:
    for cand in (root, *(root / s for s in subdirs)):
        if all((cand / n).is_file() for n in names):
            return cand
    raise FileNotFoundError(f"{root}: CIFAR binaries {names} not found")


def _load(root, train_names, test_names, record, label_offset, classes, subdirs):
    root = Path(root)
    base = _find_dir(root, train_names + test_names, subdirs)
    out = []
    for split, names in (("train", train_names), ("test", test_names)):
        parts = [_read_batch(base / n, record, label_offset, classes - 1) for n in names]
        pixels = np.concatenate([p for p, _ in parts])
        labels = np.concatenate([lab for _, lab in parts])
        out.append(Dataset(pixels.astype(np.float32) / 255.0, labels, classes, split))
    return out[0], out[1]


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch; pixels in [0, 1]."""
    return _load(directory, CIFAR10_TRAIN, CIFAR10_TEST, CIFAR10_RECORD, 0, 10, ("cifar-10-batches-bin",))


def load_cifar100(directory) -> tuple[Dataset, Dataset]:
    """Read train.bin/test.bin, keeping the fine label (100 classes)."""
    return _load(directory, CIFAR100_TRAIN, CIFAR100_TEST, CIFAR100_RECORD, 1, 100, ("cifar-100-binary",))


def encode_cifar_records(pixels: np.ndarray, labels: np.ndarray, coarse: np.ndarray | None = None) -> bytes:
    """Inverse of the batch reader: uint8 pixels (n, 3, 32, 32) back to bytes."""
    n = len(labels)
    head = [labels.astype(np.uint8).reshape(n, 1)]
    if coarse is not None:
        head.insert(0, coarse.astype(np.uint8).reshape(n, 1))
    return np.concatenate(head + [pixels.astype(np.uint8).reshape(n, PIXELS)], axis=1).tobytes()


def normalize_dataset(ds: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Standardize per channel.  Without ``stats`` they are computed from
    ``ds`` itself; pass the training stats when normalizing a test split."""
    if stats is None:
        x = ds.images.astype(np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
    else:
        mean, std = (np.asarray(s, np.float64) for s in stats)
    if np.any(std <= 0):
        raise NumericError(f"zero standard deviation in channel(s) {np.flatnonzero(std <= 0).tolist()}")
    images = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=images.astype(ds.images.dtype), mean=mean, std=std)


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    return images * np.asarray(std)[None, :, None, None] + np.asarray(mean)[None, :, None, None]


# -- checkpoints -------------------------------------------------------------


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    table, payload, offset = [], [], 0
    for name, arr in tensors.items():
        dt = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dt).tobytes()
        raw = name.encode()
        table.append(
            struct.pack("<H", len(raw)) + raw
            + struct.pack("<BB", _CODES[dt], arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + struct.pack("<QQ", offset, len(data))
        )
        payload.append(data)
        offset += len(data)
    return MAGIC + struct.pack("<II", VERSION, len(tensors)) + b"".join(table) + b"".join(payload)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos, entries = 12, []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            code, ndim = struct.unpack_from("<BB", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 2)
            offset, nbytes = struct.unpack_from("<QQ", blob, pos + 2 + 4 * ndim)
            pos += 2 + 4 * ndim + 16
            entries.append((name, _DTYPES[code], shape, offset, nbytes))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint table: {exc}") from None
    out, end = {}, 0
    for name, dt, shape, offset, nbytes in entries:
        if offset != end or nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{name}: payload entry inconsistent with its declared shape")
        end = offset + nbytes
        if pos + end > len(blob):
            raise FormatError(f"{name}: payload truncated")
        out[name] = np.frombuffer(blob, dt, count=nbytes // dt.itemsize, offset=pos + offset).reshape(shape).copy()
    if pos + end != len(blob):
        raise FormatError(f"{len(blob) - pos - end} trailing bytes after payload")
    return out


CONFIG_KEY = "__config__"
NORM_MEAN_KEY = "__norm_mean__"
NORM_STD_KEY = "__norm_std__"


def save_checkpoint(graph, path, extra: dict[str, np.ndarray] | None = None) -> int:
    """Write all parameters (running stats included) plus the architecture
    config; returns the file size in bytes."""
    from .config import dump_config

    if not graph.initialized:
        raise StateError("cannot checkpoint an uninitialized graph")
    tensors = dict(graph.params)
    if graph.config is not None:
        tensors[CONFIG_KEY] = np.frombuffer(dump_config(graph.config).encode(), np.uint8)
    tensors.update(extra or {})
    blob = encode_tensors(tensors)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return len(blob)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def load_checkpoint(path, graph) -> dict[str, np.ndarray]:
    """Load parameters into ``graph``; returns the non-parameter entries."""
    tensors = read_checkpoint(path)
    params = {}
    for key, shape in graph.slots.items():
        if key not in tensors:
            raise FormatError(f"checkpoint lacks tensor {key}")
        if tensors[key].shape != tuple(shape):
            raise FormatError(f"tensor {key}: checkpoint shape {tensors[key].shape} != graph shape {tuple(shape)}")
        params[key] = tensors.pop(key)
    dtypes = {a.dtype for a in params.values()}
    if len(dtypes) > 1:
        raise FormatError(f"mixed parameter dtypes {dtypes}")
    unknown = [k for k in tensors if not k.startswith("__")]
    if unknown:
        raise FormatError(f"checkpoint has tensors the graph lacks, e.g. {unknown[0]}")
    graph.params = params
    return tensors


def checkpoint_size(graph, dtype=np.float32) -> int:
    """Bytes a checkpoint of ``graph`` occupies (parameters only)."""
    header = 12 + sum(2 + len(k.encode()) + 2 + 4 * len(s) + 16 for k, s in graph.slots.items())
    return header + sum(int(np.prod(s)) * np.dtype(dtype).itemsize for s in graph.slots.values())
