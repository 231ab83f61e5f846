"""Dataset ingestion and the on-disk formats.

Pixels are float32 in [0, 1] from the moment they are read. Supported inputs:

* CIFAR-10 binary batches (``data_batch_{1..5}.bin``, ``test_batch.bin``);
* IDX files (MNIST layout, big-endian header). ubyte payloads are scaled by
  1/255, float32 payloads are taken verbatim, which is how transformed
  datasets are written back out without quantization;
* PPM (P6) / PGM (P5) single images with maxval 255.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_BATCH = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {(v.kind, v.itemsize): k for k, v in IDX_TYPES.items()}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images (N, C, H, W) float32 in [0, 1] and integer labels."""

    split: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    source: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: Optional[int]) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.split, self.images[:n], self.labels[:n], self.num_classes, self.mean, self.std, self.source)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(self.split, images, self.labels, self.num_classes, self.mean, self.std, self.source)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std, accumulated in float64."""
    x = images.astype(np.float64, copy=False)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def write_stats(path, mean, std, source: str = "") -> None:
    Path(path).write_text(json.dumps({"mean": [float(m) for m in mean], "std": [float(s) for s in std], "source": source}, indent=2) + "\n")


def read_stats(path) -> tuple[np.ndarray, np.ndarray]:
    d = json.loads(Path(path).read_text())
    return np.asarray(d["mean"], np.float32), np.asarray(d["std"], np.float32)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise DataFormatError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != CIFAR_RECORD * CIFAR_PER_BATCH:
        raise DataFormatError(f"{path}: {raw.size} bytes, expected {CIFAR_RECORD * CIFAR_PER_BATCH}")
    rec = raw.reshape(CIFAR_PER_BATCH, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, split: str = "train") -> Dataset:
    directory = Path(directory)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [_read_cifar_file(directory / f) for f in files]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / np.float32(255)
    labels = np.concatenate([p[1] for p in parts])
    ds = Dataset(split, images, labels, 10, source=str(directory))
    mean, std = load_cifar10_stats(directory) if split == "test" else channel_stats(images)
    ds.mean, ds.std = mean, std
    return ds


def load_cifar10_stats(directory) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    sidecar = directory / "stats.json"
    if sidecar.exists():
        return read_stats(sidecar)
    imgs = np.concatenate([_read_cifar_file(directory / f)[0] for f in CIFAR_TRAIN_FILES])
    return channel_stats(imgs.astype(np.float32) / np.float32(255))


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    path = Path(path)
    with _open(path) as f:
        head = f.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0 or head[2] not in IDX_TYPES:
            raise DataFormatError(f"{path}: bad IDX magic {head.hex()}")
        dtype, ndim = IDX_TYPES[head[2]], head[3]
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        payload = f.read()
    count = int(np.prod(dims)) if dims else 1
    if len(payload) != count * dtype.itemsize:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, header implies {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=False).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = IDX_CODES.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX type code")
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, arr.ndim]))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, split: str = "train", num_classes: Optional[int] = None) -> Dataset:
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: labels must be 1-D, got {labels.shape}")
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    elif imgs.ndim != 4:
        raise DataFormatError(f"{images_path}: expected 3 or 4 dims, got {imgs.ndim}")
    if len(imgs) != len(labels):
        raise DataFormatError(f"{images_path} has {len(imgs)} images but {labels_path} has {len(labels)} labels")
    if imgs.dtype.kind == "u":
        x = imgs.astype(np.float32) / np.float32(255)
    elif imgs.dtype.kind == "f":
        x = imgs.astype(np.float32)
        if x.size and (x.min() < 0 or x.max() > 1):
            raise DataFormatError(f"{images_path}: float pixels outside [0, 1]")
    else:
        raise DataFormatError(f"{images_path}: unsupported pixel type {imgs.dtype}")
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else max(10, int(labels.max()) + 1 if len(labels) else 10)
    return Dataset(split, x, labels, k, source=str(images_path))


# dataset directories

MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Optional[Path]:
    for cand in (directory / stem, directory / (stem + ".gz")):
        if cand.exists():
            return cand
    return None


def save_dataset(ds: Dataset, directory) -> None:
    """Write ``ds`` as ``{split}-images.idx`` (float32) + ``{split}-labels.idx``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_idx(directory / f"{ds.split}-images.idx", ds.images.astype(np.float32))
    write_idx(directory / f"{ds.split}-labels.idx", ds.labels.astype(np.uint8 if ds.num_classes <= 256 else np.int32))
    meta = {"num_classes": ds.num_classes}
    if ds.mean is not None:
        meta.update(mean=[float(v) for v in ds.mean], std=[float(v) for v in ds.std])
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def open_dataset(directory, split: str) -> Dataset:
    """Load ``split`` from a CIFAR-10 directory, an MNIST-style IDX directory
    or a directory written by :func:`save_dataset`."""
    d = Path(directory)
    if not d.is_dir():
        raise DataFormatError(f"dataset directory {d} does not exist")
    if (d / CIFAR_TRAIN_FILES[0]).exists() or (d / CIFAR_TEST_FILES[0]).exists():
        return load_cifar10(d, split)
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    own = (_find(d, f"{split}-images.idx"), _find(d, f"{split}-labels.idx"))
    if own[0] and own[1]:
        ds = load_idx(*own, split=split, num_classes=meta.get("num_classes"))
    elif split in MNIST_NAMES and _find(d, MNIST_NAMES[split][0]):
        ds = load_idx(_find(d, MNIST_NAMES[split][0]), _find(d, MNIST_NAMES[split][1]), split=split,
                      num_classes=meta.get("num_classes"))
    else:
        raise DataFormatError(f"{d}: no {split} split found (expected CIFAR-10 batches or IDX files)")
    if "mean" in meta:
        ds.mean, ds.std = np.asarray(meta["mean"], np.float32), np.asarray(meta["std"], np.float32)
    elif (d / "stats.json").exists():
        ds.mean, ds.std = read_stats(d / "stats.json")
    elif split == "train":
        ds.mean, ds.std = channel_stats(ds.images)
    else:
        try:
            train = open_dataset(d, "train")
            ds.mean, ds.std = train.mean, train.std
        except DataFormatError:
            ds.mean, ds.std = channel_stats(ds.images)
    return ds


# PPM / PGM


def export_ppm(x: np.ndarray, path) -> None:
    """Write a (C, H, W) [0, 1] image as binary PGM (C=1) or PPM (C=3), 8-bit."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise DataFormatError(f"export_ppm needs (1|3, H, W), got {x.shape}")
    c, h, w = x.shape
    q = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(q.transpose(1, 2, 0).tobytes())


def _tokens(buf: bytes, pos: int, n: int) -> tuple[list[bytes], int]:
    out = []
    while len(out) < n:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos + 1


def import_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 0, 4)
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise DataFormatError(f"{path}: malformed header") from e
    if maxval != 255:
        raise DataFormatError(f"{path}: maxval {maxval}, only 255 is supported")
    c = 1 if magic == b"P5" else 3
    payload = buf[pos:]
    if len(payload) != w * h * c:
        raise DataFormatError(f"{path}: payload {len(payload)} bytes, expected {w * h * c}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255)


def ppm_header_length(path) -> int:
    buf = Path(path).read_bytes()
    _, pos = _tokens(buf, 0, 4)
    return pos
