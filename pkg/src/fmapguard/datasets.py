"""Dataset codecs.

IDX (the classic digit-dataset format, optionally gzipped):

    offset 0   uint32 BE  magic 0x00000803 (uint8 images, 3 dims) or 0x00000801 (uint8 labels)
    offset 4   uint32 BE  count, then rows and cols for images
    ...        uint8      payload, row-major

Raw-binary fallback (little-endian, for inputs that are not 8-bit images):

    offset 0   4 bytes    b"FGDS"
    offset 4   uint32     count, C, H, W
    offset 20  per sample: uint32 label, then C*H*W float32 values

A dataset directory holds ``{train,test}-images-idx3-ubyte`` and
``{train,test}-labels-idx1-ubyte`` (each optionally ``.gz``), or
``train.fgds`` / ``test.fgds`` in the raw format.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
RAW_MAGIC = b"FGDS"


@dataclass(frozen=True, eq=False)
class Dataset:
    train_images: np.ndarray  # (N, C, H, W) float32 in [0, 1] for IDX sources
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def input_shape(self):
        return self.train_images.shape[1:]


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def read_idx(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(data) - start < need:
        raise FormatError(f"{path}: payload holds {len(data) - start} bytes, header promises {need}",
                          offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    if path.suffix == ".gz":
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
            fh.write(header + array.tobytes())
    else:
        path.write_bytes(header + array.tobytes())


def read_raw(path):
    data = _read_bytes(path)
    if len(data) < 20:
        raise FormatError(f"{path}: truncated raw dataset header", offset=len(data))
    if data[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: bad raw dataset magic {data[:4]!r}", offset=0)
    count, c, h, w = struct.unpack("<4I", data[4:20])
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (c, h, w))])
    if len(data) - 20 < count * rec.itemsize:
        raise FormatError(f"{path}: expected {count} samples", offset=len(data))
    arr = np.frombuffer(data, dtype=rec, count=count, offset=20)
    return np.ascontiguousarray(arr["x"], dtype=np.float32), arr["label"].astype(np.int64)


def write_raw(path, images, labels) -> None:
    images = np.asarray(images, dtype="<f4")
    n, c, h, w = images.shape
    rec = np.dtype([("label", "<u4"), ("x", "<f4", (c, h, w))])
    arr = np.empty(n, dtype=rec)
    arr["label"] = labels
    arr["x"] = images
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<4I", n, c, h, w) + arr.tobytes())


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def _load_split(directory, split):
    raw = directory / f"{split}.fgds"
    if raw.exists():
        return read_raw(raw)
    img = _find(directory, f"{split}-images-idx3-ubyte")
    lab = _find(directory, f"{split}-labels-idx1-ubyte")
    if img is None or lab is None:
        raise FormatError(f"{directory}: no {split} split found (IDX or .fgds)")
    images = read_idx(img)
    labels = read_idx(lab)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError(f"{img}: unexpected IDX dimensions", offset=0)
    if len(images) != len(labels):
        raise FormatError(f"{directory}: {len(images)} images but {len(labels)} labels")
    return (images[:, None].astype(np.float32) / np.float32(255.0)), labels.astype(np.int64)


def load_dataset(directory=None) -> Dataset:
    """Load a dataset directory; ``None`` loads the bundled 8x8 digits."""
    if directory is None:
        directory = bundled_digits_dir()
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"dataset directory {directory} does not exist")
    tx, ty = _load_split(directory, "train")
    vx, vy = _load_split(directory, "test")
    return Dataset(tx, ty, vx, vy)


def bundled_digits_dir() -> Path:
    return Path(str(resources.files("fmapguard") / "data" / "digits"))
