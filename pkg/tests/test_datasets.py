import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmapguard.datasets import (bundled_digits_dir, load_dataset, read_idx, read_raw, write_idx, write_raw)
from fmapguard.errors import FormatError


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(0, 5), st.integers(1, 4), st.integers(1, 4))))
def test_idx_images_roundtrip(tmp_path_factory, a):
    d = tmp_path_factory.mktemp("idx")
    for name in ("x.idx", "x.idx.gz"):
        write_idx(d / name, a)
        assert np.array_equal(read_idx(d / name), a)


def test_idx_labels_and_hand_built_header(tmp_path):
    labels = np.array([3, 1, 4, 1, 5], np.uint8)
    write_idx(tmp_path / "l", labels)
    assert np.array_equal(read_idx(tmp_path / "l"), labels)
    # hand-assembled file, independent of the writer
    raw = struct.pack(">IIII", 0x803, 2, 2, 3) + bytes(range(12))
    (tmp_path / "h").write_bytes(raw)
    assert np.array_equal(read_idx(tmp_path / "h"), np.arange(12, dtype=np.uint8).reshape(2, 2, 3))
    with gzip.open(tmp_path / "h.gz", "wb") as fh:
        fh.write(raw)
    assert np.array_equal(read_idx(tmp_path / "h.gz"), read_idx(tmp_path / "h"))


def test_gzip_output_is_deterministic(tmp_path):
    a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.gz", a)
    write_idx(tmp_path / "b.gz", a)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


def test_idx_errors_carry_offsets(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">II", 0x1234, 1))
    with pytest.raises(FormatError, match="offset 0"):
        read_idx(p)
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5))
    with pytest.raises(FormatError, match="offset 21"):
        read_idx(p)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        read_idx(p)
    with pytest.raises(FormatError):
        read_idx(tmp_path / "missing")
    with pytest.raises(ValueError):
        write_idx(tmp_path / "x", np.zeros((2, 2), np.uint8))


def test_raw_roundtrip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    y = np.array([0, 1, 2, 1])
    write_raw(tmp_path / "r", x, y)
    xb, yb = read_raw(tmp_path / "r")
    assert np.array_equal(xb, x) and np.array_equal(yb, y)
    data = (tmp_path / "r").read_bytes()
    (tmp_path / "t").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        read_raw(tmp_path / "t")
    (tmp_path / "m").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="offset 0"):
        read_raw(tmp_path / "m")


def test_load_dataset_directory(tmp_path):
    rng = np.random.default_rng(1)
    for split, n in (("train", 6), ("test", 3)):
        write_raw(tmp_path / f"{split}.fgds", rng.random((n, 1, 4, 4)), rng.integers(0, 3, n))
    ds = load_dataset(tmp_path)
    assert ds.train_images.shape == (6, 1, 4, 4) and ds.test_labels.shape == (3,)
    (tmp_path / "test.fgds").unlink()
    with pytest.raises(FormatError, match="test"):
        load_dataset(tmp_path)
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "nope")


def test_idx_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((3, 2, 2), np.uint8))
    write_idx(tmp_path / "train-labels-idx1-ubyte", np.zeros(2, np.uint8))
    write_idx(tmp_path / "test-images-idx3-ubyte", np.zeros((1, 2, 2), np.uint8))
    write_idx(tmp_path / "test-labels-idx1-ubyte", np.zeros(1, np.uint8))
    with pytest.raises(FormatError, match="3 images but 2 labels"):
        load_dataset(tmp_path)


def test_bundled_digits():
    ds = load_dataset()
    assert bundled_digits_dir().is_dir()
    assert ds.input_shape == (1, 8, 8)
    assert len(ds.train_labels) + len(ds.test_labels) == 1797
    assert ds.train_images.dtype == np.float32
    assert 0.0 <= ds.train_images.min() and ds.train_images.max() <= 1.0
    assert set(np.unique(ds.test_labels)) == set(range(10))
