import struct

import numpy as np
import pytest

from esbm.checkpoint import MAGIC, CheckpointError, load_tensors, save_tensors


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "enc.w": rng.normal(size=(4, 3)),
        "enc.b": rng.normal(size=(3,)),
        "scalar": np.array(1.25),
    }
    path = tmp_path / "ck.bin"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].shape == np.asarray(tensors[k]).shape
        assert np.array_equal(loaded[k], tensors[k])


def test_header_layout(tmp_path):
    path = tmp_path / "ck.bin"
    save_tensors(path, {"x": np.zeros((2, 2))})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack_from("<II", raw, 4)
    assert (version, count) == (1, 1)


def test_byte_stable_regardless_of_insertion_order(tmp_path):
    a = {"b": np.arange(3.0), "a": np.ones((2, 1))}
    b = {"a": np.ones((2, 1)), "b": np.arange(3.0)}
    pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(pa, a)
    save_tensors(pb, b)
    assert pa.read_bytes() == pb.read_bytes()


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(path)
    good = tmp_path / "good.bin"
    save_tensors(good, {"x": np.zeros(5)})
    clipped = tmp_path / "clipped.bin"
    clipped.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_tensors(clipped)
