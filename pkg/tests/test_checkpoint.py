import struct

import numpy as np
import pytest
import torch

from idp import checkpoint
from idp.checkpoint import CheckpointError, dumps, loads


def test_round_trip_mixed_dtypes(rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b": torch.arange(5, dtype=torch.float32), "c": np.zeros((0, 2))}
    back, meta = loads(dumps(tensors, {"kind": "x", "n": 3}))
    np.testing.assert_array_equal(back["a"], tensors["a"])
    assert back["b"].dtype == np.float32 and back["b"].tolist() == [0, 1, 2, 3, 4]
    assert back["c"].shape == (0, 2)
    assert meta == {"kind": "x", "n": 3}


def test_bytes_are_stable(rng):
    t = {"w": rng.normal(size=(2, 2))}
    assert dumps(t, {"k": 1}) == dumps(dict(t), {"k": 1})


def test_layout():
    data = dumps({"x": np.array([1.5])})
    assert data[:8] == b"IDPCKPT1"
    (hlen,) = struct.unpack("<Q", data[8:16])
    assert data[16 + hlen:] == struct.pack("<d", 1.5)


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"NOTACKPT" + bytes(16))


def test_bad_version():
    data = dumps({"x": np.ones(1)})
    data = data.replace(b'"version":1', b'"version":9')
    with pytest.raises(CheckpointError, match="version"):
        loads(data)


def test_unknown_dtype():
    data = dumps({"x": np.ones(1)}).replace(b'"f64"', b'"i64"')
    with pytest.raises(CheckpointError, match="dtype"):
        loads(data)


def test_truncated_payload():
    data = dumps({"x": np.ones(10)})
    with pytest.raises(CheckpointError, match="truncated"):
        loads(data[:-3])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        loads(dumps({"x": np.ones(1)}) + b"\0")


def test_integer_arrays_refused():
    with pytest.raises(CheckpointError):
        dumps({"x": np.arange(3)})


def test_file_helpers(tmp_path, rng):
    x = rng.normal(size=4)
    checkpoint.save(tmp_path / "c.ckpt", {"x": x})
    back, _ = checkpoint.load(tmp_path / "c.ckpt")
    np.testing.assert_array_equal(back["x"], x)
