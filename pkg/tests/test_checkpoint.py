from __future__ import annotations

import struct

import numpy as np
import pytest

from checkpoint import FORMAT_VERSION, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError


def _tensors() -> dict[str, np.ndarray]:
    return {
        "enc.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
        "enc.bias": np.array([0.5, -1.0], dtype=np.float32),
        "scalar": np.asarray(2.0, dtype=np.float32),
    }


class TestCheckpoint:
    def test_file_round_trip(self, tmp_path):
        path = save_checkpoint(_tensors(), {"kind": "test", "steps": 3}, tmp_path / "m.rsvc")
        ckpt = load_checkpoint(path)
        assert ckpt.meta == {"kind": "test", "steps": 3}
        assert list(ckpt.tensors) == list(_tensors())
        for name, arr in _tensors().items():
            np.testing.assert_array_equal(ckpt.tensors[name], arr)
            assert ckpt.tensors[name].shape == arr.shape

    def test_bad_magic(self):
        data = b"XXXX" + encode_checkpoint(_tensors())[4:]
        with pytest.raises(BadMagicError):
            decode_checkpoint(data)

    def test_version_mismatch(self):
        data = bytearray(encode_checkpoint(_tensors()))
        data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        with pytest.raises(VersionMismatchError) as exc:
            decode_checkpoint(bytes(data))
        assert exc.value.found == FORMAT_VERSION + 1

    def test_truncation_names_the_tensor(self):
        data = encode_checkpoint(_tensors())
        with pytest.raises(TruncatedCheckpointError) as exc:
            decode_checkpoint(data[:-2])
        assert "scalar" in exc.value.where

    @pytest.mark.parametrize("data", [b"", b"RS"])
    def test_file_shorter_than_magic_is_truncated(self, data, tmp_path):
        with pytest.raises(TruncatedCheckpointError) as exc:
            decode_checkpoint(data)
        assert exc.value.where == "magic"
        path = tmp_path / "short.rsvc"
        path.write_bytes(data)
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_refuses_non_finite(self):
        with pytest.raises(CheckpointError, match="enc.bias"):
            encode_checkpoint({"enc.bias": np.array([np.inf])})

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.rsvc")
