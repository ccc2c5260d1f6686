"""Named-tensor container tests: bitwise round-trips, deterministic file
bytes, and malformed-file rejection."""

import struct

import numpy as np
import pytest

from stereoseld.checkpoint import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    load_tensors,
    save_tensors,
)
from stereoseld.errors import InputError


class TestRoundTrip:
    def test_bitwise_float32(self, tmp_path, rng):
        tensors = {
            "w": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(7).astype(np.float32),
            "scalarish": np.float32(2.5).reshape(()),
            "deep.nested.name": rng.standard_normal((2, 3, 4, 5)).astype(np.float32),
        }
        path = str(tmp_path / "model.ckpt")
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert set(loaded) == set(tensors)
        for name, array in tensors.items():
            assert loaded[name].dtype == np.float32
            assert loaded[name].shape == array.shape
            np.testing.assert_array_equal(loaded[name], array)

    def test_float64_input_is_cast(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_tensors(path, {"x": np.array([0.1, 0.2])})
        out = load_tensors(path)["x"]
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, np.array([0.1, 0.2], dtype=np.float32))

    def test_empty_dict(self, tmp_path):
        path = str(tmp_path / "empty.ckpt")
        save_tensors(path, {})
        assert load_tensors(path) == {}

    def test_zero_length_tensor(self, tmp_path):
        path = str(tmp_path / "zl.ckpt")
        save_tensors(path, {"empty": np.zeros((0, 4), dtype=np.float32)})
        assert load_tensors(path)["empty"].shape == (0, 4)

    def test_file_bytes_deterministic(self, tmp_path, rng):
        tensors = {"b": rng.standard_normal(3).astype(np.float32),
                   "a": rng.standard_normal(3).astype(np.float32)}
        p1, p2 = str(tmp_path / "one.ckpt"), str(tmp_path / "two.ckpt")
        save_tensors(p1, dict(tensors))
        save_tensors(p2, dict(reversed(tensors.items())))  # insertion order differs
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_non_contiguous_input(self, tmp_path, rng):
        strided = rng.standard_normal((6, 6)).astype(np.float32)[::2, ::3]
        path = str(tmp_path / "s.ckpt")
        save_tensors(path, {"v": strided})
        np.testing.assert_array_equal(load_tensors(path)["v"], strided)


class TestMalformedFiles:
    def _valid_bytes(self, tmp_path, rng):
        path = str(tmp_path / "ok.ckpt")
        save_tensors(path, {"w": rng.standard_normal((2, 3)).astype(np.float32)})
        return open(path, "rb").read()

    def test_bad_magic(self, tmp_path, rng):
        data = self._valid_bytes(tmp_path, rng)
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"WRONGMAG" + data[8:])
        with pytest.raises(InputError):
            load_tensors(str(path))

    def test_bad_version(self, tmp_path, rng):
        data = self._valid_bytes(tmp_path, rng)
        path = tmp_path / "bad.ckpt"
        path.write_bytes(
            CHECKPOINT_MAGIC
            + struct.pack("<II", CHECKPOINT_VERSION + 9, 1)
            + data[16:]
        )
        with pytest.raises(InputError):
            load_tensors(str(path))

    @pytest.mark.parametrize("cut", [4, 12, 17, -5, -1])
    def test_truncations(self, tmp_path, rng, cut):
        data = self._valid_bytes(tmp_path, rng)
        path = tmp_path / "cut.ckpt"
        path.write_bytes(data[:cut])
        with pytest.raises(InputError):
            load_tensors(str(path))

    def test_trailing_garbage_rejected(self, tmp_path, rng):
        data = self._valid_bytes(tmp_path, rng)
        path = tmp_path / "extra.ckpt"
        path.write_bytes(data + b"\x00\x01\x02")
        with pytest.raises(InputError):
            load_tensors(str(path))
