"""Checkpoint format: round trips and corruption handling."""

import json
import struct

import numpy as np
import pytest

from mone.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from mone.errors import FormatError
from mone.model import ModelConfig, ModelParams, NestedSpec


def make_params(seed=0, dtype=np.float32):
    cfg = ModelConfig(
        spec=NestedSpec(model_dim=16, num_experts=4, num_heads=4, num_layers=2),
        image_size=(32, 32),
        patch_size=8,
    )
    return ModelParams.init(cfg, seed=seed, dtype=dtype)


class TestRoundTrip:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_bitwise_round_trip(self, tmp_path, dtype):
        params = make_params(dtype=dtype)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, extra={"step": 7})
        loaded, extra = load_checkpoint(path)
        assert extra == {"step": 7}
        assert loaded.config == params.config
        for (ka, va), (kb, vb) in zip(
            params.named_parameters().items(), loaded.named_parameters().items()
        ):
            assert ka == kb
            np.testing.assert_array_equal(va.data, vb.data)
            assert va.dtype == vb.dtype

    def test_save_is_deterministic(self, tmp_path):
        params = make_params()
        save_checkpoint(tmp_path / "a.ckpt", params)
        save_checkpoint(tmp_path / "b.ckpt", params)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, make_params())
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_missing_version_field(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, make_params())
        blob = path.read_bytes()
        (length,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8 : 8 + length])
        del header["version"]
        new_header = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(MAGIC + struct.pack("<I", len(new_header)) + new_header + blob[8 + length :])
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, make_params())
        blob = path.read_bytes()
        (length,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8 : 8 + length])
        header["version"] = 99
        new_header = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(MAGIC + struct.pack("<I", len(new_header)) + new_header + blob[8 + length :])
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, make_params())
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 100])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)
