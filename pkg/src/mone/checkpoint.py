"""Single-file binary checkpoints.

Layout: 4-byte magic ``MONE``, little-endian uint32 header length, UTF-8
JSON header, then raw little-endian tensor payloads concatenated in header
order. The header carries a mandatory format version, the model
configuration, the payload dtype, and the ordered (name, shape) list.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams, params_from_named
from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"MONE"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Write model parameters (and an optional JSON-serializable ``extra``)."""
    named = params.named_parameters()
    dtype = next(iter(named.values())).data.dtype.name
    header = {
        "version": FORMAT_VERSION,
        "dtype": dtype,
        "config": params.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in named.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in named.values():
            f.write(np.ascontiguousarray(v.data, dtype=_DTYPES[dtype]).tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns (params, extra). Raises FormatError on a
    bad magic, missing/unsupported version, or short payloads."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"{path}: not a model checkpoint (bad magic)")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise FormatError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<I", raw_len)
        blob = f.read(header_len)
        if len(blob) != header_len:
            raise FormatError(f"{path}: truncated header")
        try:
            header = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: malformed header JSON") from exc
        version = header.get("version")
        if version is None:
            raise FormatError(f"{path}: header lacks a version field")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        dtype = header.get("dtype")
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {dtype!r}")

        config = ModelConfig.from_dict(header["config"])
        named: dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * np.dtype(_DTYPES[dtype]).itemsize
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"{path}: truncated payload for {entry['name']}")
            arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
            named[entry["name"]] = Tensor(arr.astype(dtype))
    try:
        params = params_from_named(config, named)
    except KeyError as exc:
        raise FormatError(f"{path}: header tensor list incomplete ({exc})") from exc
    return params, header.get("extra", {})
