"""Versioned binary checkpoint container.

Layout: magic ``SVCK`` | u32 version | u32 header length | header JSON
(config hash, RNG state, dtype) | per parameter: u16 name length, name
bytes, u8 ndim, u32 dims..., u8 dtype code, raw little-endian values.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .params import ParamStore

_MAGIC = b"SVCK"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(store: ParamStore, path, config_hash: str = "", rng_state=None) -> None:
    header = json.dumps(
        {
            "config_hash": config_hash,
            "rng_state": rng_state,
            "dtype": store.dtype.name,
            "n_params": len(store),
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        for name, t in store.items():
            arr = np.ascontiguousarray(t.data)
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype.newbyteorder('=')]))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (name -> array, header metadata)."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(f.read(hlen).decode())
        arrays: dict[str, np.ndarray] = {}
        for _ in range(meta["n_params"]):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            (code,) = struct.unpack("<B", f.read(1))
            dtype = _CODE_DTYPES[code]
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * dtype.itemsize)
            arrays[name] = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(
                dtype
            ).reshape(shape)
    return arrays, meta
