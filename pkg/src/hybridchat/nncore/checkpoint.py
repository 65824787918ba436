"""Versioned binary checkpoints for model parameters and optimizer state.

The format is deliberately plain (struct-packed, little-endian, fixed
field order) so that save -> load -> save reproduces the file byte for
byte.  Layout:

    magic "HYCHCKP1" | u32 version | str kind | str vocab_hash |
    str config_json | u32 n_params |
    n_params * (str name | u8 dtype | u32 ndim | u64 dims... | raw bytes) |
    u8 has_opt [| u64 t | f64 lr beta1 beta2 eps | per-param m,v arrays]

Strings are u32 length + UTF-8 bytes; arrays are C-order raw bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

MAGIC = b"HYCHCKP1"
VERSION = 1

_DTYPES = {0: np.float64, 1: np.float32}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_array(fh) -> np.ndarray:
    (code,) = struct.unpack("<B", fh.read(1))
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
    dtype = np.dtype(_DTYPES[code])
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).copy()


def save_checkpoint(
    path: str,
    kind: str,
    vocab_hash: str,
    config: dict,
    params: dict[str, np.ndarray],
    optimizer_state: dict | None = None,
) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, kind)
    _write_str(buf, vocab_hash)
    _write_str(buf, json.dumps(config, sort_keys=True))
    buf.write(struct.pack("<I", len(params)))
    for name in params:
        _write_str(buf, name)
        _write_array(buf, params[name])
    if optimizer_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", optimizer_state["t"]))
        buf.write(struct.pack("<dddd", optimizer_state["lr"], optimizer_state["beta1"],
                              optimizer_state["beta2"], optimizer_state["eps"]))
        for name in params:
            _write_array(buf, optimizer_state["m"][name])
            _write_array(buf, optimizer_state["v"][name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> dict:
    """Returns {kind, vocab_hash, config, params, optimizer_state or None}."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        kind = _read_str(fh)
        vocab_hash = _read_str(fh)
        config = json.loads(_read_str(fh))
        (n_params,) = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            name = _read_str(fh)
            params[name] = _read_array(fh)
        (has_opt,) = struct.unpack("<B", fh.read(1))
        opt = None
        if has_opt:
            (t,) = struct.unpack("<Q", fh.read(8))
            lr, beta1, beta2, eps = struct.unpack("<dddd", fh.read(32))
            m = {}
            v = {}
            for name in params:
                m[name] = _read_array(fh)
                v[name] = _read_array(fh)
            opt = {"t": t, "lr": lr, "beta1": beta1, "beta2": beta2, "eps": eps, "m": m, "v": v}
    return {"kind": kind, "vocab_hash": vocab_hash, "config": config,
            "params": params, "optimizer_state": opt}


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
