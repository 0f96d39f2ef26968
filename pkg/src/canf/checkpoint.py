"""Binary checkpoint archive: magic "CANF", versioned entry table, LE payload.

Layout (all integers little-endian):
    magic       4 bytes  b"CANF"
    version     u32
    config_len  u32, then config snapshot text (utf-8)
    n_entries   u32
    entries     per parameter: u16 name_len + name, u8 dtype code,
                u8 ndim + ndim*u32 shape, u64 payload offset, u64 nbytes
    payload     raw little-endian scalars
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import ShapeError

MAGIC = b"CANF"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


def save_checkpoint(path, model, config_text: str = ""):
    """Write every named parameter once; bit-exact on reload."""
    entries = []
    payload = bytearray()
    names = set()
    for name, tensor in model.named_parameters():
        if name in names:
            raise CheckpointIntegrityError(f"duplicate parameter name '{name}'")
        names.add(name)
        arr = np.ascontiguousarray(tensor.data)
        code = _CODES[arr.dtype]
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append((name, code, arr.shape, len(payload), len(raw)))
        payload.extend(raw)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(entries)))
        for name, code, shape, offset, nbytes in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(struct.pack("<QQ", offset, nbytes))
        fh.write(payload)


def read_checkpoint(path):
    """Parse an archive: (config_text, {name: ndarray})."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointIntegrityError(f"truncated archive while reading {what}")
        piece = blob[pos : pos + n]
        pos += n
        return piece

    pos = 0
    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"bad magic; not a {MAGIC.decode()} archive")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported archive version {version} (expected {VERSION})")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config_text = take(cfg_len, "config snapshot").decode("utf-8")
    (n_entries,) = struct.unpack("<I", take(4, "entry count"))

    table = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2, "entry name length"))
        name = take(name_len, "entry name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "entry dtype/ndim"))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"entry '{name}' has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "entry shape"))
        offset, nbytes = struct.unpack("<QQ", take(16, "entry offsets"))
        table.append((name, code, shape, offset, nbytes))

    payload = blob[pos:]
    params = {}
    claimed = []
    for name, code, shape, offset, nbytes in table:
        if name in params:
            raise CheckpointIntegrityError(f"entry '{name}' appears twice")
        if offset + nbytes > len(payload):
            raise CheckpointIntegrityError(f"entry '{name}' points past the payload")
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[code]).itemsize
        if nbytes != expected:
            raise CheckpointIntegrityError(f"entry '{name}' byte count {nbytes} != shape implies {expected}")
        claimed.append((offset, offset + nbytes, name))
        arr = np.frombuffer(payload, dtype=_DTYPES[code], count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        params[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    claimed.sort()
    for (a0, a1, na), (b0, _, nb) in zip(claimed, claimed[1:]):
        if b0 < a1:
            raise CheckpointIntegrityError(f"entries '{na}' and '{nb}' overlap in the payload")
    return config_text, params


def load_into_model(path, model) -> str:
    """Restore parameters in place; returns the stored config snapshot."""
    config_text, params = read_checkpoint(path)
    model_params = dict(model.named_parameters())
    missing = sorted(set(model_params) - set(params))
    if missing:
        raise CheckpointIntegrityError(f"archive is missing parameters: {missing[:5]}")
    for name, tensor in model_params.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise ShapeError(f"entry '{name}' has shape {arr.shape}, model expects {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=False)
    return config_text
