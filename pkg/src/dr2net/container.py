"""Binary container used by dataset, checkpoint and baseline files.

Layout (all integers little-endian)::

    magic        5 bytes   b"DR2DS" | b"DR2CK" | b"DR2LB" | b"DR2MS"
    version      u16
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (sorted keys); its "arrays"
                 entry lists {"name", "shape"} for each payload array in order
    payload      the arrays, each as contiguous little-endian float32

The JSON is written with sorted keys and no timestamps, so identical inputs
give byte-identical files.
"""
from __future__ import annotations

import json
import struct

import numpy as np

VERSION = 1
_HEADER = struct.Struct("<5sHI")


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta = dict(meta)
    meta["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path, magic: bytes, error_cls=IOError):
    """Return ``(meta, arrays)``; raises ``error_cls`` on any format problem."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise error_cls(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise error_cls(f"{path}: file too short for a header")
    got_magic, version, meta_len = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise error_cls(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise error_cls(f"{path}: unsupported version {version} (this build reads {VERSION})")
    start = _HEADER.size
    if len(raw) < start + meta_len:
        raise error_cls(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise error_cls(f"{path}: corrupt metadata: {exc}") from exc
    offset = start + meta_len
    arrays = {}
    for spec in meta.get("arrays", []):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if len(raw) < offset + nbytes:
            raise error_cls(f"{path}: truncated payload at array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4", count=count,
                                             offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise error_cls(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return meta, arrays
