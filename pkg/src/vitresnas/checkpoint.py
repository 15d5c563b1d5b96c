"""Binary checkpoint container.

Layout: magic ``b"VRNS"``, u32 version, u64 header length, UTF-8 JSON
header, then raw little-endian tensor data.  The header's ``tensors`` table
lists name, dtype, shape, offset and byte length for every tensor; everything
else in the header (architecture, optimizer step, rng state, epoch) is free
form JSON.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VRNS"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedCheckpointError(FormatError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        """Tensors whose names start with ``prefix/``, with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def save_checkpoint(path: str | Path, header: dict, tensors: dict) -> Path:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    hdr = dict(header)
    hdr["tensors"] = table
    hbytes = json.dumps(hdr, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return path


def read_header(path: str | Path) -> dict:
    return _parse(Path(path).read_bytes(), tensors=False).header


def load_checkpoint(path: str | Path) -> Checkpoint:
    return _parse(Path(path).read_bytes(), tensors=True)


def _parse(raw: bytes, tensors: bool) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError("not a checkpoint file (bad magic)")
        raise TruncatedCheckpointError(f"file is {len(raw)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise TruncatedCheckpointError("header is truncated")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header: {e}") from e
    ckpt = Checkpoint(header)
    if not tensors:
        return ckpt
    base = start + hlen
    for entry in header.get("tensors", []):
        lo = base + int(entry["offset"])
        hi = lo + int(entry["nbytes"])
        if hi > len(raw):
            raise TruncatedCheckpointError(f"tensor {entry['name']!r} is truncated ({len(raw) - lo} of {entry['nbytes']} bytes)")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        ckpt.tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return ckpt
