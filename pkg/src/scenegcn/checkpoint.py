"""Byte-deterministic checkpoint container.

Layout (little-endian)::

    b"SGCK"  u32 version  u64 header_len  header (UTF-8 JSON, sorted keys)
    then one SGT1 tensor for every name in header["tensors"], in order

Nothing time- or platform-dependent is written, so saving the same state
twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import FormatError, tensor_from_bytes, tensor_to_bytes

MAGIC = b"SGCK"
VERSION = 1


def checkpoint_to_bytes(header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["tensors"] = list(tensors)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    for arr in tensors.values():
        parts.append(tensor_to_bytes(np.asarray(arr, dtype=np.float64)))
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header", len(buf))
    version, n = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 16
    if len(buf) < pos + n:
        raise FormatError("truncated checkpoint header", len(buf))
    try:
        header = json.loads(buf[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", pos) from None
    pos += n
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name in header.get("tensors", []):
        try:
            tensors[name], pos = tensor_from_bytes(buf, pos)
        except FormatError as exc:
            raise FormatError(f"tensor {name!r}: {exc.args[0].rsplit(' (byte', 1)[0]}", exc.offset) from None
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", pos)
    return header, tensors


def save_checkpoint(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(header, tensors))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    try:
        return checkpoint_from_bytes(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.args[0].rsplit(' (byte', 1)[0]}", exc.offset) from None
