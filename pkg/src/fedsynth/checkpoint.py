"""Binary container for ParameterSets.

Layout::

    8 bytes   magic  b"FSYNCKPT"
    4 bytes   header length H (uint32, little-endian)
    H bytes   UTF-8 JSON header
    ...       payload: raw little-endian float32 values, entries back to back

The header holds ``format_version``, free-form ``metadata`` and, for every
named ParameterSet, its ordered entries as ``{name, shape, offset, count}``
(offset/count in float32 elements, relative to the payload start).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .models import ParameterSet

MAGIC = b"FSYNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(sets: Mapping[str, ParameterSet], metadata: dict | None = None) -> bytes:
    header_sets = {}
    chunks = []
    offset = 0
    for set_name, ps in sets.items():
        entries = []
        for name, arr in ps.items():
            entries.append(
                {"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
            )
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            offset += int(arr.size)
        header_sets[set_name] = entries
    header = {
        "format_version": FORMAT_VERSION,
        "metadata": metadata or {},
        "sets": header_sets,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, ParameterSet], dict]:
    """Inverse of :func:`encode`; returns ``(sets, metadata)``."""
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    payload = np.frombuffer(blob, dtype="<f4", offset=12 + hlen)
    sets = {}
    for set_name, entries in header["sets"].items():
        items = []
        for e in entries:
            start, count = e["offset"], e["count"]
            if start + count > payload.size:
                raise CheckpointError(f"truncated payload in entry {e['name']!r}")
            items.append((e["name"], payload[start : start + count].reshape(e["shape"])))
        sets[set_name] = ParameterSet(items)
    return sets, header["metadata"]


def encode_parameter_set(ps: ParameterSet) -> bytes:
    return encode({"params": ps})


def decode_parameter_set(blob: bytes) -> ParameterSet:
    sets, _ = decode(blob)
    return sets["params"]


def save(path: str | os.PathLike, sets: Mapping[str, ParameterSet], metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(sets, metadata))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> tuple[dict[str, ParameterSet], dict]:
    return decode(Path(path).read_bytes())
