"""Binary checkpoint container.

Layout::

    ERPCOND-CKPT
    version 1
    header-bytes <n>
    <n bytes of UTF-8 JSON header>
    <float32 little-endian blocks, in header "tensors" order>

The JSON header carries the architecture, layer specs, tensor names/shapes
and seeds; readers must not depend on anything after the last block.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError, InternalError

MAGIC = b"ERPCOND-CKPT\n"
FORMAT_VERSION = 1


class CheckpointFormatError(InternalError):
    pass


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"version {FORMAT_VERSION}\n".encode())
        fh.write(f"header-bytes {len(blob)}\n".encode())
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)
    try:
        lines = []
        for _ in range(2):
            end = raw.index(b"\n", pos)
            lines.append(raw[pos:end].decode())
            pos = end + 1
        version = int(lines[0].split()[1])
        n = int(lines[1].split()[1])
        header = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header ({exc})") from exc
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    pos += n
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if pos + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated at tensor {entry['name']}")
        tensors[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        )
        pos += nbytes
    return header, tensors
