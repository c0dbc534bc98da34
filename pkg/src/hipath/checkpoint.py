"""Versioned binary checkpoint container.

Layout: ``MAGIC`` | u32 format version | u64 header length | JSON header |
concatenated little-endian float64 tensors (row-major). The header lists
each tensor's name, shape, and byte offset into the data section.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"HIPATHCK"
FORMAT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, torch.Tensor], header: dict[str, Any]) -> None:
    index = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f8", order="C")  # keeps 0-d shapes
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header, format_version=FORMAT_VERSION, tensors=index)
    blob = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen])
    data = memoryview(raw)[start + hlen :]
    tensors = {}
    for ent in header["tensors"]:
        buf = data[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f8").reshape(ent["shape"]).copy()
        tensors[ent["name"]] = torch.from_numpy(arr)
    return tensors, header
