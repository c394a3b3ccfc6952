"""Self-describing parameter container.

Layout (little endian): ``"MADC" | u32 version | u32 len | header JSON |
raw float32 payloads``. The header carries the config blob plus a manifest
of (name, shape) in payload order, so files round-trip byte-identically for
identical parameters.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"MADC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Tensor], config: dict) -> None:
    names = sorted(params)
    manifest = [{"name": n, "shape": list(params[n].data.shape)} for n in names]
    header = json.dumps({"config": config, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path, requires_grad: bool = False):
    """Returns (params dict, config dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError("not a parameter container (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if 12 + hlen > len(raw):
        raise CheckpointError("truncated header")
    head = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    params: dict[str, Tensor] = {}
    off = 12 + hlen
    for entry in head["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise CheckpointError(f"truncated payload at {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        params[entry["name"]] = Tensor(np.ascontiguousarray(arr),
                                       requires_grad=requires_grad)
        off += nbytes
    return params, head["config"]
