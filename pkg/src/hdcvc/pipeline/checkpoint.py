"""Checkpoint container.

``b"HDCK" | u32 format version | u32 header length | JSON header | blobs``.
The JSON header (sorted keys) records the network config, its digest,
free-form metadata and, per tensor, name / shape / byte offset.  Blobs are
little-endian float32 in state-dict order, so equal parameters always give
equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np
import torch

from ..nets import HDCVC, NetworkConfig

MAGIC = b"HDCK"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: HDCVC, meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "config_digest": model.cfg.digest(),
        "meta": meta or {},
        "tensors": entries,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    return _HEAD.pack(MAGIC, FORMAT_VERSION, len(hjson)) + hjson + b"".join(blobs)


def save_checkpoint(model: HDCVC, path, meta: dict | None = None) -> None:
    """Atomic write: a failed save never leaves a partial file behind."""
    data = checkpoint_bytes(model, meta)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < _HEAD.size:
        raise CheckpointError("file too short for a checkpoint")
    magic, version, hlen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[_HEAD.size : _HEAD.size + hlen])
    return header, _HEAD.size + hlen


def load_checkpoint(path, expected: NetworkConfig | None = None) -> tuple[HDCVC, dict]:
    """Build the model described by the file and load its parameters.

    Raises CheckpointError when ``expected`` is given and differs from the
    stored config, or when the stored digest / tensor shapes do not match.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    header, base = read_header(data)
    cfg = NetworkConfig.from_dict(header["config"])
    if cfg.digest() != header["config_digest"]:
        raise CheckpointError("config digest does not match the stored config")
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointError(
            f"checkpoint config {cfg.digest()[:12]} does not match expected {expected.digest()[:12]}"
        )
    model = HDCVC(cfg)
    own = model.state_dict()
    names = [e["name"] for e in header["tensors"]]
    if set(names) != set(own):
        missing = sorted(set(own) - set(names))
        extra = sorted(set(names) - set(own))
        raise CheckpointError(f"tensor set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    state = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        if shape != tuple(own[e["name"]].shape):
            raise CheckpointError(f"{e['name']}: stored shape {shape} != model shape {tuple(own[e['name']].shape)}")
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{e['name']}: truncated tensor data")
        state[e["name"]] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]
