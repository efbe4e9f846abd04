"""Self-describing checkpoint container.

Layout::

    b"CBLMCKPT"             8-byte magic
    header length           little-endian uint64
    header                  UTF-8 JSON: format version, model config, concept
                            registry, normalization stats, extra metadata and a
                            tensor directory (name, shape, offset, nbytes)
    payload                 raw little-endian float32 tensors, back to back
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .concepts import ConceptRegistry, NormalizationStats
from .errors import CorruptCheckpoint
from .model import CbModel, ModelConfig

MAGIC = b"CBLMCKPT"
FORMAT_VERSION = 1


def _encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(model: CbModel, path, stats: NormalizationStats | None = None,
                    registry: ConceptRegistry | None = None, extra: dict | None = None) -> None:
    stats = stats if stats is not None else getattr(model, "norm_stats", None)
    registry = registry if registry is not None else getattr(model, "registry", None)
    extra = dict(getattr(model, "extra", {}) or {}, **(extra or {}))
    directory = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        blob = arr.tobytes(order="C")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "registry": registry.to_dict() if registry is not None else None,
        "stats": stats.to_dict() if stats is not None else None,
        "extra": extra,
        "tensors": directory,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = _encode_header(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def read_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{path}: format version {version!r} is not supported (expected {FORMAT_VERSION})")
    payload = data[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpoint(f"{path}: payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch")
    return header, payload


def load_checkpoint(path) -> CbModel:
    header, payload = read_header(path)
    model = CbModel(ModelConfig(**header["config"]))
    state = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CorruptCheckpoint(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    expected = set(model.state_dict())
    if set(state) != expected:
        raise CorruptCheckpoint(f"{path}: tensor directory does not match the model ({sorted(expected ^ set(state))})")
    model.load_state_dict(state)
    model.registry = ConceptRegistry.from_dict(header["registry"]) if header["registry"] else None
    model.norm_stats = NormalizationStats.from_dict(header["stats"]) if header["stats"] else None
    model.extra = header["extra"]
    model.eval()
    return model
