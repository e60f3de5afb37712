"""Self-describing binary checkpoints.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"APCDECKP"
    8       4     uint32 format version
    12      8     uint64 header length H
    20      H     UTF-8 JSON header (sorted keys)
    20+H    8*N   float64 LE parameter blob, tensors back to back
    end-32  32    SHA-256 of every preceding byte

The header carries the architecture descriptor, latent layout, head
descriptions, covariate schema, training config, loss trace, and a tensor
index of ``{"name", "shape", "offset", "size"}`` entries (offsets and sizes in
float64 elements).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .base import AugmentedBase
from .data import XSpec
from .errors import CheckpointError
from .flows import FlowModel

MAGIC = b"APCDECKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: FlowModel
    base: AugmentedBase
    schema: List[XSpec] = field(default_factory=list)
    config: Optional[dict] = None
    loss_trace: List[float] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)

    def tensors(self) -> Dict[str, np.ndarray]:
        return {**{f"flow.{k}": v for k, v in self.model.params().items()},
                **{f"base.{k}": v for k, v in self.base.params().items()}}

    def header(self) -> dict:
        return {
            "architecture": self.model.descriptor(),
            "base": self.base.describe(),
            "schema": [s.to_dict() for s in self.schema],
            "train_config": self.config,
            "loss_trace": list(self.loss_trace),
            "metadata": self.metadata,
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = ckpt.header()
    index, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors().items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header["tensors"] = index
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(text)) + text + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + 32:
        raise CheckpointError("checkpoint truncated: shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"incompatible checkpoint format version {version} (expected {FORMAT_VERSION})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed (checksum mismatch or truncation)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    blob = np.frombuffer(body[start + hlen:], dtype="<f8")
    need = sum(t["size"] for t in header["tensors"])
    if blob.size != need:
        raise CheckpointError(f"checkpoint blob holds {blob.size} values, index expects {need}")
    flow, base = {}, {}
    for t in header["tensors"]:
        arr = blob[t["offset"]:t["offset"] + t["size"]].reshape(t["shape"]).astype(np.float64)
        group, name = t["name"].split(".", 1)
        (flow if group == "flow" else base)[name] = arr
    model = FlowModel.from_descriptor(header["architecture"], flow)
    augmented = AugmentedBase.from_description(header["base"], base)
    schema = [XSpec(**s) for s in header["schema"]]
    return Checkpoint(model, augmented, schema, header["train_config"],
                      header["loss_trace"], header["metadata"])


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data)
