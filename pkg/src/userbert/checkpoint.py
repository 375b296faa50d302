"""Checkpoint files: a version line, one JSON header line, then raw tensors.

Layout::

    userbert-checkpoint v1\\n
    {"config": {...}, "meta": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}, ...],
     "payload_sha256": "..."}\\n
    <little-endian float64 bytes of every tensor, in header order>

Only values are stored (no optimizer state). The bytes depend only on the
config, the metadata and the parameter values, so equal runs give equal files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, ModelParams
from .numkit import ParamGroup
from .pretrain import TrainConfig

MAGIC = "userbert-checkpoint v1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ModelParams
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def params_bytes(params: ModelParams) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(params_bytes(params)[1]).hexdigest()[:16]


def save_checkpoint(path, config: TrainConfig, params: ModelParams, meta: dict | None = None) -> str:
    """Write the checkpoint and return the payload digest (first 16 hex chars)."""
    entries, payload = params_bytes(params)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "meta": meta or {},
        "tensors": entries,
        "payload_sha256": digest,
    }
    blob = (MAGIC + "\n" + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode()
    Path(path).write_bytes(blob + payload)
    return digest[:16]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first].decode(errors="replace") != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC} file")
    try:
        header = json.loads(raw[first + 1 : second])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = raw[second + 1 :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    config = TrainConfig.from_dict(header["config"])
    dims = config.dims()
    groups = {}
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        groups[e["name"]] = ParamGroup(e["name"], arr)
    missing = set(PARAM_NAMES) - set(groups)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    params = ModelParams(dims, {name: groups[name] for name in PARAM_NAMES})
    return Checkpoint(config, params, header.get("meta", {}))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
