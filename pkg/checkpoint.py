"""
Model checkpoint container (version 1, little-endian):

    b"FNRC" | u16 version | u16 flags | u32 header_len | header (JSON)
    | raw tensors in header order | sha256 of everything before it

flags bit 0: optimizer state (TrainState + Adam moments) is present.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import DataError
from fnr_model import FNRParams, ModelConfig
from optimizer import TrainState

logger = logging.getLogger(__name__)

MAGIC = b"FNRC"
VERSION = 1
FLAG_OPTIMIZER = 1
_PREFIX = struct.Struct("<4sHHI")
_DIGEST = 32


@dataclass
class Checkpoint:
    params: FNRParams
    model_config: ModelConfig
    d_in: int
    state: TrainState = None
    metadata: dict = field(default_factory=dict)


def _tensors(params, state):
    tensors = {f"params/{name}": value for name, value in params.as_dict().items()}
    if state is not None:
        tensors.update({f"m/{name}": value for name, value in sorted(state.m.items())})
        tensors.update({f"v/{name}": value for name, value in sorted(state.v.items())})
    return tensors


def save_checkpoint(path, params, model_config, state=None, metadata=None):
    path = Path(path)
    entries, payload, offset = [], [], 0
    for name, value in _tensors(params, state).items():
        data = np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<")).tobytes()
        entries.append({
            "name": name,
            "dtype": np.dtype(value.dtype).newbyteorder("<").str,
            "shape": list(value.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        payload.append(data)
        offset += len(data)

    header = {
        "model_config": model_config.to_dict(),
        "d_in": params.d_in,
        "tensors": entries,
        "train_state": state.scalars() if state is not None else None,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    flags = FLAG_OPTIMIZER if state is not None else 0
    body = _PREFIX.pack(MAGIC, VERSION, flags, len(header_bytes)) + header_bytes + b"".join(payload)

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    logger.debug(f"Checkpoint written: {path} ({len(entries)} tensors)")
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"Checkpoint not found: {path}") from None

    if len(blob) < _PREFIX.size + _DIGEST:
        raise DataError(f"{path}: truncated checkpoint")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    magic, version, flags, header_len = _PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checksum mismatch")

    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: malformed header ({e})") from None

    base = _PREFIX.size + header_len
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(body):
            raise DataError(f"{path}: tensor {entry['name']} runs past the payload")
        array = np.frombuffer(body, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)), offset=start)
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))

    def group(prefix):
        return {name[len(prefix):]: value for name, value in tensors.items() if name.startswith(prefix)}

    state = None
    if flags & FLAG_OPTIMIZER:
        state = TrainState.from_scalars(header["train_state"], m=group("m/"), v=group("v/"))

    return Checkpoint(
        params=FNRParams.from_dict(group("params/")),
        model_config=ModelConfig(**header["model_config"]),
        d_in=int(header["d_in"]),
        state=state,
        metadata=header.get("metadata", {}),
    )
