"""Binary checkpoint container.

Layout (little-endian)::

    b"MBMD" | u32 version | u32 config_len | config JSON (utf-8)
    u32 tensor_count
    per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, VersionMismatchError
from .model import MBMDTransformer, ModelConfig

MAGIC = b"MBMD"
VERSION = 1


def save_checkpoint(model: MBMDTransformer, path: str | Path, extra: dict | None = None) -> None:
    config = model.config_dict()
    if extra:
        config["extra"] = extra
    blob = json.dumps(config, sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            raw_name = name.encode()
            arr = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[MBMDTransformer, dict]:
    """Returns the model (eval mode) and the decoded config blob."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not an MBMD checkpoint")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version} unsupported")
    try:
        config, state = _parse_body(raw, blob_len, dtype)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    model = MBMDTransformer(ModelConfig(**config["model"]), config["ensemble_mode"]).to(dtype)
    model.load_state_dict(state)
    return model.eval(), config


def _parse_body(raw: bytes, blob_len: int, dtype: torch.dtype) -> tuple[dict, dict]:
    pos = 12
    config = json.loads(raw[pos : pos + blob_len].decode())
    pos += blob_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        state[name] = torch.from_numpy(arr.copy()).to(dtype)
    return config, state
