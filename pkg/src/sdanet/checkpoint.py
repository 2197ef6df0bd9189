"""Checkpoint container: one line of JSON header, newline, little-endian float32 blob.

The header records the format version, the model config, the seed and a table
of ``(name, shape, offset)`` with offsets counted in float32 elements.
"""

import json
import os
from collections import OrderedDict
from typing import Optional, Tuple

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, layer_specs
from .tensor import Tensor

FORMAT = "sdanet-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def checkpoint_bytes(params: ModelParams, config: Optional[ModelConfig] = None) -> bytes:
    config = config or params.config
    table, chunks, offset = [], [], 0
    for name, t in params.tensors.items():
        arr = np.ascontiguousarray(t.data, dtype=_LE_F32)
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {"format": FORMAT, "version": VERSION, "config": config.to_dict(),
              "seed": params.seed, "tensors": table, "blob_elements": offset}
    return _header_bytes(header) + b"".join(chunks)


def save_checkpoint(params: ModelParams, config: Optional[ModelConfig], path):
    data = checkpoint_bytes(params, config)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _expected_shapes(config: ModelConfig):
    out = []
    for s in layer_specs(config):
        out.append((s.path + ".weight", (s.out_channels, s.in_channels, s.kernel, s.kernel)))
        out.append((s.path + ".bias", (1, s.out_channels, 1, 1)))
    return out


def parse_checkpoint(data: bytes) -> Tuple[ModelParams, ModelConfig]:
    nl = data.find(b"\n")
    if nl < 0:
        raise CheckpointError("checkpoint has no header terminator")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is not valid JSON: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"not an SDANet checkpoint (format={header.get('format')!r})")
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}, "
                              f"expected {VERSION}")
    blob = data[nl + 1:]
    n_elem = header["blob_elements"]
    if len(blob) != 4 * n_elem:
        raise CheckpointError(f"blob holds {len(blob)} bytes, header declares {4 * n_elem}")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc
    values = np.frombuffer(blob, dtype=_LE_F32)
    tensors = OrderedDict()
    expected = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if entry["offset"] != expected or expected + size > n_elem:
            raise CheckpointError(f"shape table inconsistent at {entry['name']}")
        arr = values[expected:expected + size].astype(np.float64).reshape(shape)
        tensors[entry["name"]] = Tensor(arr, requires_grad=True)
        expected += size
    if expected != n_elem:
        raise CheckpointError(f"shape table covers {expected} of {n_elem} blob elements")
    if _expected_shapes(config) != [(k, t.shape) for k, t in tensors.items()]:
        raise CheckpointError("checkpoint tensors do not match the layers its config describes")
    return ModelParams(config, tensors, header.get("seed")), config


def load_checkpoint(path) -> Tuple[ModelParams, ModelConfig]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data)
