"""Versioned checkpoint container.

Single file: magic, version, a JSON header echoing the training config and
listing named arrays with shapes, followed by the concatenated array data as
little-endian 32-bit floats. Loading validates the shape manifest against
the target module's state dict.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

_MAGIC = b"LACT"
_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: Path, kind: str, config: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    header = {
        "kind": kind,
        "config": config,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(header_len))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4")
            if data.size != count:
                raise CheckpointError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = data.reshape(shape).copy()
    return header["kind"], header["config"], arrays


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def load_into_module(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing={sorted(missing)}, "
                              f"unexpected={sorted(extra)}")
    for name, tensor in state.items():
        if tuple(arrays[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arrays[name].shape} "
                f"vs module {tuple(tensor.shape)}")
    module.load_state_dict({k: torch.as_tensor(v, dtype=state[k].dtype)
                            for k, v in arrays.items()})
