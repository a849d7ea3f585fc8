"""Versioned binary container for checkpoints.

Layout: 8-byte magic, u32 format version, u64 header length, a JSON header
(sorted keys) describing scalars and the tensor index, then the raw
little-endian tensor payload. The writer is fully deterministic: identical
state produces byte-identical files, which is what makes run-level
reproducibility checkable by hashing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"HSEGCKPT"
FORMAT_VERSION = 1

_TORCH_TO_TAG = {
    torch.float16: "f16",
    torch.float32: "f32",
    torch.float64: "f64",
    torch.uint8: "u8",
    torch.int64: "i64",
    torch.int32: "i32",
}
_TAG_TO_NUMPY = {
    "f16": "<f2",
    "f32": "<f4",
    "f64": "<f8",
    "u8": "<u1",
    "i64": "<i8",
    "i32": "<i4",
}
_TAG_TO_TORCH = {
    "f16": torch.float16,
    "f32": torch.float32,
    "f64": torch.float64,
    "u8": torch.uint8,
    "i64": torch.int64,
    "i32": torch.int32,
}


def write_container(path: str | Path, meta: dict[str, Any],
                    tensors: dict[str, torch.Tensor]) -> None:
    """Write scalars/medatata plus named tensors to ``path`` atomically."""
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        tag = _TORCH_TO_TAG.get(tensor.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported tensor dtype {tensor.dtype} ({name})")
        data = tensor.numpy().astype(_TAG_TO_NUMPY[tag], copy=False).tobytes()
        index.append({
            "name": name,
            "dtype": tag,
            "shape": list(tensor.shape),
            "offset": len(payload),
            "nbytes": len(data),
        })
        payload.extend(data)

    header = dict(meta)
    header["tensors"] = index
    header["payload_bytes"] = len(payload)
    header_bytes = json.dumps(header, sort_keys=True).encode()

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(payload)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    """Read a container back into (meta, tensors); validates integrity."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", raw, len(MAGIC))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {version}, this build reads "
            f"{FORMAT_VERSION}"
        )
    header_len = struct.unpack_from("<Q", raw, len(MAGIC) + 4)[0]
    header_start = len(MAGIC) + 12
    header_end = header_start + header_len
    if header_end > len(raw):
        raise CheckpointError(f"{path} is truncated (header incomplete)")
    try:
        header = json.loads(raw[header_start:header_end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc

    payload = raw[header_end:]
    if len(payload) != header.get("payload_bytes", -1):
        raise CheckpointError(
            f"{path} is corrupt: payload has {len(payload)} bytes, header "
            f"describes {header.get('payload_bytes')}"
        )
    tensors: dict[str, torch.Tensor] = {}
    for entry in header.pop("tensors"):
        start = header_end + entry["offset"]
        end = start + entry["nbytes"]
        array = np.frombuffer(raw[start:end], dtype=_TAG_TO_NUMPY[entry["dtype"]])
        tensors[entry["name"]] = (
            torch.from_numpy(array.copy())
            .to(_TAG_TO_TORCH[entry["dtype"]])
            .reshape(entry["shape"])
        )
    header.pop("payload_bytes", None)
    return header, tensors
