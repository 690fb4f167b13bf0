"""Versioned checkpoint container shared by the codec, UNet and LoRA weights.

Layout (all integers little-endian):

    b"3MTI" | uint32 format version | uint64 header length | JSON header | blob

The header records the run config, its hash, seed and step, plus an index
entry per tensor: name, shape, dtype, byte offset into the blob and size.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from threemti.errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"3MTI"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES: dict[torch.dtype, str] = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}


@dataclass
class Checkpoint:
    header: dict[str, Any]
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def config(self) -> dict[str, Any]:
        return self.header.get("config") or {}

    @property
    def components(self) -> list[str]:
        return list(self.header.get("components") or [])

    def component_state(self, component: str) -> dict[str, torch.Tensor]:
        prefix = f"{component}."
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    if t.dtype not in _DTYPES:
        raise CheckpointFormatError(f"unsupported tensor dtype {t.dtype}")
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    *,
    components: list[str],
    config: dict[str, Any],
    config_hash: str,
    seed: int,
    step: int,
    extra: dict[str, Any] | None = None,
) -> Path:
    index: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        data = _to_numpy(t).tobytes()
        index.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": _DTYPES[t.dtype],
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)

    header = {
        "format_version": FORMAT_VERSION,
        "components": list(components),
        "config": config,
        "config_hash": config_hash,
        "seed": int(seed),
        "step": int(step),
        "tensors": index,
        **(extra or {}),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(raw)))
        f.write(raw)
        for chunk in chunks:
            f.write(chunk)
    tmp.replace(p)
    logger.info("Wrote checkpoint %s (%d tensors, step %d)", p, len(index), step)
    return p


def read_header(path: str | Path) -> dict[str, Any]:
    with Path(path).open("rb") as f:
        return _read_header(f, path)


def _read_header(f, path: str | Path) -> dict[str, Any]:
    prefix = f.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    magic, version, length = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a threemti checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    try:
        return json.loads(f.read(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header: {e}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"No checkpoint found at {p}")
    with p.open("rb") as f:
        header = _read_header(f, p)
        blob = f.read()
    tensors: dict[str, torch.Tensor] = {}
    for entry in header.get("tensors", []):
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise CheckpointFormatError(f"{p}: tensor {entry['name']} runs past end of file")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr)
    return Checkpoint(header=header, tensors=tensors)


def tensor_checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    """Order-independent digest of names, shapes, dtypes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        data = _to_numpy(t).tobytes()
        h.update(name.encode("utf-8"))
        h.update(b"\0")
        h.update(str(list(t.shape)).encode("utf-8"))
        h.update(b"\0")
        h.update(str(t.dtype).encode("utf-8"))
        h.update(b"\0")
        h.update(hashlib.sha256(data).hexdigest().encode("utf-8"))
        h.update(b"\n")
    return f"sha256:{h.hexdigest()}"


def module_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum({k: v for k, v in module.state_dict().items()})
