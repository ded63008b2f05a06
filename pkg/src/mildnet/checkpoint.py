"""
Checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"MILDCKPT"
    8       4     u32 format version (currently 1)
    12      4     u32 header length H in bytes
    16      H     UTF-8 JSON header
    16+H    ...   tensor payload, each tensor raw little-endian float32, C order

The header is a JSON object with sorted keys and no insignificant whitespace:

* ``config``: the ModelConfig as a dict
* ``meta``: free-form training state (epoch, step, best metric, ...)
* ``tensors``: list of ``{"name", "shape", "offset", "nbytes"}`` in write order,
  offsets relative to the start of the payload

Nothing time- or host-dependent is stored, so equal weights give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import DataError
from .model import MILDNet, ModelConfig
from .tensor import Tensor

MAGIC = b"MILDCKPT"
VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model_params(self) -> Dict[str, Tensor]:
        """Network weights as fresh trainable tensors (optimizer slots skipped)."""
        out = {}
        for name, arr in self.tensors.items():
            if name.startswith("opt."):
                continue
            t = Tensor(arr.astype(np.float32), requires_grad=True)
            t.name = name
            out[name] = t
        return out

    def model(self) -> MILDNet:
        return MILDNet(self.config, self.model_params())


def to_bytes(cfg: ModelConfig, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": cfg.to_dict(), "meta": meta or {}, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise DataError(f"{source}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt header ({exc})") from exc
    payload = memoryview(buf)[16 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise DataError(f"{source}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[lo : lo + n], dtype=_DTYPE).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(ModelConfig.from_dict(header["config"]), tensors, header.get("meta", {}))


def save(path: Union[str, Path], cfg: ModelConfig, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(cfg, tensors, meta))
    tmp.replace(path)
    return path


def save_model(path: Union[str, Path], model: MILDNet, meta: dict | None = None, extra: Dict[str, np.ndarray] | None = None) -> Path:
    tensors = {name: t.data for name, t in model.params.items()}
    if extra:
        tensors.update(extra)
    return save(path, model.cfg, tensors, meta)


def load(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf, str(path))
