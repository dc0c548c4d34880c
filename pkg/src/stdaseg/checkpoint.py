"""Single-file checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"STDACKPT"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length L in bytes
    offset 20  L bytes   UTF-8 JSON header, keys sorted
    ...        padding   zero bytes up to the next multiple of 8
    data       tensor payloads, each starting at a multiple of 8

The header holds ``{"meta": {...}, "tensors": {name: {"dtype", "shape",
"offset", "nbytes"}}}``. ``offset`` is relative to the start of the data
section. ``dtype`` is one of ``f32``, ``f64`` (little-endian IEEE floats),
``i64`` (little-endian) or ``u8``. Payloads are C-ordered.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"STDACKPT"
VERSION = 1

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_TORCH_TO_CODE = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.int64: "i64",
    torch.uint8: "u8",
}
_CODE_TO_TORCH = {v: k for k, v in _TORCH_TO_CODE.items()}


class CheckpointError(Exception):
    pass


def _pad8(n: int) -> int:
    return (-n) % 8


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)  # name -> torch.Tensor (CPU)
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        entries = {}
        blobs = []
        offset = 0
        for name in sorted(self.tensors):
            t = self.tensors[name].detach().cpu().contiguous()
            code = _TORCH_TO_CODE.get(t.dtype)
            if code is None:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
            raw = t.numpy().astype(_DTYPES[code], copy=False).tobytes(order="C")
            entries[name] = {"dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
            blobs.append(raw + b"\0" * _pad8(len(raw)))
            offset += len(raw) + _pad8(len(raw))
        header = json.dumps({"meta": self.meta, "tensors": entries}, sort_keys=True).encode("utf-8")
        prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(prefix)
            fh.write(b"\0" * _pad8(len(prefix)))
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        buf = Path(path).read_bytes()
        if buf[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<IQ", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(buf[20:20 + hlen].decode("utf-8"))
        start = 20 + hlen
        start += _pad8(start)
        tensors = {}
        for name, e in header["tensors"].items():
            dt = _DTYPES[e["dtype"]]
            lo = start + e["offset"]
            arr = np.frombuffer(buf, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=lo)
            arr = arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
            tensors[name] = torch.from_numpy(arr)
        return cls(tensors, header["meta"])


def flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict) -> dict:
    """Tensor state goes into ``tensors``; returns the JSON-able remainder."""
    sd = opt.state_dict()
    state_meta = {}
    for idx, st in sd["state"].items():
        entry = {}
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                tensors[f"{prefix}/state/{idx}/{key}"] = val
                entry[key] = {"tensor": True}
            else:
                entry[key] = val
        state_meta[str(idx)] = entry
    return {"state": state_meta, "param_groups": sd["param_groups"]}


def restore_optimizer(prefix: str, opt: torch.optim.Optimizer, meta: dict, tensors: dict) -> None:
    state = {}
    for idx, entry in meta["state"].items():
        st = {}
        for key, val in entry.items():
            if isinstance(val, dict) and val.get("tensor"):
                st[key] = tensors[f"{prefix}/state/{idx}/{key}"].clone()
            else:
                st[key] = val
        state[int(idx)] = st
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
