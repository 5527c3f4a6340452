"""
Checkpoint archive

    b"TVTS-CKPT\\n" | u64 little-endian header length | JSON header | raw tensor payload

The header holds the format version, a table of (name, shape, dtype, offset,
nbytes) for every tensor, the config snapshot, step, RNG state and the
sha256 of the payload. Tensors are stored little-endian, C order.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from tvts.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    ChecksumError,
    TruncatedCheckpointError,
)
from tvts.numerics import AdamWState

logger = logging.getLogger(__name__)

MAGIC = b"TVTS-CKPT\n"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_GROUPS = ("param", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    opt_state: AdamWState
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    rng: Dict[str, Any] = field(default_factory=dict)


def _tensor_table(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    table: Dict[str, np.ndarray] = {}
    for group, arrays in zip(_GROUPS, (ckpt.params, ckpt.opt_state.m, ckpt.opt_state.v)):
        for name in sorted(arrays):
            table[f"{group}/{name}"] = arrays[name]
    return table


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in _tensor_table(ckpt).items():
        arr = np.asarray(arr)
        little = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        data = little.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": little.dtype.str,
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "config": ckpt.config,
        "step": ckpt.step,
        "rng": ckpt.rng,
        "optimizer_step": ckpt.opt_state.step,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    tmp.replace(path)
    logger.info(f"✅ Saved checkpoint step {ckpt.step} to {path}")
    return path


def read_header(raw: bytes) -> Dict[str, Any]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a TVTS checkpoint (bad magic)")
    start = len(MAGIC)
    if len(raw) < start + _LEN.size:
        raise TruncatedCheckpointError("checkpoint ends inside the header length")
    (length,) = _LEN.unpack_from(raw, start)
    start += _LEN.size
    if len(raw) < start + length:
        raise TruncatedCheckpointError(f"checkpoint ends inside the {length}-byte header")
    try:
        header = json.loads(raw[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    header["_payload_start"] = start + length
    return header


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header = read_header(raw)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
    payload = raw[header["_payload_start"]:]
    declared = sum(entry["nbytes"] for entry in header["tensors"])
    if len(payload) < declared:
        raise TruncatedCheckpointError(f"payload has {len(payload)} of {declared} bytes")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ChecksumError(f"checksum mismatch in {path}")

    groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in seen:
            raise CheckpointError(f"tensor {name!r} listed twice")
        seen.add(name)
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != entry["nbytes"]:
            raise CheckpointShapeError(f"{name}: shape {shape} x {dtype} does not match {entry['nbytes']} bytes")
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=start)
        group, _, tensor = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown tensor group in {name!r}")
        groups[group][tensor] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)

    opt_state = AdamWState(m=groups["adam_m"], v=groups["adam_v"], step=int(header.get("optimizer_step", 0)))
    logger.info(f"Loaded checkpoint step {header['step']} from {path}")
    return Checkpoint(params=groups["param"], opt_state=opt_state, step=int(header["step"]),
                      config=header.get("config", {}), rng=header.get("rng", {}))
