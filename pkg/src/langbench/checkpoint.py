"""Binary checkpoints: magic + version header, CRC-checked named sections.

All numeric payloads are little-endian 64-bit (float64 or int64). The
encoding is canonical -- sections sorted by name -- so save -> load ->
save reproduces the original bytes exactly.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .samplers import KINDS

MAGIC = b"LBCK"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<i8"}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


class CheckpointError(ValueError):
    """Unreadable checkpoint: bad magic, version, structure or checksum."""


@dataclass
class CheckpointState:
    step: int = 0
    epoch: int = 0
    seed: int = 0
    kind: str = "SGD"
    arrays: dict = field(default_factory=dict)


def _encode_array(arr):
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.int64 if np.issubdtype(arr.dtype, np.integer) else np.float64)
    code = _CODES[arr.dtype]
    head = struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes()


def _decode_array(payload, name):
    if len(payload) < 2:
        raise CheckpointError(f"section {name}: payload too short")
    code, ndim = struct.unpack_from("<BB", payload, 0)
    if code not in _DTYPES:
        raise CheckpointError(f"section {name}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}Q", payload, 2)
    data = payload[2 + 8 * ndim:]
    count = int(np.prod(dims)) if ndim else 1
    if len(data) != count * 8:
        raise CheckpointError(f"section {name}: payload size mismatch")
    return np.frombuffer(data, dtype=_DTYPES[code]).reshape(dims).copy()


def save_checkpoint(state):
    """Serialize to bytes; load_checkpoint is the exact inverse."""
    arrays = dict(state.arrays)
    arrays["__meta__"] = np.array(
        [state.step, state.epoch, state.seed, KINDS.index(state.kind)], dtype=np.int64)
    blob = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        payload = _encode_array(arrays[name])
        encoded = name.encode()
        blob.append(struct.pack("<H", len(encoded)) + encoded)
        blob.append(struct.pack("<QI", len(payload), zlib.crc32(payload)))
        blob.append(payload)
    return b"".join(blob)


def load_checkpoint(blob):
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    arrays = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode()
            offset += name_len
            size, crc = struct.unpack_from("<QI", blob, offset)
            offset += 12
            payload = blob[offset:offset + size]
            offset += size
        except struct.error as exc:
            raise CheckpointError(f"truncated section table: {exc}") from exc
        if len(payload) != size:
            raise CheckpointError(f"section {name}: truncated payload")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"section {name}: checksum mismatch")
        arrays[name] = _decode_array(payload, name)
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes")
    if "__meta__" not in arrays:
        raise CheckpointError("missing __meta__ section")
    step, epoch, seed, kind_idx = (int(v) for v in arrays.pop("__meta__"))
    if not 0 <= kind_idx < len(KINDS):
        raise CheckpointError(f"bad sampler kind index {kind_idx}")
    return CheckpointState(step=step, epoch=epoch, seed=seed,
                           kind=KINDS[kind_idx], arrays=arrays)


def write_checkpoint(path, state):
    data = save_checkpoint(state)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
