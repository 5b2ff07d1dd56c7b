"""Binary parameter checkpoints.

Layout (all integers little-endian uint32)::

    b"CFMN1"  record_count
    record*:  name_len  name(utf-8)  rank  extent*rank  float32*prod(extents)

Batch-norm running statistics follow the parameters as ordinary records
named ``@bn/<layer>/mean``, ``@bn/<layer>/var`` and ``@bn/<layer>/updates``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import CFMNError
from .ops import BatchNormState

MAGIC = b"CFMN1"
BN_PREFIX = "@bn/"


class CheckpointError(CFMNError, ValueError):
    pass


def _write_record(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(params: dict[str, np.ndarray], bn_states: dict[str, BatchNormState] | None = None) -> bytes:
    records: list[tuple[str, np.ndarray]] = [(k, np.asarray(v)) for k, v in params.items()]
    for layer, st in (bn_states or {}).items():
        if not st.initialized:
            continue
        records.append((f"{BN_PREFIX}{layer}/mean", st.running_mean))
        records.append((f"{BN_PREFIX}{layer}/var", st.running_var))
        records.append((f"{BN_PREFIX}{layer}/updates", np.array([st.updates])))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, dict[str, np.ndarray]]]:
    """Parse a checkpoint into ``(params, bn_stats)``; arrays are float32."""
    view = memoryview(blob)
    if bytes(view[:5]) != MAGIC:
        raise CheckpointError("not a CFMN1 checkpoint (bad magic)")
    pos = 5

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    stats: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith(BN_PREFIX):
            layer, field = name[len(BN_PREFIX) :].rsplit("/", 1)
            stats.setdefault(layer, {})[field] = arr
        else:
            params[name] = arr
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last record")
    return params, stats


def save(path: str | Path, params: dict[str, np.ndarray], bn_states: dict[str, BatchNormState] | None = None) -> None:
    Path(path).write_bytes(dumps(params, bn_states))


def load(path: str | Path):
    return loads(Path(path).read_bytes())
