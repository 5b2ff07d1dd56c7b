"""Immutable dense tensors and the reverse-mode gradient tape."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_state = threading.local()
_default_dtype = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    """Select the element precision used when tensors are built from raw data."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


class Tensor:
    """A dense n-d array that never changes after construction.

    The backing array is marked read-only so ops cannot mutate their inputs.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Takes ownership of a freshly computed array without copying.
        t = cls.__new__(cls)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Records executed ops so gradients can be pulled back in reverse order.

    Use as a context manager; ops executed while a tape is active are recorded
    on the innermost one. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn, str]] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def op_names(self) -> list[str]:
        return [r[3] for r in self._records]

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn, name: str) -> None:
        self._records.append((out, inputs, backward, name))

    def gradient(
        self,
        target: Tensor,
        sources: Iterable[Tensor],
        seed: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Gradients of ``target`` (weighted by ``seed``) with respect to ``sources``.

        Sources the target does not depend on receive zeros.
        """
        sources = list(sources)
        keep = {id(s) for s in sources}
        if seed is None:
            seed = np.ones(target.shape, dtype=target.dtype)
        elif seed.shape != target.shape:
            raise ShapeError(f"seed shape {seed.shape} != target shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        for out, inputs, backward, name in reversed(self._records):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = backward(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{name}: gradient shape {ig.shape} != input shape {inp.shape}")
                if not np.all(np.isfinite(ig)):
                    raise NonFiniteError(f"non-finite gradient produced by {name}")
                k = id(inp)
                prev = grads.get(k)
                grads[k] = ig if prev is None else prev + ig
        return [
            grads[id(s)] if id(s) in grads else np.zeros(s.shape, dtype=s.dtype)
            for s in sources
        ]


def active_tape() -> GradTape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class no_record:
    """Suspend recording on the current thread (for inference inside a tape)."""

    def __enter__(self):
        self._saved = getattr(_state, "tapes", None)
        _state.tapes = []
        return self

    def __exit__(self, *exc):
        _state.tapes = self._saved


def emit(name: str, arr: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op result, enforce finiteness and record it on the active tape."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward, name)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and (dtype is None or x.dtype == dtype) else Tensor(x, dtype=dtype)
