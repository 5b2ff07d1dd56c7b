"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError
from .tensor import GradTape, Tensor, no_record


@dataclass
class CheckReport:
    name: str
    errors: list[float]
    tol: float
    input_names: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _scalar(fn, tensors, weights) -> float:
    with no_record():
        out = fn(*tensors)
    return float(np.sum(out.data * weights))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str | None = None,
    seed: int = 0,
    input_names: Sequence[str] | None = None,
) -> CheckReport:
    """Compare the tape gradient of ``fn`` against central differences.

    ``fn`` maps tensors to a tensor; its output is contracted with a fixed
    random weighting so every output element contributes. The error for each
    input is ``max|g_tape - g_fd| / max(1, max|g_fd|)``. Inputs are promoted
    to double precision.
    """
    name = name or getattr(fn, "__name__", "op")
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, dtype=np.float64) for a in arrays]
    with GradTape() as tape:
        out = fn(*tensors)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = tape.gradient(out, tensors, seed=weights)

    errors = []
    for idx, (arr, g_an) in enumerate(zip(arrays, analytic)):
        if not np.all(np.isfinite(g_an)):
            raise NonFiniteError(f"{name}: non-finite analytic gradient for input {idx}")
        g_fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            tensors[idx] = Tensor(arr, dtype=np.float64)
            f_plus = _scalar(fn, tensors, weights)
            flat[i] = orig - eps
            tensors[idx] = Tensor(arr, dtype=np.float64)
            f_minus = _scalar(fn, tensors, weights)
            flat[i] = orig
            g_fd.reshape(-1)[i] = (f_plus - f_minus) / (2 * eps)
        tensors[idx] = Tensor(arr, dtype=np.float64)
        denom = max(1.0, float(np.max(np.abs(g_fd))) if g_fd.size else 0.0)
        errors.append(float(np.max(np.abs(g_an - g_fd))) / denom if g_fd.size else 0.0)
    names = list(input_names) if input_names else [f"x{i}" for i in range(len(arrays))]
    return CheckReport(name, errors, tol, names)
