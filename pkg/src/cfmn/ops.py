"""Differentiable layer operations.

Every function takes and returns :class:`~cfmn.tensor.Tensor` objects and
records an analytic backward on the active :class:`~cfmn.tensor.GradTape`.
Image tensors are channel-first: ``B x C x H x W`` (or ``C x H x W`` for a
single image where noted).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NonFiniteError, ShapeError, UninitializedStatisticsError
from .tensor import Tensor, emit

__all__ = [
    "BatchNormState",
    "add",
    "batchnorm",
    "concat",
    "concat_channels",
    "conv2d",
    "elementwise_mean",
    "flatten",
    "fully_connected",
    "group_mean",
    "matmul",
    "maxpool2d",
    "mse_loss",
    "relu",
    "reshape",
    "row_softmax",
    "scale",
    "sigmoid",
    "slice_batch",
    "take",
    "transpose_last",
]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return emit("matmul", A @ B, (a, b), backward)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return emit("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {exc}") from None
    src = a.shape
    return emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    """Collapse everything after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def row_softmax(m: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting each row's max."""
    d = m.data
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("row_softmax: non-finite input")
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return emit("row_softmax", y, (m,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` of shape ``B x F_in`` and weight ``F_in x F_out``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} != ({weight.shape[1]},)")
    X, W = x.data, weight.data
    y = X @ W
    if bias is not None:
        y = y + bias.data

    def backward(g):
        grads = [g @ W.T, X.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("fully_connected", y, inputs, backward)


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    block: str = "conv2d",
) -> Tensor:
    """2-d cross-correlation (no kernel flip).

    ``x`` is ``B x C_in x H x W`` or a single ``C_in x H x W`` image; the
    kernel is ``C_out x C_in x k x k``. ``block`` names the layer in errors.
    """
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernel, bias, stride, padding, block)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"{block}: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"{block}: input has {C} channels but kernel expects {Ck}")
    if kh != kw:
        raise ConfigError(f"{block}: only square kernels are supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"{block}: invalid stride {stride} / padding {padding}")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if H + 2 * padding - k < 0 or W + 2 * padding - k < 0 or Ho < 1 or Wo < 1:
        raise ConfigError(
            f"{block}: {k}x{k} kernel with padding {padding} on {H}x{W} input gives "
            f"non-positive output extent"
        )
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"{block}: bias {bias.shape} != ({O},)")
    K = kernel.data

    if k == 1 and stride == 1 and padding == 0:
        X = x.data
        y = np.einsum("bchw,oc->bohw", X, K[:, :, 0, 0], optimize=True)
        if bias is not None:
            y += bias.data[None, :, None, None]

        def backward(g):
            dx = np.einsum("bohw,oc->bchw", g, K[:, :, 0, 0], optimize=True)
            dk = np.einsum("bohw,bchw->oc", g, X, optimize=True)[:, :, None, None]
            grads = [dx, dk]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return grads

    else:
        xp = _pad_hw(x.data, padding)
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # cols: B x C x Ho x Wo x k x k
        y = np.tensordot(cols, K, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            y = y + bias.data[None, :, None, None]

        def backward(g):
            dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(g, K, axes=([1], [0]))  # B x Ho x Wo x C x k x k
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
            grads = [dx, dk]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return emit(block, y, inputs, backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2, block: str = "maxpool2d") -> Tensor:
    """Max pooling with floor-division output extents.

    The gradient is routed to the first maximum of each window in row-major
    order.
    """
    if x.ndim == 3:
        out = maxpool2d(reshape(x, (1,) + x.shape), window, stride, block)
        return reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise ShapeError(f"{block}: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if window < 1 or stride < 1 or window > H or window > W:
        raise ConfigError(f"{block}: {window}x{window} window does not fit {H}x{W} input")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    di, dj = np.divmod(arg, window)
    rows = np.arange(Ho)[:, None] * stride + di
    cols = np.arange(Wo)[None, :] * stride + dj
    plane = (np.arange(B * C).reshape(B, C, 1, 1)) * (H * W)
    target = (plane + rows * W + cols).reshape(-1)
    overlapping = window > stride

    def backward(g):
        dx = np.zeros(B * C * H * W, dtype=g.dtype)
        if overlapping:
            np.add.at(dx, target, g.reshape(-1))
        else:
            dx[target] = g.reshape(-1)
        return (dx.reshape(B, C, H, W),)

    return emit(block, y, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (mutable, not a tensor)."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    updates: int = 0

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.channels,
            self.momentum,
            self.eps,
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
            self.updates,
        )


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    weights: np.ndarray | None = None,
    block: str = "batchnorm",
) -> Tensor:
    """Per-channel batch normalisation of a ``B x C x H x W`` tensor.

    In training mode the batch statistics may be weighted per sample
    (``weights`` of length ``B``); a sample of weight ``w`` counts as ``w``
    identical copies. This lets a caller evaluate each distinct image once
    while normalising as if every duplicate were present. The running
    statistics are updated in place on ``state``.
    """
    if x.ndim != 4:
        raise ShapeError(f"{block}: expected B x C x H x W input, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,) or state.channels != C:
        raise ShapeError(f"{block}: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    X = x.data
    G = gamma.data[None, :, None, None]
    dtype = X.dtype
    eps = dtype.type(state.eps)

    if not train:
        if not state.initialized:
            raise UninitializedStatisticsError(f"{block}: uninitialized statistics (no training pass yet)")
        mean = state.running_mean.astype(dtype)[None, :, None, None]
        inv = (1.0 / np.sqrt(state.running_var.astype(dtype) + eps))[None, :, None, None]
        xhat = (X - mean) * inv
        y = G * xhat + beta.data[None, :, None, None]

        def backward(g):
            return g * G * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return emit(block, y, (x, gamma, beta), backward)

    if weights is None:
        p = np.full((B, 1, 1, 1), 1.0 / (B * H * W), dtype=dtype)
    else:
        w = np.asarray(weights, dtype=dtype).reshape(B)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"{block}: sample weights must be non-negative with positive sum")
        p = (w / (w.sum() * H * W)).reshape(B, 1, 1, 1)
    mean = (X * p).sum(axis=(0, 2, 3), keepdims=True)
    xc = X - mean
    var = (xc * xc * p).sum(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = G * xhat + beta.data[None, :, None, None]

    m = dtype.type(state.momentum)
    new_mean = mean.reshape(C)
    new_var = var.reshape(C)
    if state.initialized:
        state.running_mean = (1 - m) * state.running_mean + m * new_mean
        state.running_var = (1 - m) * state.running_var + m * new_var
    else:
        # First batch seeds the statistics from the PyTorch-style defaults (0, 1).
        state.running_mean = m * new_mean
        state.running_var = (1 - m) * np.ones(C, dtype=dtype) + m * new_var
    state.updates += 1

    def backward(g):
        dxhat = g * G
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = inv * (dxhat - p * (s1 + xhat * s2))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return emit(block, y, (x, gamma, beta), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: extents {t.shape} and {ref} differ outside axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 for ``C x H x W``, 1 for batched)."""
    nd = tensors[0].ndim
    if nd not in (3, 4) or any(t.ndim != nd for t in tensors):
        raise ShapeError(f"concat_channels: expected all 3-d or all 4-d tensors, got {[t.shape for t in tensors]}")
    return concat(tensors, axis=0 if nd == 3 else 1)


def elementwise_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Element-wise average of same-shaped tensors."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("elementwise_mean: no tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"elementwise_mean: {t.shape} vs {ref}")
    n = len(tensors)
    if n == 1:
        return tensors[0]
    y = tensors[0].data.copy()
    for t in tensors[1:]:
        y += t.data
    y /= n
    return emit("elementwise_mean", y, tensors, lambda g: [g / n] * n)


def _selection_matrix(groups: Sequence[Sequence[int]], n: int, dtype) -> np.ndarray:
    M = np.zeros((len(groups), n), dtype=dtype)
    for r, idx in enumerate(groups):
        idx = list(idx)
        if not idx:
            raise ShapeError(f"group_mean: group {r} is empty")
        for i in idx:
            M[r, i] += 1.0 / len(idx)
    return M


def group_mean(x: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Row ``r`` of the result is the mean of ``x[groups[r]]`` along axis 0."""
    n = x.shape[0]
    M = _selection_matrix(groups, n, x.dtype)
    X = x.data.reshape(n, -1)
    y = (M @ X).reshape((len(groups),) + x.shape[1:])
    return emit("group_mean", y, (x,), lambda g: ((M.T @ g.reshape(len(groups), -1)).reshape(x.shape),))


def take(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows along axis 0 (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take: index out of range for axis of length {x.shape[0]}")
    n = x.shape[0]

    def backward(g):
        if np.unique(idx).size == idx.size:
            dx = np.zeros(x.shape, dtype=g.dtype)
            dx[idx] = g
            return (dx,)
        S = np.zeros((n, idx.size), dtype=g.dtype)
        S[idx, np.arange(idx.size)] = 1
        return ((S @ g.reshape(idx.size, -1)).reshape(x.shape),)

    return emit("take", x.data[idx], (x,), backward)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along axis 0."""
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[start:stop] = g
        return (dx,)

    return emit("slice", x.data[start:stop], (x,), backward)


def mse_loss(scores: Tensor, targets) -> Tensor:
    """Mean over all entries of ``(score - target)^2`` as a 1-element tensor."""
    T = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=scores.dtype)
    if T.shape != scores.shape:
        raise ShapeError(f"mse_loss: scores {scores.shape} vs targets {T.shape}")
    diff = scores.data - T
    n = diff.size
    loss = np.array([np.mean(diff * diff)], dtype=scores.dtype)
    return emit("mse_loss", loss, (scores,), lambda g: (g[0] * 2.0 * diff / n,))
