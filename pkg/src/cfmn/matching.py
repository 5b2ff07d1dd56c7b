"""Query-to-support feature matching.

A matching block computes a spatial attention map between every position of
a query feature map and every position of a support feature map, gathers the
support features through that map, and blends the result into the query::

    h   = softmax_rows(mu(z_q) . phi(z_s)^T)        (HW x HW)
    g   = out(h . omega(z_s))                       (C x H x W)
    z_q' = lam * g + (1 - lam) * z_q

``mu``, ``phi``, ``omega`` and ``out`` are 1x1 convolutions with bias.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor

TRANSFORMS = ("mu", "phi", "omega")


@dataclass(frozen=True)
class MatchBlockConfig:
    c_in: int
    c_m: int = 64
    lam: float = 0.5
    use_softmax: bool = True
    use_transform: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.c_in < 1 or self.c_m < 1:
            raise ValueError(f"channel counts must be positive (c_in={self.c_in}, c_m={self.c_m})")

    @property
    def dim(self) -> int:
        """Width of the attention space (``c_m``, or ``c_in`` without transforms)."""
        return self.c_m if self.use_transform else self.c_in

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MatchBlockConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class AttentionMap:
    """Row ``i`` holds the responses of query position ``i`` to every support position."""

    matrix: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        n = self.height * self.width
        if self.matrix.shape[-2:] != (n, n):
            raise ShapeError(f"attention matrix {self.matrix.shape} does not match {self.height}x{self.width} grid")

    def index(self, pos: tuple[int, int]) -> int:
        r, c = pos
        if not (0 <= r < self.height and 0 <= c < self.width):
            raise ValueError(
                f"position {pos} outside the {self.height}x{self.width} grid "
                f"(rows 0..{self.height - 1}, cols 0..{self.width - 1})"
            )
        return r * self.width + c

    def position(self, idx: int) -> tuple[int, int]:
        return divmod(int(idx), self.width)


def init_match_params(cfg: MatchBlockConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled random weights for one block (unprefixed names)."""
    params: dict[str, np.ndarray] = {}

    def conv(name, c_out, c_in, std):
        params[f"{name}.weight"] = (rng.standard_normal((c_out, c_in, 1, 1)) * std).astype(dtype)
        params[f"{name}.bias"] = np.zeros(c_out, dtype=dtype)

    if cfg.use_transform:
        for name in TRANSFORMS:
            conv(name, cfg.c_m, cfg.c_in, np.sqrt(1.0 / cfg.c_in))
    # Small (not zero) restore weights: lambda already gates this branch.
    conv("out", cfg.c_in, cfg.dim, 0.1 * np.sqrt(1.0 / cfg.dim))
    return params


def identity_match_params(cfg: MatchBlockConfig, dtype=np.float64) -> dict[str, np.ndarray]:
    """Every 1x1 map set to the identity; requires ``c_m == c_in`` when transforms are on."""
    if cfg.use_transform and cfg.c_m != cfg.c_in:
        raise ValueError("identity transforms need c_m == c_in")
    eye = np.eye(cfg.c_in, dtype=dtype)[:, :, None, None]
    zero = np.zeros(cfg.c_in, dtype=dtype)
    names = (TRANSFORMS if cfg.use_transform else ()) + ("out",)
    params = {}
    for n in names:
        params[f"{n}.weight"] = eye.copy()
        params[f"{n}.bias"] = zero.copy()
    return params


def _as_batch(z: Tensor) -> Tensor:
    return ops.reshape(z, (1,) + z.shape) if z.ndim == 3 else z


def _check_pair(z_q: Tensor, z_s: Tensor, cfg: MatchBlockConfig, stage: str) -> None:
    where = f"matching stage {stage}" if stage else "matching"
    if z_q.shape != z_s.shape:
        raise ShapeError(f"{where}: query {z_q.shape} and support {z_s.shape} features differ in shape")
    if z_q.ndim not in (3, 4):
        raise ShapeError(f"{where}: expected C x H x W or B x C x H x W features, got {z_q.shape}")
    if z_q.shape[-3] != cfg.c_in:
        raise ShapeError(f"{where}: features have {z_q.shape[-3]} channels, block expects {cfg.c_in}")


def _project(z: Tensor, params: Mapping[str, Tensor], name: str, cfg: MatchBlockConfig, stage: str) -> Tensor:
    """``B x C x H x W`` -> ``B x D x HW`` through transform ``name`` (or identity)."""
    if cfg.use_transform:
        z = ops.conv2d(z, params[f"{name}.weight"], params[f"{name}.bias"], block=f"{stage}.{name}")
    B, D, H, W = z.shape
    return ops.reshape(z, (B, D, H * W))


def attention(z_q: Tensor, z_s: Tensor, params: Mapping[str, Tensor], cfg: MatchBlockConfig, stage: str = "") -> Tensor:
    """Batched attention tensor ``B x HW x HW`` (differentiable)."""
    _check_pair(z_q, z_s, cfg, stage)
    q = _project(_as_batch(z_q), params, "mu", cfg, stage)
    s = _project(_as_batch(z_s), params, "phi", cfg, stage)
    logits = ops.matmul(ops.transpose_last(q), s)
    return ops.row_softmax(logits) if cfg.use_softmax else logits


def match(
    z_q: Tensor, z_s: Tensor, params: Mapping[str, Tensor], cfg: MatchBlockConfig, stage: str = ""
) -> tuple[Tensor, Tensor | None]:
    """Matched query features plus the attention used (``None`` when lambda is 0)."""
    _check_pair(z_q, z_s, cfg, stage)
    if cfg.lam == 0.0:
        return z_q, None
    single = z_q.ndim == 3
    zq, zs = _as_batch(z_q), _as_batch(z_s)
    B, C, H, W = zq.shape
    h = attention(zq, zs, params, cfg, stage)
    om = _project(zs, params, "omega", cfg, stage)  # B x D x HW
    # g^T = omega(z_s)^T-columns weighted by h: (B x D x HW) @ (B x HW x HW)^T
    g = ops.matmul(om, ops.transpose_last(h))
    g = ops.reshape(g, (B, cfg.dim, H, W))
    g = ops.conv2d(g, params["out.weight"], params["out.bias"], block=f"{stage}.out")
    if cfg.lam == 1.0:
        out = g
    else:
        out = ops.add(ops.scale(g, cfg.lam), ops.scale(zq, 1.0 - cfg.lam))
    if single:
        out = ops.reshape(out, (C, H, W))
    return out, h


def _tensors(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def compute_attention(z_q, z_s, params: Mapping, cfg: MatchBlockConfig, stage: str = "") -> AttentionMap:
    """Attention map for one ``C x H x W`` query/support pair."""
    z_q = z_q if isinstance(z_q, Tensor) else Tensor(z_q)
    z_s = z_s if isinstance(z_s, Tensor) else Tensor(z_s)
    h = attention(z_q, z_s, _tensors(params), cfg, stage)
    H, W = z_q.shape[-2:]
    mat = h.data[0] if z_q.ndim == 3 else h.data
    return AttentionMap(np.array(mat), H, W)


def apply_matching(z_q, z_s, params: Mapping, cfg: MatchBlockConfig, stage: str = "") -> Tensor:
    """Matched query feature, same shape as ``z_q``."""
    z_q = z_q if isinstance(z_q, Tensor) else Tensor(z_q)
    z_s = z_s if isinstance(z_s, Tensor) else Tensor(z_s)
    out, _ = match(z_q, z_s, _tensors(params), cfg, stage)
    return out


def top_k_correspondences(attn: AttentionMap, query_pos: tuple[int, int], k: int) -> list[tuple[tuple[int, int], float]]:
    """The ``k`` strongest support positions for one query position.

    Sorted by weight, descending; equal weights keep row-major order.
    """
    n = attn.height * attn.width
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}, got {k}")
    row = np.asarray(attn.matrix, dtype=np.float64).reshape(n, n)[attn.index(query_pos)]
    order = np.argsort(-row, kind="stable")[:k]
    return [(attn.position(j), float(row[j])) for j in order]
