"""The cascaded feature matching network.

Four convolution blocks (CB1-CB4) form an extractor shared by the query and
the support branch. After each stage named in ``matching_stages`` the query
feature is replaced by its match against the support feature of the same
stage. The two final features are concatenated along channels, averaged over
the K supports of a class, and scored by CB5, CB6 and a two-layer fully
connected head ending in a sigmoid.

All pair forwards of an episode run as one batch. The query is re-extracted
once per support image only from the first matching stage on; before that
each distinct image is computed once and weighted in the batch-norm
statistics as if every duplicate were present.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint, ops
from .errors import ConfigError, ProtocolError, ShapeError
from .matching import MatchBlockConfig, init_match_params, match
from .tensor import Tensor

EXTRACTOR = ("cb1", "cb2", "cb3", "cb4")
HEAD = ("cb5", "cb6")
BLOCKS = EXTRACTOR + HEAD

# CB3/CB4 keep 19x19 at 84x84 input; every other block shrinks without padding.
DEFAULT_PADDING = {"cb1": 0, "cb2": 0, "cb3": 1, "cb4": 1, "cb5": 0, "cb6": 0}
DEFAULT_POOL = {"cb1": True, "cb2": True, "cb3": False, "cb4": False, "cb5": True, "cb6": True}


@dataclass(frozen=True)
class BlockSpec:
    filters: int = 64
    kernel: int = 3
    padding: int = 0
    pool: bool = True


@dataclass
class CFMNConfig:
    input_size: int = 84
    channels_in: int = 3
    blocks: dict[str, BlockSpec] = field(
        default_factory=lambda: {b: BlockSpec(64, 3, DEFAULT_PADDING[b], DEFAULT_POOL[b]) for b in BLOCKS}
    )
    fc_hidden: int = 8
    matching_stages: tuple[str, ...] = ("cb2", "cb3", "cb4")
    match: dict[str, MatchBlockConfig] = field(default_factory=dict)
    n_way: int = 5
    k_shot: int = 1
    dtype: str = "float32"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.matching_stages = tuple(self.matching_stages)
        for stage in self.matching_stages:
            if stage not in EXTRACTOR:
                raise ConfigError(f"matching stage {stage!r} is not an extractor block {EXTRACTOR}")
            if stage not in self.match:
                self.match[stage] = MatchBlockConfig(c_in=self.blocks[stage].filters)
            if self.match[stage].c_in != self.blocks[stage].filters:
                raise ConfigError(
                    f"matching stage {stage}: c_in={self.match[stage].c_in} but {stage} "
                    f"outputs {self.blocks[stage].filters} channels"
                )
        if np.dtype(self.dtype) not in (np.float32, np.float64):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.n_way < 1 or self.k_shot < 1:
            raise ConfigError("n_way and k_shot must be positive")
        trace_shapes(self)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels_in, self.input_size, self.input_size)

    @property
    def fcb_in(self) -> int:
        return trace_shapes(self)["fcb_in"]

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "channels_in": self.channels_in,
            "blocks": {k: asdict(v) for k, v in self.blocks.items()},
            "fc_hidden": self.fc_hidden,
            "matching_stages": list(self.matching_stages),
            "match": {k: v.to_dict() for k, v in self.match.items()},
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "dtype": self.dtype,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CFMNConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = {k: BlockSpec(**v) for k, v in d["blocks"].items()}
        if "match" in d:
            d["match"] = {k: MatchBlockConfig.from_dict(v) for k, v in d["match"].items()}
        if "matching_stages" in d:
            d["matching_stages"] = tuple(d["matching_stages"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CFMNConfig":
        return cls.from_dict(json.loads(text))


def trace_shapes(cfg: CFMNConfig) -> dict:
    """Per-image output shape ``(C, H, W)`` of every block, plus the FCB input width."""
    shapes: dict = {}
    c, h = cfg.channels_in, cfg.input_size

    def step(name, c, h):
        spec = cfg.blocks[name]
        h = h + 2 * spec.padding - spec.kernel + 1
        if h < 1:
            raise ConfigError(f"{name}: {spec.kernel}x{spec.kernel} conv with padding {spec.padding} collapses the feature map")
        if spec.pool:
            if h < 2:
                raise ConfigError(f"{name}: 2x2 maxpool does not fit a {h}x{h} feature map")
            h = (h - 2) // 2 + 1
        return spec.filters, h

    for name in EXTRACTOR:
        c, h = step(name, c, h)
        shapes[name] = (c, h, h)
    c = 2 * c
    shapes["co"] = (c, h, h)
    for name in HEAD:
        c, h = step(name, c, h)
        shapes[name] = (c, h, h)
    shapes["fcb_in"] = c * h * h
    return shapes


def make_config(
    input_size: int = 84,
    channels_in: int = 3,
    filters: int = 64,
    c_m: int | None = None,
    lam: float = 0.5,
    matching_stages: Sequence[str] = ("cb2", "cb3", "cb4"),
    use_softmax: bool = True,
    use_transform: bool = True,
    n_way: int = 5,
    k_shot: int = 1,
    dtype: str = "float32",
    fc_hidden: int = 8,
) -> CFMNConfig:
    """Build a config following the default layer schedule.

    When the input is too small for unpadded CB5/CB6 (e.g. 28x28), those two
    blocks switch to padding 1; the FCB width is always traced, never fixed.
    """
    c_m = filters if c_m is None else c_m

    def blocks(head_pad):
        out = {}
        for b in BLOCKS:
            pad = head_pad if b in HEAD else DEFAULT_PADDING[b]
            out[b] = BlockSpec(filters, 3, pad, DEFAULT_POOL[b])
        return out

    match_cfgs = {
        s: MatchBlockConfig(c_in=filters, c_m=c_m, lam=lam, use_softmax=use_softmax, use_transform=use_transform)
        for s in matching_stages
    }
    common = dict(
        input_size=input_size,
        channels_in=channels_in,
        fc_hidden=fc_hidden,
        matching_stages=tuple(matching_stages),
        n_way=n_way,
        k_shot=k_shot,
        dtype=dtype,
    )
    try:
        return CFMNConfig(blocks=blocks(0), match=dict(match_cfgs), **common)
    except ConfigError:
        return CFMNConfig(blocks=blocks(1), match=dict(match_cfgs), **common)


# --------------------------------------------------------------------------- params


class ModelParams:
    """Named parameter tensors plus batch-norm running state.

    There is exactly one set of extractor weights; both branches look them up
    by the same name.
    """

    def __init__(self, tensors: dict[str, Tensor], bn: dict[str, ops.BatchNormState]):
        self.tensors = tensors
        self.bn = bn

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def scoped(self, prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def copy(self) -> "ModelParams":
        # Tensors are immutable, so sharing them is a faithful snapshot.
        return ModelParams(dict(self.tensors), {k: v.copy() for k, v in self.bn.items()})

    def replace(self, updates: Mapping[str, np.ndarray]) -> None:
        for k, v in updates.items():
            if self.tensors[k].shape != v.shape:
                raise ShapeError(f"parameter {k}: {v.shape} != {self.tensors[k].shape}")
            self.tensors[k] = Tensor._wrap(np.array(v, dtype=self.tensors[k].dtype))

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.to_numpy(), self.bn)

    def load_into(self, path: str | Path) -> None:
        """Overwrite values (and batch-norm state) from a checkpoint file."""
        arrays, stats = checkpoint.load(path)
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
        self.replace({k: arrays[k] for k in self.tensors})
        for layer, st in self.bn.items():
            if layer in stats:
                dt = self.tensors[f"{layer}.gamma"].dtype
                st.running_mean = stats[layer]["mean"].astype(dt)
                st.running_var = stats[layer]["var"].astype(dt)
                st.updates = int(stats[layer]["updates"][0]) if "updates" in stats[layer] else 1

    def equals(self, other: "ModelParams") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        if any(self.tensors[k].data.tobytes() != other.tensors[k].data.tobytes() for k in self.tensors):
            return False
        for k, a in self.bn.items():
            b = other.bn[k]
            if a.initialized != b.initialized or a.updates != b.updates:
                return False
            if a.initialized and (a.running_mean.tobytes() != b.running_mean.tobytes()
                                  or a.running_var.tobytes() != b.running_var.tobytes()):
                return False
        return True


def init_params(cfg: CFMNConfig, seed: int = 0) -> ModelParams:
    """Kaiming fan-in weights, zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    shapes = trace_shapes(cfg)
    arrays: dict[str, np.ndarray] = {}
    bn: dict[str, ops.BatchNormState] = {}
    c_prev = cfg.channels_in
    for name in BLOCKS:
        spec = cfg.blocks[name]
        c_in = 2 * c_prev if name == "cb5" else c_prev
        fan_in = c_in * spec.kernel * spec.kernel
        arrays[f"{name}.conv.weight"] = (rng.standard_normal((spec.filters, c_in, spec.kernel, spec.kernel))
                                         * np.sqrt(2.0 / fan_in)).astype(dt)
        arrays[f"{name}.conv.bias"] = np.zeros(spec.filters, dt)
        arrays[f"{name}.bn.gamma"] = np.ones(spec.filters, dt)
        arrays[f"{name}.bn.beta"] = np.zeros(spec.filters, dt)
        bn[f"{name}.bn"] = ops.BatchNormState(spec.filters, cfg.bn_momentum, cfg.bn_eps)
        c_prev = spec.filters
    for stage in cfg.matching_stages:
        for k, v in init_match_params(cfg.match[stage], rng, dt).items():
            arrays[f"match.{stage}.{k}"] = v
    fin = shapes["fcb_in"]
    arrays["fcb.fc1.weight"] = (rng.standard_normal((fin, cfg.fc_hidden)) * np.sqrt(2.0 / fin)).astype(dt)
    arrays["fcb.fc1.bias"] = np.zeros(cfg.fc_hidden, dt)
    arrays["fcb.fc2.weight"] = (rng.standard_normal((cfg.fc_hidden, 1)) * np.sqrt(2.0 / cfg.fc_hidden)).astype(dt)
    arrays["fcb.fc2.bias"] = np.zeros(1, dt)
    return ModelParams({k: Tensor._wrap(v) for k, v in arrays.items()}, bn)


# --------------------------------------------------------------------------- forward


def _block(x: Tensor, params: ModelParams, cfg: CFMNConfig, name: str, train: bool, weights=None) -> Tensor:
    spec = cfg.blocks[name]
    x = ops.conv2d(x, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"], padding=spec.padding, block=name)
    x = ops.batchnorm(x, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"], params.bn[f"{name}.bn"],
                      train, weights=weights, block=name)
    x = ops.relu(x)
    if spec.pool:
        x = ops.maxpool2d(x, 2, 2, block=name)
    return x


def _images(x, cfg: CFMNConfig, what: str) -> Tensor:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=cfg.np_dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != cfg.image_shape:
        raise ShapeError(f"{what}: expected images of shape {cfg.image_shape}, got {arr.shape[1:] if arr.ndim == 4 else arr.shape}")
    return Tensor._wrap(arr.copy())


@dataclass
class PairFeatures:
    """Extractor outputs for every (query, support) pair, pair index ``qi * n_support + sj``."""

    query: Tensor
    support: Tensor
    n_query: int
    n_support: int
    attention: dict[str, Tensor]


def extract_pairs(
    params: ModelParams,
    cfg: CFMNConfig,
    queries,
    supports,
    train: bool = False,
    trace: dict | None = None,
) -> PairFeatures:
    q = _images(queries, cfg, "query")
    s = _images(supports, cfg, "support")
    nq, ns = q.shape[0], s.shape[0]
    pair_q = np.repeat(np.arange(nq), ns)
    pair_s = np.tile(np.arange(ns), nq)
    paired = False
    attn: dict[str, Tensor] = {}
    for stage in EXTRACTOR:
        x = ops.concat([s, q], axis=0)
        weights = None
        if train:
            weights = np.concatenate([np.full(ns, nq), np.ones(nq * ns) if paired else np.full(nq, ns)])
        y = _block(x, params, cfg, stage, train, weights)
        s, q = ops.slice_batch(y, 0, ns), ops.slice_batch(y, ns, y.shape[0])
        if trace is not None:
            trace[stage] = s.shape[1:]
        if stage in cfg.matching_stages:
            if not paired:
                q, paired = ops.take(q, pair_q), True
            q, h = match(q, ops.take(s, pair_s), params.scoped(f"match.{stage}."), cfg.match[stage], stage)
            if h is not None:
                attn[stage] = h
    if not paired:
        q = ops.take(q, pair_q)
    return PairFeatures(q, ops.take(s, pair_s), nq, ns, attn)


def metric_head(z: Tensor, params: ModelParams, cfg: CFMNConfig, train: bool = False, trace: dict | None = None) -> Tensor:
    """Concatenated ``B x 2C x H x W`` features -> ``B`` similarities in (0, 1)."""
    for name in HEAD:
        z = _block(z, params, cfg, name, train)
        if trace is not None:
            trace[name] = z.shape[1:]
    z = ops.flatten(z)
    if trace is not None:
        trace["fcb_in"] = z.shape[1]
    z = ops.relu(ops.fully_connected(z, params["fcb.fc1.weight"], params["fcb.fc1.bias"]))
    z = ops.sigmoid(ops.fully_connected(z, params["fcb.fc2.weight"], params["fcb.fc2.bias"]))
    return ops.reshape(z, (z.shape[0],))


def forward_scores(
    params: ModelParams,
    cfg: CFMNConfig,
    queries,
    supports,
    groups: Sequence[Sequence[int]],
    train: bool = False,
    trace: dict | None = None,
    keep_attention: dict | None = None,
) -> Tensor:
    """Scores ``Q x N``: entry ``(i, c)`` compares query ``i`` with the support images in ``groups[c]``.

    The concatenated pair features of a group are averaged before the head.
    """
    if not groups or any(len(g) == 0 for g in groups):
        raise ProtocolError("every class needs at least one support image")
    feats = extract_pairs(params, cfg, queries, supports, train, trace)
    if keep_attention is not None:
        keep_attention.update(feats.attention)
    z = ops.concat_channels([feats.query, feats.support])
    if trace is not None:
        trace["co"] = z.shape[1:]
    ns = feats.n_support
    items = [[qi * ns + j for j in g] for qi in range(feats.n_query) for g in groups]
    if any(len(g) > 1 for g in groups) or [i[0] for i in items] != list(range(z.shape[0])):
        z = ops.group_mean(z, items)
    scores = metric_head(z, params, cfg, train, trace)
    return ops.reshape(scores, (feats.n_query, len(groups)))


# --------------------------------------------------------------------------- public per-image API


def extract_pair(query_img, support_img, params: ModelParams, cfg: CFMNConfig, train: bool = False) -> tuple[Tensor, Tensor]:
    """Final extractor features ``(C x H x W)`` of the query conditioned on one support image."""
    f = extract_pairs(params, cfg, query_img, support_img, train)
    return ops.reshape(f.query, f.query.shape[1:]), ops.reshape(f.support, f.support.shape[1:])


def score_pair(q_feat, s_feat, params: ModelParams, cfg: CFMNConfig, train: bool = False) -> float:
    q = q_feat if isinstance(q_feat, Tensor) else Tensor(q_feat, dtype=cfg.np_dtype)
    s = s_feat if isinstance(s_feat, Tensor) else Tensor(s_feat, dtype=cfg.np_dtype)
    if q.shape != s.shape:
        raise ShapeError(f"score_pair: query {q.shape} vs support {s.shape}")
    z = ops.concat_channels([q, s])
    return metric_head(ops.reshape(z, (1,) + z.shape), params, cfg, train).item()


def _class_groups(labels: Sequence[int], k_shot: int | None = None) -> list[list[int]]:
    n = max(labels) + 1 if labels else 0
    groups: list[list[int]] = [[] for _ in range(n)]
    for i, c in enumerate(labels):
        if c < 0:
            raise ProtocolError(f"negative class index {c}")
        groups[c].append(i)
    sizes = {len(g) for g in groups}
    if len(sizes) != 1 or 0 in sizes:
        raise ProtocolError(f"uneven support: per-class counts {[len(g) for g in groups]}")
    if k_shot is not None and sizes != {k_shot}:
        raise ProtocolError(f"expected {k_shot} supports per class, got {sizes.pop()}")
    return groups


def classify_episode(query_img, support: Sequence[tuple], params: ModelParams, cfg: CFMNConfig,
                     train: bool = False) -> Tensor:
    """N scores for one query; ``support`` holds ``(image, class_idx)`` with K images per class."""
    imgs = np.stack([np.asarray(img) for img, _ in support])
    groups = _class_groups([int(c) for _, c in support])
    return ops.reshape(forward_scores(params, cfg, query_img, imgs, groups, train), (len(groups),))


def multilabel_groups(labels: Sequence[Sequence], sampled: Sequence) -> list[list[int]]:
    groups = []
    for c in sampled:
        g = [i for i, ls in enumerate(labels) if c in ls]
        if not g:
            raise ProtocolError(f"class {c!r} has no supporting image")
        groups.append(g)
    return groups


def classify_multilabel(query_img, support: Sequence[tuple], sampled_classes: Sequence, params: ModelParams,
                        cfg: CFMNConfig, train: bool = False) -> Tensor:
    """N scores; class ``c`` averages every support whose label set contains ``c``."""
    imgs = np.stack([np.asarray(img) for img, _ in support])
    groups = multilabel_groups([set(ls) for _, ls in support], sampled_classes)
    return ops.reshape(forward_scores(params, cfg, query_img, imgs, groups, train), (len(groups),))


def save_config(cfg: CFMNConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json())


def load_config(path: str | Path) -> CFMNConfig:
    return CFMNConfig.from_json(Path(path).read_text())
