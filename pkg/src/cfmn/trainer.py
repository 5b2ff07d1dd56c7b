"""Episodic MSE training with Adam, plateau decay with best-model reload, early stopping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import ops
from .episodes import DatasetIndex, episode_rng, sample_episode
from .errors import ConfigError, NonFiniteError
from .model import CFMNConfig, ModelParams, forward_scores
from .tensor import GradTape, Tensor, no_record

TRAIN_STREAM = 1
VAL_STREAM = 2


@dataclass
class TrainConfig:
    way: int = 5
    shot: int = 1
    queries: int = 15
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_window: int = 1500
    stop_window: int = 5000
    decay: float = 0.1
    val_every: int = 100
    val_episodes: int = 100
    val_way: int | None = None
    val_shot: int | None = None
    val_queries: int | None = None
    val_seed: int = 1234
    max_episodes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ConfigError(f"decay factor must lie in (0, 1), got {self.decay}")
        if self.plateau_window >= self.stop_window:
            raise ConfigError(f"plateau_window ({self.plateau_window}) must be below stop_window ({self.stop_window})")
        for name in ("way", "shot", "queries", "val_every", "val_episodes", "plateau_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def episode_loss(scores: Tensor, targets) -> Tensor:
    """Mean squared error over all ``Q x N`` entries."""
    return ops.mse_loss(scores, targets)


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    updates = {}
    for name, g in grads.items():
        p = params[name].data
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        updates[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.replace(updates)


def episode_batch(index: DatasetIndex, ep):
    return index.images(ep.queries), index.images(ep.support_ids), ep.groups()


def train_step(params: ModelParams, cfg: CFMNConfig, index: DatasetIndex, ep, state: AdamState, lr: float,
               tcfg: TrainConfig) -> tuple[float, float]:
    """Forward, loss, backward and Adam on one episode; returns (loss, episode accuracy)."""
    queries, supports, groups = episode_batch(index, ep)
    names = params.names()
    with GradTape() as tape:
        scores = forward_scores(params, cfg, queries, supports, groups, train=True)
        loss = episode_loss(scores, ep.targets.astype(cfg.np_dtype))
    grads = tape.gradient(loss, [params[n] for n in names])
    adam_step(params, dict(zip(names, grads)), state, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    acc = float(np.mean(scores.data.argmax(1) == ep.targets.argmax(1)))
    return loss.item(), acc


def validation_accuracy(params: ModelParams, cfg: CFMNConfig, index: DatasetIndex, tcfg: TrainConfig,
                        split: str | None = None) -> float:
    """Mean accuracy over the fixed validation block (same episodes every call)."""
    way = tcfg.val_way or tcfg.way
    shot = tcfg.val_shot or tcfg.shot
    q = tcfg.val_queries or tcfg.queries
    accs = []
    with no_record():
        for k in range(tcfg.val_episodes):
            ep = sample_episode(index, way, shot, q, episode_rng(tcfg.val_seed, k, VAL_STREAM), split)
            queries, supports, groups = episode_batch(index, ep)
            scores = forward_scores(params, cfg, queries, supports, groups, train=False).data
            accs.append(np.mean(scores.argmax(1) == ep.targets.argmax(1)))
    return float(np.mean(accs))


@dataclass
class TrainResult:
    best: ModelParams
    best_score: float
    last: ModelParams
    log: list[dict]
    episodes: int

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.log if r["loss"] is not None]


def train_loop(
    params: ModelParams,
    cfg: CFMNConfig,
    train_index: DatasetIndex,
    val_index: DatasetIndex | None,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    validate: Callable[[ModelParams], float] | None = None,
    train_split: str | None = None,
    val_split: str | None = None,
) -> TrainResult:
    """Train in place from ``params`` and return the best snapshot plus the log.

    Validation runs every ``val_every`` episodes; the first run sets the
    baseline. When the score has not improved for ``plateau_window`` episodes (counted from the
    later of the last improvement and the last decay) the best snapshot is
    reloaded and the learning rate multiplied by ``decay``. Training stops
    after ``stop_window`` episodes without improvement or at ``max_episodes``.
    """
    if validate is None:
        if val_index is None:
            raise ConfigError("train_loop needs a validation index or a validate callable")
        validate = lambda p: validation_accuracy(p, cfg, val_index, tcfg, val_split)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(asdict(tcfg), indent=1))
        (out / "model_config.json").write_text(cfg.to_json())
    log_file = open(out / "train_log.jsonl", "w") if out is not None else None

    log: list[dict] = []

    def record(**rec):
        log.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")

    state = AdamState()
    lr = tcfg.lr
    # Batch-norm has no running statistics before the first step, so the first
    # validation sets the baseline. Windows are counted from episode 0.
    best, best_score = params.copy(), None
    last_improve = last_decay = 0
    episode = 0
    try:
        while tcfg.max_episodes is None or episode < tcfg.max_episodes:
            ep = sample_episode(train_index, tcfg.way, tcfg.shot, tcfg.queries,
                                episode_rng(tcfg.seed, episode, TRAIN_STREAM), train_split)
            loss, acc = train_step(params, cfg, train_index, ep, state, lr, tcfg)
            episode += 1
            if episode % tcfg.val_every:
                record(episode=episode, loss=loss, train_acc=acc, val_acc=None, lr=lr, event=None)
                continue
            score = validate(params)
            if best_score is None:
                best_score, best = score, params.copy()
                record(episode=episode, loss=loss, train_acc=acc, val_acc=score, lr=lr, event="baseline")
                if out is not None:
                    best.save(out / "best.ckpt")
            elif score > best_score:
                best_score, best, last_improve = score, params.copy(), episode
                record(episode=episode, loss=loss, train_acc=acc, val_acc=score, lr=lr, event="improve")
                if out is not None:
                    best.save(out / "best.ckpt")
            elif episode - last_improve >= tcfg.stop_window:
                record(episode=episode, loss=loss, train_acc=acc, val_acc=score, lr=lr, event="stop")
                break
            elif episode - max(last_improve, last_decay) >= tcfg.plateau_window:
                lr *= tcfg.decay
                last_decay = episode
                restored = best.copy()
                params.tensors, params.bn = restored.tensors, restored.bn
                state = AdamState()
                record(episode=episode, loss=loss, train_acc=acc, val_acc=score, lr=lr, event="decay+reload")
            else:
                record(episode=episode, loss=loss, train_acc=acc, val_acc=score, lr=lr, event="validate")
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        params.save(out / "last.ckpt")
    return TrainResult(best, best_score, params, log, episode)
