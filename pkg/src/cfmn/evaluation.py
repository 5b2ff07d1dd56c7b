"""Episodic evaluation with 95% confidence intervals and multi-label metrics."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .episodes import DatasetIndex, Episode, sample_episode, sample_multilabel_episode
from .errors import ConfigError, ProtocolError
from .model import CFMNConfig, ModelParams, forward_scores
from .tensor import no_record

Z95 = 1.96
EVAL_STREAM = 3

# (queries, supports, groups, episode) -> Q x N scores
Scorer = Callable[[np.ndarray, np.ndarray, list, Episode], np.ndarray]


@dataclass(frozen=True)
class EvalProtocol:
    way: int = 5
    shot: int = 1
    queries: int = 15
    episodes: int = 600
    reps: int = 10
    seed: int = 0
    threshold: float = 0.4
    multilabel: bool = False
    split: str | None = None

    def __post_init__(self):
        for name in ("way", "shot", "queries", "episodes", "reps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"evaluation {name} must be at least 1, got {getattr(self, name)}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


def ci95(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 1.96 * sample standard deviation / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(Z95 * v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class EvalReport:
    protocol: dict
    per_rep: list[float]
    per_rep_ci95: list[float]
    mean: float
    ci95: float  # per-repetition halfwidths, averaged
    ci95_pooled: float  # one halfwidth over every episode of every repetition
    classifications_per_rep: list[int]
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    no_positive_predictions: bool | None = None
    episodes: list[dict] = field(default_factory=list)

    def to_json(self, with_episodes: bool = False) -> str:
        d = asdict(self)
        if not with_episodes:
            d.pop("episodes")
        return json.dumps({k: v for k, v in d.items() if v is not None}, indent=1)


def model_scorer(params: ModelParams, cfg: CFMNConfig) -> Scorer:
    """Eval-mode scorer; batch-norm uses running statistics."""

    def score(queries, supports, groups, episode):
        with no_record():
            return forward_scores(params, cfg, queries, supports, groups, train=False).data

    return score


def _episode(index: DatasetIndex, p: EvalProtocol, rep: int, k: int) -> Episode:
    rng = np.random.default_rng([int(p.seed), EVAL_STREAM, rep, k])
    sampler = sample_multilabel_episode if p.multilabel else sample_episode
    return sampler(index, p.way, p.shot, p.queries, rng, p.split)


def _run_episode(scorer: Scorer, index: DatasetIndex, p: EvalProtocol, rep: int, k: int) -> dict:
    ep = _episode(index, p, rep, k)
    scores = np.asarray(scorer(index.images(ep.queries), index.images(ep.support_ids), ep.groups(), ep))
    if scores.shape != ep.targets.shape:
        raise ProtocolError(f"scorer returned {scores.shape}, episode needs {ep.targets.shape}")
    rec = {"rep": rep, "episode": k, "n": int(scores.shape[0])}
    if p.multilabel:
        pred = scores > p.threshold
        truth = ep.targets > 0.5
        rec.update(tp=int((pred & truth).sum()), fp=int((pred & ~truth).sum()), fn=int((~pred & truth).sum()))
        rec["accuracy"] = float(np.mean(pred == truth))
    else:
        correct = int((scores.argmax(1) == ep.targets.argmax(1)).sum())
        rec.update(correct=correct, accuracy=correct / scores.shape[0])
    return rec


def evaluate(model, index: DatasetIndex, protocol: EvalProtocol, cfg: CFMNConfig | None = None,
             workers: int = 1, keep_episodes: bool = False) -> EvalReport:
    """Run ``reps`` repetitions of ``episodes`` episodes.

    ``model`` is either :class:`ModelParams` (then ``cfg`` is required) or a
    scorer callable. Each episode has a fixed seed derived from
    (protocol seed, repetition, episode), so results do not depend on
    ``workers``.
    """
    if isinstance(model, ModelParams):
        if cfg is None:
            raise ConfigError("evaluate needs the model config alongside its parameters")
        scorer = model_scorer(model, cfg)
    else:
        scorer = model
    jobs = [(r, k) for r in range(protocol.reps) for k in range(protocol.episodes)]
    run = lambda job: _run_episode(scorer, index, protocol, *job)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]

    per_rep, per_rep_ci, counts = [], [], []
    for r in range(protocol.reps):
        accs = [rec["accuracy"] for rec in records if rec["rep"] == r]
        m, h = ci95(accs)
        per_rep.append(m)
        per_rep_ci.append(h)
        counts.append(sum(rec["n"] for rec in records if rec["rep"] == r))
    _, pooled = ci95([rec["accuracy"] for rec in records])
    report = EvalReport(
        protocol=asdict(protocol),
        per_rep=per_rep,
        per_rep_ci95=per_rep_ci,
        mean=float(np.mean(per_rep)),
        ci95=float(np.mean(per_rep_ci)),
        ci95_pooled=pooled,
        classifications_per_rep=counts,
        episodes=records if keep_episodes else [],
    )
    if protocol.multilabel:
        m = metrics_from_counts(sum(r["tp"] for r in records), sum(r["fp"] for r in records),
                                sum(r["fn"] for r in records))
        report.precision, report.recall, report.f1 = m.precision, m.recall, m.f1
        report.no_positive_predictions = m.no_positive_predictions
    return report


# --------------------------------------------------------------------------- multi-label


@dataclass(frozen=True)
class MultilabelMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    no_positive_predictions: bool


def metrics_from_counts(tp: int, fp: int, fn: int) -> MultilabelMetrics:
    none_predicted = tp + fp == 0
    precision = 0.0 if none_predicted else tp / (tp + fp)
    recall = 0.0 if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MultilabelMetrics(precision, recall, f1, tp, fp, fn, none_predicted)


def multilabel_metrics(score_sets, threshold: float = 0.4) -> MultilabelMetrics:
    """Micro-averaged precision, recall and F1; a score counts as positive only if above ``threshold``."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    tp = fp = fn = 0
    for scores, truth in score_sets:
        pred = np.asarray(scores) > threshold
        t = np.asarray(truth) > 0.5
        if pred.shape != t.shape:
            raise ProtocolError(f"scores {pred.shape} and truth {t.shape} differ")
        tp += int((pred & t).sum())
        fp += int((pred & ~t).sum())
        fn += int((~pred & t).sum())
    return metrics_from_counts(tp, fp, fn)
