"""Finite-difference checks of every differentiable op and the matching block."""

from __future__ import annotations

import numpy as np

from . import ops
from .gradcheck import CheckReport, grad_check
from .matching import MatchBlockConfig, init_match_params, match


def _bn_fn(train):
    def fn(x, g, b):
        st = ops.BatchNormState(x.shape[1])
        if not train:
            st.running_mean = np.array([0.3, -0.2, 0.1][: x.shape[1]])
            st.running_var = np.array([1.5, 0.7, 2.0][: x.shape[1]])
        return ops.batchnorm(x, g, b, st, train=train)

    return fn


def _match_case(rng):
    cfg = MatchBlockConfig(c_in=8, c_m=4, lam=0.5)
    p = init_match_params(cfg, rng, np.float64)
    # non-trivial biases and a restore map of normal magnitude
    for k in p:
        if k.endswith("bias"):
            p[k] = rng.standard_normal(p[k].shape) * 0.3
    p["out.weight"] = rng.standard_normal(p["out.weight"].shape) * 0.5
    names = sorted(p)

    def fn(zq, zs, *vals):
        return match(zq, zs, dict(zip(names, vals)), cfg)[0]

    return fn, [rng.standard_normal((8, 4, 4)), rng.standard_normal((8, 4, 4))] + [p[n] for n in names]


def op_cases(rng: np.random.Generator) -> list[tuple]:
    """(name, fn, inputs) for every differentiable op on small random shapes."""
    r = rng.standard_normal
    away = r((3, 4))
    away = np.where(np.abs(away) < 1e-3, 0.5, away)  # keep relu away from its kink
    grp = [[0, 2], [1], [2, 1, 0]]
    return [
        ("matmul", ops.matmul, [r((3, 3)), r((3, 3))]),
        ("matmul_batched", ops.matmul, [r((2, 3, 4)), r((2, 4, 2))]),
        ("row_softmax", ops.row_softmax, [r((3, 5))]),
        ("conv2d", lambda x, w, b: ops.conv2d(x, w, b, padding=1), [r((2, 2, 5, 5)), r((3, 2, 3, 3)), r(3)]),
        ("conv2d_stride2", lambda x, w: ops.conv2d(x, w, stride=2), [r((1, 2, 6, 6)), r((2, 2, 3, 3))]),
        ("conv2d_1x1", lambda x, w, b: ops.conv2d(x, w, b), [r((2, 3, 3, 3)), r((2, 3, 1, 1)), r(2)]),
        ("maxpool2d", lambda x: ops.maxpool2d(x, 2, 2), [r((2, 2, 5, 5))]),
        ("maxpool2d_overlap", lambda x: ops.maxpool2d(x, 3, 1), [r((1, 2, 4, 4))]),
        ("batchnorm_train", _bn_fn(True), [r((2, 3, 4, 4)), r(3), r(3)]),
        (
            "batchnorm_weighted",
            lambda x, g, b: ops.batchnorm(x, g, b, ops.BatchNormState(2), True, weights=[2, 1, 3]),
            [r((3, 2, 2, 2)), r(2), r(2)],
        ),
        ("batchnorm_eval", _bn_fn(False), [r((2, 2, 3, 3)), r(2), r(2)]),
        ("relu", ops.relu, [away]),
        ("sigmoid", ops.sigmoid, [r((3, 4))]),
        ("fully_connected", ops.fully_connected, [r((4, 6)), r((6, 3)), r(3)]),
        ("concat_channels", lambda a, b: ops.concat_channels([a, b]), [r((2, 2, 3, 3)), r((2, 1, 3, 3))]),
        ("elementwise_mean", lambda a, b, c: ops.elementwise_mean([a, b, c]), [r((2, 3)), r((2, 3)), r((2, 3))]),
        ("group_mean", lambda x: ops.group_mean(x, grp), [r((3, 2, 2))]),
        ("take", lambda x: ops.take(x, [0, 2, 2, 1, 0]), [r((3, 4))]),
        ("transpose_reshape", lambda x: ops.reshape(ops.transpose_last(x), (2, 6)), [r((2, 2, 3))]),
        ("scale_add", lambda a, b: ops.add(ops.scale(a, 0.3), b), [r((2, 2)), r((2, 2))]),
        ("mse_loss", lambda s: ops.mse_loss(s, np.eye(3)[:2]), [r((2, 3))]),
        ("matching_block", *_match_case(rng)),
    ]


def run_suite(seed: int, eps: float = 1e-5, tol: float = 1e-4) -> list[CheckReport]:
    rng = np.random.default_rng(1000 + seed)
    return [grad_check(fn, inputs, eps=eps, tol=tol, name=name, seed=seed) for name, fn, inputs in op_cases(rng)]


def format_table(reports: list[CheckReport]) -> str:
    width = max(len(r.name) for r in reports)
    lines = [f"{'op':<{width}}  max_rel_error  status"]
    for r in reports:
        lines.append(f"{r.name:<{width}}  {r.max_error:13.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
