"""Acceptance criteria, one test each; a pass/fail line per criterion is printed in the run summary."""

import time

import numpy as np

from cfmn.datagen import expand_variations, gen_synthetic_glyphs, make_variation
from cfmn.episodes import FS_COCO_TEST, FS_COCO_TRAIN, FS_COCO_VAL, sample_episode, split_by_counts
from cfmn.evaluation import EvalProtocol, ci95, evaluate, multilabel_metrics
from cfmn.gradsuite import run_suite
from cfmn.matching import MatchBlockConfig, apply_matching, compute_attention, init_match_params
from cfmn.model import forward_scores, init_params, make_config, trace_shapes
from cfmn.tensor import no_record
from cfmn.trainer import TrainConfig, train_loop

from conftest import ACCEPTANCE, warm_up
from test_matching import oracle_attention, oracle_match

# the 80 COCO detection categories, written out independently of the split lists
COCO80 = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
]


def record(n, title, ok, detail):
    ACCEPTANCE[n] = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    print(ACCEPTANCE[n])
    assert ok, ACCEPTANCE[n]


# --------------------------------------------------------------------------- 1


def test_c1_gradient_suite():
    t0 = time.perf_counter()
    reports = [r for seed in range(20) for r in run_suite(seed, eps=1e-5, tol=1e-4)]
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_error)
    names = {r.name for r in reports}
    ok = all(r.passed for r in reports) and "matching_block" in names and elapsed < 120
    record(1, "finite-difference gradients", ok,
           f"{len(names)} ops x 20 seeds, worst {worst.name} {worst.max_error:.2e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------- 2

DEFAULT_SHAPES = {"cb1": (64, 41, 41), "cb2": (64, 19, 19), "cb3": (64, 19, 19), "cb4": (64, 19, 19),
         "co": (128, 19, 19), "cb5": (64, 8, 8), "cb6": (64, 3, 3), "fcb_in": 576}


def test_c2_shape_fidelity():
    cfg = make_config()
    params = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    trace = {}
    with no_record():
        forward_scores(params, cfg, rng.random((1, 3, 84, 84)), rng.random((1, 3, 84, 84)), [[0]], True, trace)
    ok = trace == DEFAULT_SHAPES and trace_shapes(cfg) == DEFAULT_SHAPES
    record(2, "traced 84x84x3 shapes", ok, ", ".join(f"{k}={v}" for k, v in trace.items()))


# --------------------------------------------------------------------------- 3


def test_c3_attention_invariants():
    rng = np.random.default_rng(3)
    worst_row = worst_oracle = 0.0
    passthrough = True
    for i in range(1000):
        C = int(rng.integers(2, 7))
        H, W = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cfg = MatchBlockConfig(c_in=C, c_m=int(rng.integers(1, 5)), lam=float(rng.uniform(0.05, 1.0)))
        p = init_match_params(cfg, rng, np.float64)
        for k in p:
            p[k] = rng.standard_normal(p[k].shape) * 0.5
        zq, zs = rng.standard_normal((C, H, W)) * 2, rng.standard_normal((C, H, W)) * 2
        h = compute_attention(zq, zs, p, cfg).matrix
        worst_row = max(worst_row, float(np.abs(h.sum(1) - 1).max()))
        if i % 10 == 0:  # nested-loop oracle on every tenth pair
            worst_oracle = max(worst_oracle, float(np.abs(h - oracle_attention(zq, zs, p, cfg)).max()),
                               float(np.abs(apply_matching(zq, zs, p, cfg).data - oracle_match(zq, zs, p, cfg)).max()))
        off = MatchBlockConfig(c_in=C, c_m=cfg.c_m, lam=0.0)
        passthrough &= apply_matching(zq, zs, p, off).data.tobytes() == zq.tobytes()
    ok = worst_row <= 1e-5 and worst_oracle <= 1e-6 and passthrough
    record(3, "attention invariants on 1000 pairs", ok,
           f"row-sum err {worst_row:.1e}, oracle err {worst_oracle:.1e}, lambda=0 bitwise {passthrough}")


# --------------------------------------------------------------------------- 4


def test_c4_relabel_equivariance():
    cfg = make_config(input_size=28, channels_in=1, filters=8, dtype="float64", n_way=5)
    params = warm_up(init_params(cfg, 4), cfg)
    index = gen_synthetic_glyphs(20, 6, 28, 4)
    exact = follows = 0
    worst = 0.0
    for e in range(100):
        rng = np.random.default_rng([4, e])
        ep = sample_episode(index, 5, 1, 1, rng)
        q = index.images(ep.queries)
        sup = index.images(ep.support_ids)
        groups = ep.groups()
        perm = rng.permutation(5)  # class c becomes label perm[c]
        relabeled = [None] * 5
        for c, g in enumerate(groups):
            relabeled[perm[c]] = g
        with no_record():
            base = forward_scores(params, cfg, q, sup, groups).data
            moved = forward_scores(params, cfg, q, sup, relabeled).data
        worst = max(worst, float(np.abs(moved[:, perm] - base).max()))
        exact += np.array_equal(moved[:, perm], base)
        follows += np.array_equal(moved.argmax(1), perm[base.argmax(1)])
    ok = exact == 100 and follows == 100
    record(4, "relabeling permutes scores", ok, f"exact {exact}/100, argmax {follows}/100, max diff {worst:.1e}")


# --------------------------------------------------------------------------- 5


def _overfit_run():
    index = gen_synthetic_glyphs(4, 20, 28, 5)
    cfg = make_config(input_size=28, channels_in=1, filters=16, dtype="float64", n_way=2)
    params = init_params(cfg, 0)
    tc = TrainConfig(way=2, shot=1, queries=5, max_episodes=500, val_every=10**6, plateau_window=10**6 - 1,
                     stop_window=10**6, seed=0)
    return train_loop(params, cfg, index, None, tc, validate=lambda p: 0.0)


def test_c5_overfit_smoke():
    t0 = time.perf_counter()
    a = _overfit_run()
    elapsed = time.perf_counter() - t0
    acc = np.array([r["train_acc"] for r in a.log])
    trailing = np.convolve(acc, np.ones(50) / 50, mode="valid")  # mean over the last 50 episodes
    hit = int(np.argmax(trailing >= 0.95)) + 50 if (trailing >= 0.95).any() else None
    b = _overfit_run()
    bitwise = np.array(a.losses()).tobytes() == np.array(b.losses()).tobytes()
    ok = hit is not None and hit <= 500 and elapsed < 300 and bitwise
    record(5, "2-way 1-shot overfit", ok,
           f"trailing-50 accuracy >= 0.95 at episode {hit}, best {trailing.max():.3f}, {elapsed:.1f}s, "
           f"repeat bitwise {bitwise}")


# --------------------------------------------------------------------------- 6

# desk-scale location task: 14 px glyphs moved anywhere on a 40 px canvas
ABLATION = dict(classes=60, test_classes=20, glyph=14, canvas=40, copies=5, filters=16, stages=("cb4",),
                episodes=1500, lr=1e-3, eval_episodes=100, seeds=range(5))


def _ablation_data():
    a = ABLATION
    base = gen_synthetic_glyphs(a["classes"], 4, a["glyph"], 123)
    return split_by_counts(expand_variations(base, "location", a["copies"], 7, a["canvas"]), 0, a["test_classes"])


def _ablation_score(data, lam, seed):
    a = ABLATION
    cfg = make_config(input_size=a["canvas"], channels_in=1, filters=a["filters"], lam=lam, dtype="float32",
                      matching_stages=a["stages"])
    tc = TrainConfig(way=5, shot=1, queries=3, lr=a["lr"], max_episodes=a["episodes"], val_every=10**6,
                     plateau_window=10**6 - 1, stop_window=10**6, seed=seed)
    res = train_loop(init_params(cfg, seed), cfg, data, None, tc, validate=lambda p: 0.0, train_split="train")
    protocol = EvalProtocol(way=10, shot=1, queries=5, episodes=a["eval_episodes"], reps=1, seed=99, split="test")
    return evaluate(res.last, data, protocol, cfg).mean


def test_c6_directional_ablation():
    data = _ablation_data()
    scores = {lam: [_ablation_score(data, lam, s) for s in ABLATION["seeds"]] for lam in (0.5, 0.0)}
    (m1, h1), (m0, h0) = ci95(scores[0.5]), ci95(scores[0.0])
    print("per-seed test accuracy", {k: [round(v, 3) for v in vs] for k, vs in scores.items()})
    ok = m1 > m0 and m1 - h1 > m0 + h0
    record(6, "matching on vs off, location task 10-way 1-shot", ok,
           f"lambda=0.5 {m1:.3f}+-{h1:.3f}, lambda=0 {m0:.3f}+-{h0:.3f}, margin {m1 - m0:+.3f}, "
           f"CIs {'disjoint' if m1 - h1 > m0 + h0 else 'overlap'}")


# --------------------------------------------------------------------------- 7


def _pixel_oracle_index():
    from cfmn.episodes import DatasetIndex, Item

    classes = [f"c{i}" for i in range(8)]
    items = [Item(np.full((1, 2, 2), c, dtype=np.float32), (classes[c],)) for c in range(8) for _ in range(25)]
    return DatasetIndex(items, classes)


def _oracle(queries, supports, groups, episode):
    sup = {int(supports[j, 0, 0, 0]): c for c, g in enumerate(groups) for j in g}
    out = np.zeros((len(queries), len(groups)))
    out[np.arange(len(queries)), [sup[int(q[0, 0, 0])] for q in queries]] = 1.0
    return out


def test_c7_protocol_arithmetic():
    rep = evaluate(_oracle, _pixel_oracle_index(), EvalProtocol(way=5, shot=1, queries=15, episodes=600, reps=10))
    mean, half = ci95([0.4, 0.6])
    hand = 1.96 * np.sqrt(((0.4 - 0.5) ** 2 + (0.6 - 0.5) ** 2) / 1) / np.sqrt(2)
    ok = (rep.classifications_per_rep == [45000] * 10 and rep.ci95 is not None and rep.ci95_pooled is not None
          and abs(mean - 0.5) <= 1e-9 and abs(half - hand) <= 1e-9)
    record(7, "45,000 classifications per repetition and CI", ok,
           f"per rep {rep.classifications_per_rep[0]}, ci95 {rep.ci95}, pooled {rep.ci95_pooled}, "
           f"example {mean:.3f}+-{half:.6f}")


# --------------------------------------------------------------------------- 8


def test_c8_multilabel_metrics():
    sets = [(np.array([0.9, 0.8, 0.7, 0.2]), np.array([1, 1, 0, 1])), (np.array([0.6, 0.1]), np.array([1, 1]))]
    m = multilabel_metrics(sets, 0.4)
    at = multilabel_metrics([(np.array([0.4, 0.41]), np.array([1, 1]))], 0.4)
    ok = ((m.tp, m.fp, m.fn) == (3, 1, 2) and abs(m.precision - 0.75) <= 1e-9 and abs(m.recall - 0.6) <= 1e-9
          and abs(m.f1 - 2 / 3) <= 1e-9 and (at.tp, at.fn) == (1, 1))
    record(8, "micro P/R/F1 and strict threshold", ok,
           f"P {m.precision:.4f} R {m.recall:.4f} F1 {m.f1:.6f}, score 0.4 negative {at.fn == 1}")


# --------------------------------------------------------------------------- 9


def test_c9_data_plumbing(tmp_path):
    tr, va, te = set(FS_COCO_TRAIN), set(FS_COCO_VAL), set(FS_COCO_TEST)
    split_ok = ((len(tr), len(va), len(te)) == (54, 11, 15) and not (tr & va or tr & te or va & te)
                and tr | va | te == set(COCO80))

    glyphs = gen_synthetic_glyphs(10, 5, 28, 9)
    translation_ok = rotation_ok = True
    for i in range(len(glyphs)):
        src = glyphs.image(i)[0]
        out = make_variation(src, "location", i)
        hits = [(r, c) for r in range(29) for c in range(29) if np.array_equal(out[r : r + 28, c : c + 28], src)]
        if hits:
            rest = out.copy()
            rest[hits[0][0] : hits[0][0] + 28, hits[0][1] : hits[0][1] + 28] = 1.0
            translation_ok &= bool(np.all(rest == 1.0))
        else:
            translation_ok = False
        rotation_ok &= np.array_equal(make_variation(src, "rotation", i, angle=0.0),
                                      make_variation(src, "size", i, size=50))

    cfg = make_config(input_size=28, channels_in=1, filters=8)
    params = warm_up(init_params(cfg, 9), cfg)
    params.save(tmp_path / "m.ckpt")
    restored = init_params(cfg, 10)
    restored.load_into(tmp_path / "m.ckpt")
    ckpt_ok = restored.equals(params)

    ok = split_ok and translation_ok and rotation_ok and ckpt_ok
    record(9, "data plumbing", ok, f"split 54/11/15 of 80 {split_ok}, translation {translation_ok}, "
           f"zero rotation {rotation_ok}, checkpoint bitwise {ckpt_ok}")
