import numpy as np
import pytest

from cfmn import ops
from cfmn.errors import ConfigError, ProtocolError, ShapeError
from cfmn.gradcheck import grad_check
from cfmn.model import (
    CFMNConfig,
    ModelParams,
    _block,
    classify_episode,
    classify_multilabel,
    extract_pair,
    forward_scores,
    init_params,
    load_config,
    make_config,
    save_config,
    score_pair,
    trace_shapes,
)
from cfmn.tensor import GradTape, Tensor

from conftest import micro_config, warm_up

DEFAULT_SHAPES = {
    "cb1": (64, 41, 41),
    "cb2": (64, 19, 19),
    "cb3": (64, 19, 19),
    "cb4": (64, 19, 19),
    "co": (128, 19, 19),
    "cb5": (64, 8, 8),
    "cb6": (64, 3, 3),
    "fcb_in": 576,
}


def test_default_forward_reproduces_layer_shapes():
    cfg = make_config()
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    trace = {}
    scores = forward_scores(params, cfg, rng.random((1, 3, 84, 84)), rng.random((1, 3, 84, 84)), [[0]], True, trace)
    assert trace == DEFAULT_SHAPES
    assert trace_shapes(cfg) == DEFAULT_SHAPES
    assert cfg.fcb_in == 576
    assert params["fcb.fc1.weight"].shape == (576, 8)
    assert scores.shape == (1, 1)


def test_extract_pair_default_shapes():
    cfg = make_config(filters=64)
    params = init_params(cfg)
    rng = np.random.default_rng(1)
    q, s = extract_pair(rng.random((3, 84, 84)), rng.random((3, 84, 84)), params, cfg, train=True)
    assert q.shape == s.shape == (64, 19, 19)


def test_small_input_adjusts_head_padding():
    cfg = make_config(input_size=28, channels_in=1)
    assert cfg.blocks["cb5"].padding == cfg.blocks["cb6"].padding == 1
    assert trace_shapes(cfg)["cb4"] == (64, 5, 5)
    assert cfg.fcb_in == 64
    with pytest.raises(ConfigError):
        make_config(input_size=8)


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ConfigError, match="cb5"):
        make_config(matching_stages=("cb5",))
    from cfmn.matching import MatchBlockConfig

    cfg = make_config(input_size=28, channels_in=1, filters=8, lam=0.3, matching_stages=("cb3", "cb4"))
    with pytest.raises(ConfigError, match="c_in"):
        CFMNConfig.from_dict({**cfg.to_dict(), "match": {"cb3": MatchBlockConfig(c_in=5).to_dict()}})
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()


def _plain_extract(img, params, cfg):
    x = Tensor(np.asarray(img, dtype=cfg.np_dtype)[None])
    for b in ("cb1", "cb2", "cb3", "cb4"):
        x = _block(x, params, cfg, b, train=False)
    return x.data[0]


def test_no_matching_gives_plain_extractor(small_cfg):
    cfg = make_config(input_size=28, channels_in=1, filters=8, dtype="float64", matching_stages=())
    params = warm_up(init_params(cfg, 3), cfg)
    rng = np.random.default_rng(2)
    q_img = rng.random((1, 28, 28))
    q1, _ = extract_pair(q_img, rng.random((1, 28, 28)), params, cfg)
    q2, _ = extract_pair(q_img, rng.random((1, 28, 28)), params, cfg)
    assert q1.data.tobytes() == q2.data.tobytes()
    np.testing.assert_allclose(q1.data, _plain_extract(q_img, params, cfg), rtol=0, atol=1e-12)


def test_lambda_zero_everywhere_equals_no_matching():
    off = make_config(input_size=28, channels_in=1, filters=8, dtype="float64", matching_stages=())
    zero = make_config(input_size=28, channels_in=1, filters=8, dtype="float64", lam=0.0)
    p_off = warm_up(init_params(off, 4), off)
    p_zero = init_params(zero, 4)
    p_zero.tensors.update({k: v for k, v in p_off.tensors.items()})
    p_zero.bn = {k: v.copy() for k, v in p_off.bn.items()}
    rng = np.random.default_rng(5)
    q, s = rng.random((1, 28, 28)), rng.random((1, 28, 28))
    np.testing.assert_allclose(extract_pair(q, s, p_zero, zero)[0].data, extract_pair(q, s, p_off, off)[0].data,
                               rtol=0, atol=1e-12)


def test_score_pair_range_and_determinism(small_cfg):
    rng = np.random.default_rng(6)
    q, s = rng.standard_normal((8, 5, 5)), rng.standard_normal((8, 5, 5))
    a = warm_up(init_params(small_cfg, seed=11), small_cfg)
    b = warm_up(init_params(small_cfg, seed=11), small_cfg)
    sa, sb = score_pair(q, s, a, small_cfg), score_pair(q, s, b, small_cfg)
    assert 0.0 < sa < 1.0
    assert sa == sb
    with pytest.raises(ShapeError):
        score_pair(q, s[:, :4], a, small_cfg)


def test_k1_equals_independent_pair_scores(small_cfg, small_params):
    rng = np.random.default_rng(7)
    query = rng.random((1, 28, 28))
    sup = [(rng.random((1, 28, 28)), c) for c in range(3)]
    scores = classify_episode(query, sup, small_params, small_cfg).data
    for img, c in sup:
        qf, sf = extract_pair(query, img, small_params, small_cfg)
        assert scores[c] == pytest.approx(score_pair(qf, sf, small_params, small_cfg), abs=1e-12)


def test_duplicated_supports_match_one_shot(small_cfg, small_params):
    rng = np.random.default_rng(8)
    query = rng.random((1, 28, 28))
    imgs = [rng.random((1, 28, 28)) for _ in range(3)]
    one = classify_episode(query, [(im, c) for c, im in enumerate(imgs)], small_params, small_cfg).data
    two = classify_episode(query, [(im, c) for c, im in enumerate(imgs) for _ in range(2)], small_params, small_cfg).data
    np.testing.assert_allclose(two, one, rtol=0, atol=1e-12)


def test_relabeling_permutes_scores(small_cfg, small_params):
    rng = np.random.default_rng(9)
    query = rng.random((1, 28, 28))
    imgs = [rng.random((1, 28, 28)) for _ in range(3)]
    base = classify_episode(query, [(im, c) for c, im in enumerate(imgs)], small_params, small_cfg).data
    perm = [2, 0, 1]
    permuted = classify_episode(query, [(im, perm[c]) for c, im in enumerate(imgs)], small_params, small_cfg).data
    np.testing.assert_allclose(permuted[perm], base, rtol=0, atol=1e-12)


def test_uneven_support_is_protocol_error(small_cfg, small_params):
    img = np.zeros((1, 28, 28))
    with pytest.raises(ProtocolError, match="uneven"):
        classify_episode(img, [(img, 0), (img, 0), (img, 1)], small_params, small_cfg)


def test_scores_depend_only_on_own_class_without_matching():
    cfg = make_config(input_size=28, channels_in=1, filters=8, dtype="float64", matching_stages=(), n_way=3)
    params = warm_up(init_params(cfg, 12), cfg)
    rng = np.random.default_rng(10)
    query = rng.random((1, 28, 28))
    sup = [(rng.random((1, 28, 28)), c) for c in range(3)]
    before = classify_episode(query, sup, params, cfg).data
    sup[1] = (rng.random((1, 28, 28)), 1)
    after = classify_episode(query, sup, params, cfg).data
    assert after[1] != before[1]
    np.testing.assert_allclose(after[[0, 2]], before[[0, 2]], rtol=0, atol=1e-12)


def test_multilabel_reduces_to_single_label(small_cfg, small_params):
    rng = np.random.default_rng(11)
    query = rng.random((1, 28, 28))
    imgs = [rng.random((1, 28, 28)) for _ in range(3)]
    single = classify_episode(query, [(im, c) for c, im in enumerate(imgs)], small_params, small_cfg).data
    multi = classify_multilabel(query, [(im, {n}) for n, im in zip("abc", imgs)], list("abc"), small_params,
                                small_cfg).data
    np.testing.assert_allclose(multi, single, rtol=0, atol=1e-12)


def test_multilabel_support_contributes_to_every_label(small_cfg, small_params):
    rng = np.random.default_rng(12)
    query = rng.random((1, 28, 28))
    horse_and_dog, dog, cat = (rng.random((1, 28, 28)) for _ in range(3))
    support = [(horse_and_dog, {"horse", "dog"}), (dog, {"dog"}), (cat, {"cat"})]
    scores = classify_multilabel(query, support, ["horse", "dog", "cat"], small_params, small_cfg).data
    # dog's score is the head applied to the mean of both concatenated pair features
    from cfmn.model import extract_pairs, metric_head

    f = extract_pairs(small_params, small_cfg, query, np.stack([horse_and_dog, dog]))
    z = ops.concat_channels([f.query, f.support]).data.mean(axis=0, keepdims=True)
    expected = metric_head(Tensor(z), small_params, small_cfg).data[0]
    assert scores[1] == pytest.approx(expected, abs=1e-12)
    assert np.all((scores > 0) & (scores < 1))
    with pytest.raises(ProtocolError, match="zebra"):
        classify_multilabel(query, support, ["zebra"], small_params, small_cfg)


def test_extractor_weights_are_shared(small_cfg):
    params = init_params(small_cfg)
    names = params.names()
    assert not any("query" in n or "support" in n for n in names)
    assert len([n for n in names if n.startswith("cb1.conv.weight")]) == 1
    rng = np.random.default_rng(13)
    with GradTape() as tape:
        scores = forward_scores(params, small_cfg, rng.random((2, 1, 28, 28)), rng.random((3, 1, 28, 28)),
                                [[0], [1], [2]], train=True)
    w = params["cb1.conv.weight"]
    uses = [rec for rec in tape._records if any(t is w for t in rec[1])]
    assert len(uses) == 1  # a single conv pass serves both branches
    assert uses[0][0].shape[0] == 5
    (g,) = tape.gradient(scores, [w])
    assert np.any(g != 0)


def test_end_to_end_grad_check_micro():
    cfg = micro_config()
    params = init_params(cfg, seed=3)
    rng = np.random.default_rng(14)
    queries, supports = rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))
    targets = np.array([[1.0, 0.0], [0.0, 1.0]])
    names = params.names()

    def loss(*vals):
        p = ModelParams(dict(zip(names, vals)), {k: v.copy() for k, v in params.bn.items()})
        return ops.mse_loss(forward_scores(p, cfg, queries, supports, [[0], [1]], train=True), targets)

    rep = grad_check(loss, [params[n] for n in names], tol=1e-3, input_names=names)
    assert rep.passed, dict(zip(names, rep.errors))
