import numpy as np
import pytest

from cfmn.model import BlockSpec, CFMNConfig, forward_scores, init_params, make_config
from cfmn.tensor import no_record


def warm_up(params, cfg, seed=0, n=4):
    """One training-mode forward so batch-norm has running statistics."""
    rng = np.random.default_rng(seed)
    imgs = rng.random((n,) + cfg.image_shape)
    with no_record():
        forward_scores(params, cfg, imgs[: n // 2], imgs[n // 2 :], [[i] for i in range(n - n // 2)], train=True)
    return params


def micro_config(lam=0.5, stages=("cb2", "cb3", "cb4"), dtype="float64", **kw):
    blocks = {
        "cb1": BlockSpec(4, 3, 1, True),
        "cb2": BlockSpec(4, 3, 1, True),
        "cb3": BlockSpec(4, 3, 1, False),
        "cb4": BlockSpec(4, 3, 1, False),
        "cb5": BlockSpec(4, 3, 1, True),
        "cb6": BlockSpec(4, 3, 1, False),
    }
    from cfmn.matching import MatchBlockConfig

    match = {s: MatchBlockConfig(c_in=4, c_m=3, lam=lam) for s in stages}
    return CFMNConfig(input_size=8, channels_in=1, blocks=blocks, fc_hidden=3, matching_stages=stages,
                      match=match, dtype=dtype, **kw)


@pytest.fixture
def small_cfg():
    return make_config(input_size=28, channels_in=1, filters=8, dtype="float64", n_way=3)


@pytest.fixture
def small_params(small_cfg):
    return warm_up(init_params(small_cfg, seed=1), small_cfg)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
