"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error, 3 a
check that ran but did not pass (``grad-check``).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import CFMNError
from .checkpoint import CheckpointError

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- config files


def read_config(path: str | None) -> dict:
    """``{"model": {...}, "train": {...}}``; ``model`` holds either ``make_config``
    keyword arguments or a full serialized model config (with ``blocks``)."""
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or set(data) - {"model", "train"}:
        raise CFMNError(f"config {path}: expected an object with 'model' and/or 'train' sections")
    return data


def model_config(section: dict | None, **overrides):
    from .model import CFMNConfig, make_config

    section = dict(section or {})
    if "blocks" in section:
        cfg = CFMNConfig.from_dict(section)
        for k, v in overrides.items():
            if v is not None and getattr(cfg, k) != v:
                raise CFMNError(f"model config has {k}={getattr(cfg, k)} but the data needs {v}")
        return cfg
    section.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return make_config(**section)
    except TypeError as e:
        raise CFMNError(f"model config: {e}") from None


def _model_for_checkpoint(ckpt: str, config: str | None):
    from .model import init_params, load_config

    if config is not None:
        cfg = model_config(read_config(config).get("model"))
    else:
        side = Path(ckpt).with_name("model_config.json")
        if not side.exists():
            raise CFMNError(f"no --config given and {side} does not exist")
        cfg = load_config(side)
    params = init_params(cfg, 0)
    params.load_into(ckpt)
    return cfg, params


# --------------------------------------------------------------------------- commands


def cmd_train(a) -> int:
    from .episodes import load_dataset
    from .model import init_params
    from .trainer import TrainConfig, train_loop

    conf = read_config(a.config)
    data = load_dataset(a.data)
    if "train" not in data.splits or "val" not in data.splits:
        raise CFMNError(f"{a.data}: training needs 'train' and 'val' splits (found {sorted(data.splits)})")
    img = data.image(data.items_of(data.splits["train"][0])[0])
    tsec = dict(conf.get("train", {}))
    for key, val in (("way", a.way), ("shot", a.shot), ("max_episodes", a.episodes), ("seed", a.seed),
                     ("queries", a.queries)):
        if val is not None:
            tsec[key] = val
    tcfg = TrainConfig.from_dict(tsec)
    cfg = model_config(conf.get("model"), input_size=img.shape[-1], channels_in=img.shape[0])
    params = init_params(cfg, tcfg.seed)
    out = Path(a.out or "run")
    res = train_loop(params, cfg, data, data, tcfg, out_dir=out, train_split="train", val_split="val")
    print(json.dumps({"episodes": res.episodes, "best_val_acc": res.best_score, "out": str(out)}))
    return 0


def _protocol(a, multilabel: bool):
    from .evaluation import EvalProtocol

    kw = dict(way=a.way, shot=a.shot, queries=a.queries, episodes=a.episodes, reps=a.reps, seed=a.seed,
              threshold=a.threshold, split=a.split)
    return EvalProtocol(multilabel=multilabel, **{k: v for k, v in kw.items() if v is not None})


def cmd_eval(a, multilabel: bool = False) -> int:
    from .episodes import load_dataset
    from .evaluation import evaluate

    cfg, params = _model_for_checkpoint(a.ckpt, a.config)
    data = load_dataset(a.data)
    protocol = _protocol(a, multilabel)
    if protocol.split is not None and protocol.split not in data.splits:
        protocol = type(protocol)(**{**asdict(protocol), "split": None})
    report = evaluate(params, data, protocol, cfg, workers=a.workers)
    text = report.to_json()
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        (Path(a.out) / "report.json").write_text(text)
    print(text)
    return 0


def cmd_gen_glyphs(a) -> int:
    from .datagen import gen_synthetic_glyphs, rotate90_augment
    from .episodes import split_by_counts, write_image_folder

    index = gen_synthetic_glyphs(a.classes, a.per_class, a.size, a.seed or 0)
    if a.val or a.test:
        index = split_by_counts(index, a.val, a.test)
    if a.rot90:
        index = rotate90_augment(index)
    write_image_folder(index, a.out, a.format)
    print(json.dumps({"images": len(index), "classes": len(index.classes), "out": a.out}))
    return 0


def cmd_gen_variations(a) -> int:
    from .datagen import expand_variations
    from .episodes import load_dataset, write_image_folder

    index = expand_variations(load_dataset(a.data), a.kind, a.copies, a.seed or 0)
    write_image_folder(index, a.out, a.format)
    print(json.dumps({"images": len(index), "classes": len(index.classes), "kind": a.kind, "out": a.out}))
    return 0


def cmd_viz(a) -> int:
    from .episodes import to_chw
    from .imageio import read_image
    from .viz import export_attention

    cfg, params = _model_for_checkpoint(a.ckpt, a.config)
    try:
        pos = tuple(int(v) for v in a.pos.split(","))
        if len(pos) != 2:
            raise ValueError
    except ValueError:
        raise UsageError(f"--pos expects 'row,col', got {a.pos!r}") from None
    rec = export_attention(params, cfg, to_chw(read_image(a.query)), to_chw(read_image(a.support)), pos, a.k,
                           a.out or "attention")
    print(json.dumps(rec))
    return 0


def cmd_grad_check(a) -> int:
    from .gradsuite import format_table, run_suite

    reports = run_suite(a.seed or 0)
    print(format_table(reports))
    return 0 if all(r.passed for r in reports) else EXIT_CHECK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cfmn", description="Cascaded feature matching few-shot classifier")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="JSON config with 'model' and/or 'train' sections")
        if "data" in flags:
            sp.add_argument("--data", required=True, help="dataset directory or multi-label manifest")
        if "ckpt" in flags:
            sp.add_argument("--ckpt", required=True, help="checkpoint file")
        if "episodes" in flags:
            sp.add_argument("--way", type=int)
            sp.add_argument("--shot", type=int)
            sp.add_argument("--queries", type=int, help="queries per class")
            sp.add_argument("--episodes", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    t = sub.add_parser("train", help="episodic training")
    common(t, "config", "data", "episodes")

    for name in ("eval", "eval-multilabel"):
        e = sub.add_parser(name, help="episodic evaluation with confidence intervals")
        common(e, "config", "data", "ckpt", "episodes")
        e.add_argument("--reps", type=int)
        e.add_argument("--threshold", type=float)
        e.add_argument("--split", default="test", help="class split to sample from (default: test)")
        e.add_argument("--workers", type=int, default=1)

    g = sub.add_parser("gen-glyphs", help="write a synthetic glyph dataset")
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--size", type=int, default=28)
    g.add_argument("--val", type=int, default=0, help="classes held out for validation")
    g.add_argument("--test", type=int, default=0, help="classes held out for testing")
    g.add_argument("--rot90", action="store_true", help="add 90/180/270 degree rotated classes")
    g.add_argument("--format", choices=("pgm", "png"), default="pgm")
    common(g)

    v = sub.add_parser("gen-variations", help="expand a dataset with geometric variations")
    v.add_argument("--kind", choices=("location", "size", "rotation", "all"), required=True)
    v.add_argument("--copies", type=int, default=10)
    v.add_argument("--format", choices=("pgm", "png"), default="pgm")
    common(v, "data")

    z = sub.add_parser("viz-attention", help="export last-stage attention correspondences")
    common(z, "config", "ckpt")
    z.add_argument("--query", required=True)
    z.add_argument("--support", required=True)
    z.add_argument("--pos", required=True, help="query position 'row,col' on the last matching grid")
    z.add_argument("--k", type=int, default=5)

    c = sub.add_parser("grad-check", help="finite-difference check of every op")
    common(c)
    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "eval-multilabel": lambda a: cmd_eval(a, multilabel=True),
    "gen-glyphs": cmd_gen_glyphs,
    "gen-variations": cmd_gen_variations,
    "viz-attention": cmd_viz,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in ("gen-glyphs", "gen-variations") and not args.out:
            parser.error("--out is required")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (CFMNError, CheckpointError, OSError, json.JSONDecodeError, ValueError) as e:
        print(f"cfmn: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
