"""Command-line entry point: ``lrva <command> [--config PATH] [--seed N]
[--out DIR] [--override key=value ...]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a runtime invariant is violated.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from . import harness
from .augment import dataset_samples, make_generator
from .checkpoint import CheckpointError
from .config import load_config, parse_override
from .errors import ConfigError, InvariantViolation
from .tasks import save_png, write_lite_directory


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def _parse_list(text: str, cast=str) -> list:
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lrva", description="Frozen-backbone adaptation experiments on low-resource vision tasks.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic splits and the augmentation manifest in LITE layout")
    _common(p)

    p = sub.add_parser("train", help="train and write checkpoint.lrva, metrics.csv, train_log.csv")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _common(p, out_required=False)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("sweep", help="train one model per (axis value, seed)")
    _common(p)
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and trainable pathway")
    _common(p, out_required=False)
    p.add_argument("--n-seeds", type=int, default=20)

    p = sub.add_parser("ablation-ladder", help="host only, +aug, +subkernel, +domattn over several seeds")
    _common(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--singles", action="store_true", help="also train single-baseline rows")
    return parser


def _config(args):
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(parse_override(o) for o in args.override)
    if args.seed is not None:
        cfg = cfg.copy(seed=args.seed)
    return cfg


def _cmd_gen_data(args, cfg) -> None:
    if cfg["data.source"] == "lite":
        raise ConfigError("gen-data writes synthetic data; data.source must be glyph or maps")
    splits = harness.load_splits(cfg)
    for ds in (splits.train, splits.val, splits.test):
        write_lite_directory(args.out, ds)
    aug = harness.augmentation_config(cfg)
    aug_dir = os.path.join(args.out, "aug")
    os.makedirs(aug_dir, exist_ok=True)
    gen = make_generator(aug, splits.train)
    n = 0
    for s in dataset_samples(splits.train):
        stem = f"{s.source_id:05d}"  # matches write_lite_directory
        preserving, pairs = gen.generate(s, cfg["seed"])
        for i, p in enumerate(preserving):
            save_png(p.image, os.path.join(aug_dir, f"{stem}.preserving.{i}.png"))
        for i, pr in enumerate(pairs):
            save_png(pr.anchor, os.path.join(aug_dir, f"{stem}.breaking.{i}.png"))
            save_png(pr.positive, os.path.join(aug_dir, f"{stem}.positive.{i}.png"))
        n += len(preserving) + 2 * len(pairs)
    with open(os.path.join(args.out, "datasets.txt"), "w", encoding="utf-8") as fh:
        fh.write(harness.config_comment(cfg))
        fh.write(f"# datasets {splits.digests()}\n")
        fh.write(f"train={len(splits.train)} val={len(splits.val)} test={len(splits.test)} aug_images={n}\n")
    print(f"wrote {len(splits.train)}/{len(splits.val)}/{len(splits.test)} items and {n} augmentation images to {args.out}")


def _cmd_train(args, cfg) -> None:
    res = harness.train(cfg, args.out)
    print(f"best epoch {res.best_epoch}: val {res.val.primary():.2f} test {res.test.primary():.2f}")
    print(f"checkpoint {res.checkpoint}\nmetrics {res.csv}")


def _cmd_eval(args, cfg_or_none) -> None:
    model = harness.model_from_checkpoint(args.checkpoint, cfg_or_none)
    cfg = model.cfg
    dataset = getattr(harness.load_splits(cfg), args.split)
    rep = harness.evaluate_model(model, dataset, cfg["eval.bidirectional"])
    rows = [(args.split, k, v) for k, v in rep.rows()]
    for split, metric, value in rows:
        print(f"{split} {metric} {value:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        harness.write_metrics_csv(os.path.join(args.out, "eval.csv"), cfg, None, rows)


def _cmd_sweep(args, cfg) -> None:
    values = _parse_list(args.values)
    seeds = _parse_list(args.seeds, int)
    path = harness.sweep(cfg, args.axis, values, seeds, args.out)
    print(f"sweep {path}")


def _cmd_gradcheck(args, cfg) -> int:
    rep = harness.gradcheck_suite(range(args.n_seeds))
    for line in rep.lines():
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(rep.lines()) + "\n")
    if not rep.passed:
        raise InvariantViolation(f"gradient check failed: {', '.join(rep.failures())}")
    return 0


def _cmd_ladder(args, cfg) -> None:
    seeds = _parse_list(args.seeds, int)
    path, results = harness.ablation_ladder(cfg, seeds, args.out, singles=args.singles)
    for row, vals in results.items():
        print(f"{row}: mean test {sum(vals) / len(vals):.2f} over {len(vals)} seeds")
    print(f"ladder {path}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required (gen-data, train, eval, sweep, gradcheck, ablation-ladder)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.command == "eval":
            cfg = _config(args) if (args.config or args.override or args.seed is not None) else None
            _cmd_eval(args, cfg)
            return 0
        cfg = _config(args)
        handlers = {"gen-data": _cmd_gen_data, "train": _cmd_train, "sweep": _cmd_sweep,
                    "gradcheck": _cmd_gradcheck, "ablation-ladder": _cmd_ladder}
        handlers[args.command](args, cfg)
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, FileNotFoundError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except InvariantViolation as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
