"""Command-line entry point: ``dcal gen-data | train | eval | attend | check``.

Exit codes: 0 success, 1 failed checks or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checks import run_checks
from .data import gen_synthetic, load_dataset, save_dataset
from .embedding import ImageSample
from .io import (
    METRICS_FILE,
    CheckpointError,
    RunConfig,
    export_attention_map,
    load_checkpoint,
    load_config,
    load_train_state,
    save_checkpoint,
    save_train_state,
    write_metrics,
)
from .model import MODES, ConfigError, forward_batch
from .pnm import PnmError
from .rollout import rollout
from .tensor import ShapeError
from .training import default_mode, evaluate_classification, evaluate_retrieval, train

log = logging.getLogger("dcal")


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_gen_data(args) -> int:
    run = _config(args.config)
    out = save_dataset(gen_synthetic(run.data, args.seed), args.out)
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    run = _config(args.config)
    cfg, hyper = run.model, run.hyper
    if args.seed is not None:
        hyper.seed = args.seed
    state = None
    if args.resume:
        state, cfg = load_train_state(args.resume)
        if args.seed is not None and args.seed != state.seed:
            raise UsageError(f"--seed {args.seed} conflicts with the resumed state's seed {state.seed}")
    dataset = load_dataset(args.data, cfg.num_classes)
    if dataset.train.images.shape[1:] != (cfg.image_height, cfg.image_width, cfg.channels):
        raise UsageError(f"dataset images {dataset.train.images.shape[1:]} do not match the model config")
    state = train(dataset, cfg, hyper, state=state, until_epoch=args.until_epoch)
    out = Path(args.out)
    save_checkpoint(out, state.params, cfg)
    save_train_state(args.state or out.with_name(out.name + ".state"), state, cfg)
    write_metrics(args.metrics or out.with_name(METRICS_FILE), state.history)
    last = state.history[-1] if state.history else None
    if last is not None:
        print(f"epoch={last.epoch} train_acc={last.train_acc!r} test_acc={last.test_acc!r}")
    return 0


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    mode = args.mode or default_mode(cfg)
    if mode != "sa" and not cfg.glca_blocks:
        raise UsageError(f"mode {mode} needs a GLCA block; this checkpoint has none")
    dataset = load_dataset(args.data, cfg.num_classes)
    split = getattr(dataset, args.split)
    if cfg.task == "retrieval":
        res = evaluate_retrieval(split, split, params, cfg, mode)
        if res.skipped:
            log.warning("%d queries had no match in the gallery and were skipped", res.skipped)
        print(f"map={res.map!r} rank1={res.rank1!r}")
    else:
        print(f"top1={evaluate_classification(split, params, cfg, mode)!r}")
    return 0


def cmd_attend(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    layer = cfg.glca_depth if args.layer is None else args.layer
    if not 1 <= layer <= cfg.depth:
        raise UsageError(f"--layer must lie in [1, {cfg.depth}], got {layer}")
    img = ImageSample.from_file(args.image)
    out = forward_batch(img.pixels[None], cfg, params)
    s_hat = rollout([a[0] for a in out.attention], upto=layer)
    export = export_attention_map(s_hat, cfg.grid, args.out, cfg.ratio)
    coords = " ".join(f"({r},{c})" for r, c in export.selected)
    print(f"wrote {args.out} selected={coords}" + (" degenerate" if export.degenerate else ""))
    return 0


def cmd_check(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    results = run_checks(cfg, params)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write a checkpoint plus metrics.tsv")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--resume", help="training-state file to continue from")
    p.add_argument("--until-epoch", type=int, help="stop after this epoch (schedule unchanged)")
    p.add_argument("--state", help="training-state output (default <out>.state)")
    p.add_argument("--metrics", help=f"metrics output (default {METRICS_FILE} next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attend", help="export the rollout attention map for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int)
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("check", help="run the invariant checks against a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except (CheckpointError, PnmError, ShapeError, OSError, ValueError) as exc:
        print(f"dcal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
