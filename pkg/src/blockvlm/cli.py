"""Command-line entry point: ``blockvlm {train,generate,eval,bench-steps,bench-dynamic,data}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``BLOCKVLM_THREADS``
caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import masks
from .bench import bench_dynamic, bench_row, bench_steps, evaluate, write_csv
from .data import GridImage, Tokenizer, gen_dataset, load_dataset, save_dataset
from .decoding import Static, generate, generate_ar, parse_strategy, validate_strategy
from .model import init_params, load_checkpoint
from .training import (build_ar_vlm, load_config, pipeline_from_ar_lm, pipeline_from_ar_vlm,
                       pretrain_text_ar, save_stage, train_stage)

logger = logging.getLogger("blockvlm")


class UsageError(Exception):
    pass


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockvlm", description="Block-diffusion toy VLM: train, decode, benchmark.")
    parser.add_argument("--dump-mask", metavar="KIND:P,L,D",
                        help="print an attention mask (causal|full|block|hybrid) as a '.'/'#' grid and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="run a training stage or pipeline from a key=value config")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")

    p = sub.add_parser("generate", help="decode a caption for one grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="flat row-major color indices, e.g. 0,1,2,3,0,1,2,3,0")
    p.add_argument("--prompt", default="describe the grid")
    p.add_argument("--strategy", help="static:S or dynamic:TAU (default static with S = block size)")
    p.add_argument("--max-blocks", type=int, default=16)
    p.add_argument("--ar", action="store_true", help="plain next-token decoding instead of block decoding")
    p.add_argument("--trace", action="store_true", help="print one line per denoise step")

    for name, help_text in (("eval", "score a checkpoint on a dataset"),
                            ("bench-steps", "static-steps sweep to CSV"),
                            ("bench-dynamic", "dynamic-threshold sweep to CSV")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset JSONL")
        p.add_argument("--split", default="val", choices=["val", "train", "all"])
        p.add_argument("--limit", type=int, default=0)
        if name == "eval":
            p.add_argument("--strategy")
            p.add_argument("--ar", action="store_true")
        elif name == "bench-steps":
            p.add_argument("--steps", default="1,2,4,8")
            p.add_argument("--out", help="CSV path (stdout when omitted)")
        else:
            p.add_argument("--thresholds", default="0,0.5,0.7,0.9,0.95,1")
            p.add_argument("--out", help="CSV path (stdout when omitted)")

    p = sub.add_parser("data", help="write a synthetic grid-caption dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--colors", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    return parser


def _dump_mask(spec: str) -> None:
    kind, _, dims = spec.partition(":")
    try:
        values = [int(v) for v in dims.split(",")]
    except ValueError:
        raise UsageError(f"bad --dump-mask value {spec!r}") from None
    if len(values) == 2:
        values.append(1)
    if len(values) != 3:
        raise UsageError("--dump-mask expects KIND:P,L[,D]")
    try:
        print(masks.render(masks.build(kind, *values)))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _strategy(text, params):
    try:
        strategy = parse_strategy(text) if text else Static(params.config.block_size)
        validate_strategy(strategy, params.config.block_size)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    return strategy


def _samples(args):
    samples = load_dataset(args.data)
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if args.limit:
        samples = samples[: args.limit]
    return samples


def cmd_train(args) -> int:
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        config = load_config(args.config)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.seed is not None:
        config.seed = args.seed
    if args.out_dir:
        config.out_dir = args.out_dir
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def evaluator(params, val, mode):
        if not val:
            return {}
        strategy = parse_strategy(config.eval_strategy) if config.eval_strategy and mode == "block" else None
        return evaluate(params, val, mode, strategy)

    if config.pipeline == "stage":
        train, val = config.load_data()
        params = load_checkpoint(config.base_checkpoint) if config.base_checkpoint else init_params(
            config.model_config(), config.seed)
        params, record = train_stage(params, config.stage_config(config.stage), train)
        save_stage(params, record, out, config.stage.lower())
        records = [record]
        final = record
    elif config.pipeline == "pretrain_text":
        _, final = pretrain_text_ar(config)
        records = [final]
    elif config.pipeline == "ar_vlm":
        records = build_ar_vlm(config).records
        final = records[-1]
    elif config.pipeline == "from_ar_lm":
        res = pipeline_from_ar_lm(config, evaluator if config.eval_limit else None)
        final = res.records[-1]
        records = res.records + [res.branches["FinetuneAR"][1]]
    elif config.pipeline == "from_ar_vlm":
        # block-size ablation: one row per D, decoded with the default S = D
        res = pipeline_from_ar_vlm(config)
        _, val = config.load_data()
        rows = []
        for params, rec in res.branches.values():
            row = bench_row(params, val, Static(params.config.block_size))
            rec.metrics = dataclasses.asdict(row)
            rows.append(row)
        write_csv(rows, out / "block_sizes.csv")
        records = [rec for _, rec in res.branches.values()]
        final = records[-1]
    else:
        raise UsageError(f"unknown pipeline {config.pipeline!r}")
    final.write_loss_csv(out / "loss.csv")
    summary = [{"stage": r.stage, "checkpoint": r.checkpoint, "final_loss": r.losses[-1], "metrics": r.metrics}
               for r in records]
    (out / "run.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    for entry in summary:
        print(json.dumps(entry))
    return 0


def cmd_generate(args) -> int:
    params = load_checkpoint(args.checkpoint)
    tokenizer = Tokenizer(vocab_size=params.config.vocab_size)
    try:
        image = GridImage.from_flat(_int_list(args.image), params.config.n_colors)
        prompt = [tokenizer.bos_id] + tokenizer.tokenize(args.prompt)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.ar:
        res = generate_ar(params, image, prompt, args.max_blocks * params.config.block_size, tokenizer)
    else:
        strategy = _strategy(args.strategy, params)
        hook = (lambda e: print("trace " + e.format(), flush=True)) if args.trace else None
        res = generate(params, image, prompt, strategy, args.max_blocks, tokenizer, on_step=hook)
    print(res.text)
    print(res.stats.line() + f" truncated={int(res.truncated)}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    samples = _samples(args)
    if not samples:
        raise UsageError("evaluation set is empty")
    mode = "ar" if args.ar else "block"
    strategy = None if args.ar else _strategy(args.strategy, params)
    print(json.dumps(evaluate(params, samples, mode, strategy)))
    return 0


def _emit(rows, out):
    if out:
        write_csv(rows, out)
    else:
        write_csv(rows, sys.stdout)


def cmd_bench_steps(args) -> int:
    params = load_checkpoint(args.checkpoint)
    samples = _samples(args)
    if not samples:
        raise UsageError("evaluation set is empty")
    steps = _int_list(args.steps)
    for s in steps:
        _strategy(f"static:{s}", params)
    _emit(bench_steps(params, samples, steps), args.out)
    return 0


def cmd_bench_dynamic(args) -> int:
    params = load_checkpoint(args.checkpoint)
    samples = _samples(args)
    if not samples:
        raise UsageError("evaluation set is empty")
    thresholds = _float_list(args.thresholds)
    for t in thresholds:
        _strategy(f"dynamic:{t}", params)
    _emit(bench_dynamic(params, samples, thresholds), args.out)
    return 0


def cmd_data(args) -> int:
    try:
        samples = gen_dataset(args.n, args.grid, args.colors, args.seed, args.val_fraction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(samples, args.out)
    return 0


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "bench-steps": cmd_bench_steps,
    "bench-dynamic": cmd_bench_dynamic,
    "data": cmd_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("BLOCKVLM_THREADS")
    try:
        with threadpool_limits(limits=int(threads) if threads else None):
            if args.dump_mask:
                _dump_mask(args.dump_mask)
                return 0
            if not args.command:
                parser.print_usage(sys.stderr)
                return 2
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"blockvlm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logger.debug("command failed", exc_info=True)
        print(f"blockvlm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
