"""Command line: ``lcmf {gen-data,pretrain,finetune,eval,bench,flops}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .bench import cmd_bench, doubling_lengths, flops_table, format_table, write_bench_csv
from .config import ABLATIONS, RunConfig, load_config, write_config
from .data import gen_synthetic_vqa
from .tensor import ConfigurationError

log = logging.getLogger("lcmf")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="ini file with [model] and [train] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--ablate", nargs="*", choices=ABLATIONS, default=[], metavar="{" + ",".join(ABLATIONS) + "}")
    p.add_argument("--stable-mode", choices=("on", "off"))
    p.add_argument("--paper-literal", action="store_true", help="fusion attends to the other CLS token only")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcmf", description="Cross-modal selective-SSM toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic shapes VQA corpus")
    _common(g)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--image-side", type=int)
    g.add_argument("--val-fraction", type=float, default=0.25)
    g.add_argument("--video", action="store_true", help="write frame directories instead of single images")
    g.add_argument("--video-len", type=int, default=12)
    g.add_argument("--answers-k", type=int, default=16, help="size of the top-K answer vocabulary")

    for name, text in (("pretrain", "masked multimodal pretraining"), ("finetune", "answer classification")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--manifest", type=Path, required=True)
        p.add_argument("--epochs", type=int)
        if name == "finetune":
            p.add_argument("--checkpoint", type=Path, help="pretrained weights (optional)")

    e = sub.add_parser("eval", help="accuracy, per-type accuracy, mAA, parameters, FLOPs, latency")
    _common(e)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", help="evaluate only records with this split tag")

    b = sub.add_parser("bench", help="CMM vs attention scaling benchmark")
    _common(b)
    b.add_argument("--lengths", type=int, nargs="+", default=doubling_lengths())
    b.add_argument("--d-model", type=int, default=128)
    b.add_argument("--repeats", type=int, default=3)

    f = sub.add_parser("flops", help="per-module analytic FLOPs")
    _common(f)
    f.add_argument("--text-len", type=int, default=8)
    f.add_argument("--frames", type=int, default=1)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    model, train = cfg.model, cfg.train
    if args.ablate:
        model = model.ablated(*args.ablate)
    if args.stable_mode is not None:
        model = dataclasses.replace(model, stable_mode=args.stable_mode == "on")
    if args.paper_literal:
        model = dataclasses.replace(model, paper_literal=True)
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    return RunConfig(model, train)


def run(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "gen-data":
        if args.n < 1:
            raise UsageError("--n must be positive")
        side = args.image_side or cfg.model.image_side
        if side % cfg.model.patch_size:
            raise UsageError(f"--image-side {side} is not divisible by patch size {cfg.model.patch_size}")
        records = gen_synthetic_vqa(out, cfg.train.seed, args.n, side, args.val_fraction,
                                    video=args.video, video_len=args.video_len, answers_k=args.answers_k)
        write_config(cfg, out / "config.ini")
        print(f"wrote {len(records)} records to {out / 'manifest.jsonl'}")
        return 0

    if cmd in ("pretrain", "finetune", "eval"):
        from .data import load_manifest
        from .train import evaluate, finetune, pretrain

        if not args.manifest.exists():
            raise UsageError(f"manifest {args.manifest} not found")
        if not load_manifest(args.manifest, check_files=False):
            raise UsageError(f"manifest {args.manifest} is empty")
        if cmd == "pretrain":
            res = pretrain(cfg, args.manifest, out)
            print(f"checkpoint {res.checkpoint}\nmetrics {res.metrics}")
        elif cmd == "finetune":
            res = finetune(cfg, args.manifest, args.checkpoint, out)
            print(f"checkpoint {res.checkpoint}\nmetrics {res.metrics}")
        else:
            report = evaluate(cfg, args.checkpoint, args.manifest, args.split)
            (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            write_config(cfg, out / "config.ini")
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return 0

    if cmd == "bench":
        report = cmd_bench(args.lengths, args.d_model, args.repeats, cfg.model.heads, cfg.train.seed)
        write_bench_csv(report, out / "bench.csv")
        write_config(cfg, out / "config.ini")
        cmm_r, attn_r = report.doubling_ratios("cmm"), report.doubling_ratios("attn")
        if cmm_r and any(r != 2.0 for r in cmm_r):
            print(f"CMM FLOPs doubling ratios not exactly 2: {cmm_r}", file=sys.stderr)
            return 1
        print(report.summary())
        return 0

    if cmd == "flops":
        rows = flops_table(cfg.model, args.text_len, args.frames)
        (out / "flops.json").write_text(json.dumps(rows, indent=2) + "\n")
        write_config(cfg, out / "config.ini")
        print(format_table(rows))
        return 0
    raise UsageError(f"unknown command {cmd}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except (UsageError, ConfigurationError) as exc:
        parser.print_usage(sys.stderr)
        print(f"lcmf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure of a run maps to exit 1
        print(f"lcmf {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
