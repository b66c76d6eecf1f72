"""Command-line entry point.

Every failure prints one JSON line ``{"error": <kind>, "message": <text>}``
to stderr and exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import generate_split, load_split, write_features, write_manifest
from .model import attention_flops
from .train import (
    RunConfig,
    convergence_ablation,
    dump_attention,
    evaluate,
    load_run_config,
    sweep_compression,
    sweep_query_ratio,
    tiny_grad_check,
    train,
    write_table,
)

GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    pass


def _config(path: str | None) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_gen_data(args) -> None:
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split in ("train", "val"):
        for seq in generate_split(cfg.data, split):
            write_features(out / f"{seq.video_id}.tpft", seq)
            entries.append((split, f"{seq.video_id}.tpft"))
    write_manifest(out / "manifest.txt", entries)
    print(f"manifest={out / 'manifest.txt'} videos={len(entries)}")


def cmd_train(args) -> None:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.out_dir:
        cfg.out_dir = args.out_dir
    result = train(cfg)
    print(f"checkpoint={result.checkpoint} best_epoch={result.best_epoch}")
    if result.best_val is not None:
        print(result.best_val.to_kv(), end="")


def cmd_eval(args) -> None:
    report = evaluate(args.checkpoint, load_split(args.data, args.split), args.gamma)
    print(report.to_csv() if args.format == "csv" else report.to_kv(), end="")


def cmd_flops(args) -> None:
    f = attention_flops(args.n, args.m, args.c, args.heads, args.layers)
    print(f"compressed={f.compressed} dense={f.dense} ratio={f.ratio!r}")


def cmd_gradcheck(args) -> None:
    if args.scale != "tiny":
        raise CliError(f"unsupported scale {args.scale!r}")
    err = tiny_grad_check(args.seed)
    print(f"max_rel_error={err!r} tolerance={GRADCHECK_TOLERANCE}")
    if not err <= GRADCHECK_TOLERANCE:
        raise CliError(f"gradient check failed: {err!r} > {GRADCHECK_TOLERANCE}")


def _emit(rows, columns, out) -> None:
    if out:
        write_table(out, rows, columns)
    print(",".join(columns))
    for row in rows:
        print(",".join(str(row[c]) for c in columns))


def cmd_sweep_m(args) -> None:
    cfg = _config(args.config)
    n = cfg.model.window
    ms = _ints(args.m) if args.m else [round(f * n) for f in (0.2, 0.35, 0.5, 0.75, 1.0)]
    _emit(sweep_compression(cfg, ms), ["M", "avg_f1", "flops"], args.out)


def cmd_sweep_k(args) -> None:
    cfg = _config(args.config)
    _emit(sweep_query_ratio(cfg, _ints(args.k)), ["K", "avg_f1"], args.out)


def cmd_ablate_align(args) -> None:
    cfg = _config(args.config)
    rows = convergence_ablation(cfg, args.target, _ints(args.seeds))
    columns = ["seed", "epochs_with_align", "epochs_without_align", "final_avg_f1_with_align", "final_avg_f1_without_align"]
    _emit(rows, columns, args.out)


def cmd_dump_attn(args) -> None:
    seqs = load_split(args.data, args.split)
    if not 0 <= args.video < len(seqs):
        raise CliError(f"video index {args.video} outside [0, {len(seqs)})")
    paths = dump_attention(args.checkpoint, seqs[args.video], args.out, args.window)
    for path in paths:
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="temporal-perceiver")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset and a manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train scorer and detector, save the best checkpoint")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--split", default="val")
    p.add_argument("--gamma", type=float)
    p.add_argument("--format", choices=("kv", "csv"), default="kv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="attention multiply-accumulate counts")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=1)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--scale", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-m", help="train one model per latent count M")
    p.add_argument("--config")
    p.add_argument("--m", help="comma-separated M values (default 0.2N,0.35N,0.5N,0.75N,N)")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_sweep_m)

    p = sub.add_parser("sweep-k", help="train one model per boundary-query count K")
    p.add_argument("--config")
    p.add_argument("--k", required=True, help="comma-separated K values")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("ablate-align", help="epochs to target f1 with and without the alignment loss")
    p.add_argument("--config")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate_align)

    p = sub.add_parser("dump-attn", help="export encoder cross-attention maps of one window")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--split", default="val")
    p.add_argument("--video", type=int, default=0)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one machine-readable line for any failure
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(message)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
