"""Command line for sparseft: profile, train, cdf, bsr and presets subcommands."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import format_report, run_profile
from .config import SparsityConfig, load_presets, preset
from .errors import ConfigError, NonFiniteError
from .ffn import bsr_mask_bytes
from .train import (
    activation_cv,
    gen_random_sequences,
    iter_metrics_lines,
    report_attention_cdf,
    run_train,
    toy_model,
)


def _add_sparsity(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=0.125, help="kept fraction of attention weights")
    p.add_argument("--beta", type=float, default=0.5, help="active fraction of FFN groups")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseft", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="count flops and bytes for one preset block")
    p.add_argument("--name", required=True, help="block preset, e.g. opt-2048")
    p.add_argument("--tuning", choices=("full", "lora", "sparse"), default="sparse")
    p.add_argument("--module", choices=("mha", "ffn", "both"), default="both")
    p.add_argument("--d_lora", type=int, default=16)
    p.add_argument("--seq_length", type=int, default=512)
    p.add_argument("--batch_size", type=int, default=16)
    p.add_argument("--backward", action="store_true")
    p.add_argument("--causal", action="store_true", help="apply the look-ahead mask")
    _add_sparsity(p)
    p.add_argument("--out", type=Path, help="write the JSON report here")
    p.add_argument("--json", action="store_true", help="print JSON instead of the table")

    t = sub.add_parser("train", help="train a toy 2-block model on the copy task")
    t.add_argument("--mode", choices=("dense", "full", "lora", "sparse"), default="sparse")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--batch_size", type=int, default=16)
    t.add_argument("--seq_length", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--balance_coef", type=float, default=None)
    t.add_argument("--every", type=int, default=10, help="print every N steps")
    _add_sparsity(t)

    c = sub.add_parser("cdf", help="attention concentration of a (briefly trained) toy model")
    c.add_argument("--steps", type=int, default=0)
    c.add_argument("--seq_length", type=int, default=64)
    c.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bsr", help="bytes of per-token block-sparse masks (arithmetic only)")
    b.add_argument("--batch_size", type=int, default=16)
    b.add_argument("--seq_length", type=int, default=512)
    b.add_argument("--name", default="opt-2048")
    b.add_argument("--G", type=int, default=4)

    sub.add_parser("presets", help="list block presets")
    return parser


def _profile(args) -> int:
    report = run_profile(
        args.name,
        args.tuning,
        args.module,
        d_lora=args.d_lora,
        seq_length=args.seq_length,
        batch_size=args.batch_size,
        backward=args.backward,
        lam=args.lam,
        beta=args.beta,
        seed=args.seed,
        causal=args.causal,
    )
    text = report.to_json()
    print(text, end="") if args.json else print(format_report(report))
    if args.out:
        args.out.write_text(text)
    return 0


def _train(args) -> int:
    sc = SparsityConfig(lam=args.lam, beta=args.beta)
    model = toy_model(args.mode, sc, seed=args.seed)

    def show(rec):
        if rec.step == 1 or rec.step % args.every == 0 or rec.step == args.steps:
            print(next(iter_metrics_lines([rec])), flush=True)

    history = run_train(
        model, args.steps, args.batch_size, args.seq_length, args.lr, args.seed, args.balance_coef, callback=show
    )
    if history[-1].router_counts:
        print(f"activation_cv={activation_cv(history):.4f}")
    return 0


def _cdf(args) -> int:
    model = toy_model("dense", seed=args.seed)
    if args.steps:
        run_train(model, args.steps, seq_length=args.seq_length, seed=args.seed)
    tokens = gen_random_sequences(4, args.seq_length, seed=args.seed + 1, vocab=model.vocab).tokens
    print(f"{'top share':>10}{'mass':>10}")
    for p, m in report_attention_cdf(model, tokens):
        print(f"{p:>10.2f}{m:>10.4f}")
    return 0


def _bsr(args) -> int:
    cfg = preset(args.name)
    n = bsr_mask_bytes(args.batch_size, args.seq_length, cfg.d_model, cfg.d_ffn, args.G)
    print(f"{n} bytes ({n / 1e9:.1f} GB) for [{args.batch_size}, {args.seq_length}] tokens on {args.name}")
    return 0


def _presets(args) -> int:
    for name, cfg in load_presets().items():
        print(f"{name:<12} d_model={cfg.d_model} d_head={cfg.d_head} d_ffn={cfg.d_ffn} activation={cfg.activation}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"profile": _profile, "train": _train, "cdf": _cdf, "bsr": _bsr, "presets": _presets}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        parser.error(str(exc))
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
