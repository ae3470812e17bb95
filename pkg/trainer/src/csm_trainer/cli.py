"""Command-line interface: `csm-train supervised` and `csm-train end2end`.

Reads corpus + embedding files, trains, exports `.csmw` weights, and writes
a JSON training log with per-step loss components.
"""

from __future__ import annotations

import argparse
import sys

from csm_trainer.data import load_corpus, load_toy_corpus
from csm_trainer.toy import ToyGenerator
from csm_trainer.train import (
    TrainConfig,
    export_weights,
    train_end2end,
    train_supervised,
    write_log,
)


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="training corpus (JSON Lines)")
    p.add_argument("--embeddings", required=True, help="pair-embedding JSON Lines")
    p.add_argument("--out", required=True, help="output weight file (.csmw)")
    p.add_argument("--log", required=True, help="output training log (JSON)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--ffn-dim", dest="ffn_dim", type=int)
    p.add_argument("--mlp-hidden", dest="mlp_hidden", type=int)
    p.add_argument("--local-encoder", dest="local_encoder", default="bert-base-uncased")


def cmd_supervised(args: argparse.Namespace) -> int:
    config = TrainConfig(
        paradigm="supervised",
        epochs=args.epochs,
        batch_size=args.batch_size if args.batch_size else 16,
        beta=args.beta,
        tau=args.tau,
        lr=args.lr,
        seed=args.seed,
        ffn_dim=args.ffn_dim,
        mlp_hidden=args.mlp_hidden,
        local_encoder=args.local_encoder,
    )
    samples = load_corpus(args.corpus, args.embeddings)
    result = train_supervised(samples, config)
    export_weights(result.model, args.out)
    write_log(result.log, args.log)
    final = result.log[-1]
    print(f"supervised: {len(result.log) - 1} steps, final loss {final['combined']:.6f} -> {args.out}")
    return 0


def cmd_end2end(args: argparse.Namespace) -> int:
    config = TrainConfig(
        paradigm="end-to-end",
        epochs=args.epochs,
        batch_size=args.batch_size if args.batch_size else 4,
        lam=args.lam,
        gumbel_temperature=args.temperature,
        hard_mask=args.hard_mask,
        lr=args.lr,
        seed=args.seed,
        ffn_dim=args.ffn_dim,
        mlp_hidden=args.mlp_hidden,
        local_encoder=args.local_encoder,
    )
    samples = load_toy_corpus(args.corpus, args.embeddings)
    vocab = samples[0].votes.shape[1]
    generator = ToyGenerator(vocab)
    result = train_end2end(samples, generator, config)
    export_weights(result.model, args.out)
    write_log(result.log, args.log)
    final = [rec for rec in result.log if "combined" in rec][-1]
    print(f"end-to-end: final loss {final['combined']:.6f} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csm-train", description="Influence-scorer trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("supervised", help="regression on oracle influence targets")
    _add_shared(p)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_supervised)

    p = sub.add_parser("end2end", help="generator-in-the-loop soft selection")
    _add_shared(p)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--hard-mask", dest="hard_mask", action="store_true")
    p.set_defaults(func=cmd_end2end)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
