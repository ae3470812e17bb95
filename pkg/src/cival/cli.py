"""Command-line interface.

Subcommands: value, build-dataset, score, select, curves, eval, spearman.
Configuration comes from an optional TOML file plus flag overrides; secrets
(API keys) come from environment variables. Exit codes: 0 success,
2 configuration error, 3 gateway failure, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from cival import harness
from cival.csm import (
    FileEmbeddings,
    MissingEmbeddingError,
    WeightFormatError,
    load_weights,
    score_contexts,
)
from cival.forge import ForgeConfig, forge_corpus
from cival.gateway import GatewayError
from cival.harness import ConfigError, DataError, RunConfig, build_gateway
from cival.metrics import MetricKind
from cival.types import InvariantError, SelectionResult, load_samples, write_samples
from cival.valuation import UtilityKind, select_positive, top_k_select, value_sample

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATEWAY = 3
EXIT_DATA = 4


def _config_from_args(
    args: argparse.Namespace,
    require_dataset: bool = True,
    require_backend: bool = True,
) -> RunConfig:
    base = RunConfig.from_toml(args.config) if args.config else RunConfig()
    overrides = {
        name: getattr(args, name, None)
        for name in (
            "dataset",
            "world",
            "backend",
            "endpoint",
            "model",
            "cache_dir",
            "utility",
            "metric",
            "scorer",
            "order",
            "top_k",
            "seed",
            "max_samples",
            "weights",
            "embeddings",
            "scores",
            "output_dir",
            "dedup",
        )
    }
    if getattr(args, "strategies", None):
        overrides["strategies"] = tuple(args.strategies.split(","))
    return base.override(**overrides).validate(
        require_dataset=require_dataset, require_backend=require_backend
    )


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override its keys")
    p.add_argument("--dataset", help="input samples (JSON Lines)")
    p.add_argument("--world", help="simulated-world JSON document")
    p.add_argument("--backend", choices=["simulated", "remote"])
    p.add_argument("--endpoint", help="OpenAI-compatible base URL (remote backend)")
    p.add_argument("--model", help="generator model name")
    p.add_argument("--cache-dir", dest="cache_dir", help="response cache directory")
    p.add_argument("--seed", type=int)


def cmd_value(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    samples = load_samples(config.dataset)
    kind = UtilityKind(config.utility)
    metric = MetricKind(config.metric)
    with build_gateway(config) as gateway:
        valued = [
            value_sample(s, kind, gateway, metric=metric, dedup_policy=config.dedup)
            for s in samples
        ]
    n = write_samples(args.out, valued)
    print(f"valued {n} samples -> {args.out}")
    return EXIT_OK


def cmd_build_dataset(args: argparse.Namespace) -> int:
    config = _config_from_args(args, require_backend=args.recompute)
    samples = load_samples(config.dataset)
    forge_config = ForgeConfig(
        alpha=args.alpha,
        delta1=args.delta1,
        delta2=args.delta2,
        keep_rate=args.keep_rate,
        gamma=args.gamma,
        donor_subset_size=args.donor_subset_size,
        epsilon1=args.epsilon1,
        epsilon2=args.epsilon2,
        max_negatives=args.max_negatives,
        bin_count=args.bins,
        high_per_hard=args.high_per_hard,
        low_per_hard=args.low_per_hard,
        recompute=args.recompute,
    )
    gateway = build_gateway(config) if args.recompute else None
    try:
        result = forge_corpus(
            samples,
            forge_config,
            config.seed,
            gateway=gateway,
            kind=UtilityKind(config.utility),
            metric=MetricKind(config.metric),
        )
    finally:
        if gateway is not None:
            gateway.close()
    write_samples(args.out, result.corpus)
    harness.write_json(result.manifest, args.manifest)
    counts = result.manifest["counts"]
    print(
        f"corpus: {counts['corpus']} samples ({counts['trivial_kept']} trivial kept,"
        f" {counts['hard']} hard, {counts['synthetic_high'] + counts['synthetic_low']} synthetic)"
        f" -> {args.out}"
    )
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    config = _config_from_args(args, require_backend=False)
    if not config.weights or not config.embeddings:
        raise ConfigError("score requires --weights and --embeddings")
    samples = load_samples(config.dataset)
    weights = load_weights(config.weights)
    provider = FileEmbeddings(config.embeddings)
    rows = []
    for s in samples:
        m = score_contexts(s.query, s.contexts, weights, provider)
        rows.extend((s.query.id, ctx.id, float(v)) for ctx, v in zip(s.contexts, m))
    n = harness.write_external_scores(args.out, rows)
    print(f"scored {n} pairs -> {args.out}")
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    config = _config_from_args(args, require_backend=False)
    samples = load_samples(config.dataset)
    strategy = args.strategy
    external = harness.load_external_scores(config.scores) if config.scores else None
    rng = np.random.default_rng(config.seed)
    out_records = []
    for s in samples:
        if strategy == "positive-ci":
            if s.ci is None:
                raise DataError(f"sample {s.query.id!r} has no influence values")
            sel = select_positive(s.contexts, s.ci)
        elif strategy == "top-k":
            if external is not None:
                scores = _external_row(external, s)
            elif s.ci is not None:
                scores = list(s.ci.values)
            else:
                raise DataError(f"sample {s.query.id!r} has no scores for top-k")
            sel = top_k_select(s.contexts, scores, args.k if args.k is not None else config.top_k)
        elif strategy == "external-score":
            if external is None:
                raise ConfigError("external-score strategy requires --scores")
            scores = _external_row(external, s)
            if args.k is not None:
                base = top_k_select(s.contexts, scores, args.k)
                kept = list(zip(base.kept_ids, base.scores))
            else:
                kept = [(c.id, v) for c, v in zip(s.contexts, scores) if v > 0]
            sel = SelectionResult(
                tuple(k for k, _ in kept), tuple(v for _, v in kept), "external-score"
            )
        elif strategy == "random":
            scores = [float(v) for v in rng.random(len(s.contexts))]
            base = top_k_select(s.contexts, scores, args.k if args.k is not None else config.top_k)
            sel = SelectionResult(base.kept_ids, base.scores, "random")
        else:
            raise ConfigError(f"unknown selection strategy: {strategy!r}")
        out_records.append(
            {
                "id": s.query.id,
                "kept_ids": list(sel.kept_ids),
                "scores": list(sel.scores),
                "strategy": sel.strategy,
            }
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in out_records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
            fh.write("\n")
    print(f"selected for {len(out_records)} samples -> {args.out}")
    return EXIT_OK


def _external_row(external, sample):
    row = []
    for ctx in sample.contexts:
        key = (sample.query.id, ctx.id)
        if key not in external:
            raise DataError(f"no external score for pair {key!r}")
        row.append(external[key])
    return row


def cmd_curves(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    samples = load_samples(config.dataset)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with build_gateway(config) as gateway:
        result = harness.run_curves(samples, config, gateway)
    harness.write_curves_csv(result, out_dir / "curves.csv")
    harness.write_json(
        {
            "config": config.echo(),
            "k_star": result.k_star,
            "n_points": len(result.points),
        },
        out_dir / "curves.json",
    )
    print(f"curves: {len(result.points)} points, k*={result.k_star} -> {out_dir}/curves.csv")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    samples = load_samples(config.dataset)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with build_gateway(config) as gateway:
        rows = harness.run_eval(samples, config, gateway)
    harness.write_eval_csv(rows, out_dir / "eval.csv")
    harness.write_json({"config": config.echo(), "rows": rows}, out_dir / "eval.json")
    table = ", ".join(f"{r['strategy']}={r['mean_score']:.4f}" for r in rows)
    print(f"eval: {table} -> {out_dir}/eval.csv")
    return EXIT_OK


def cmd_spearman(args: argparse.Namespace) -> int:
    config = _config_from_args(args, require_backend=False)
    oracle = load_samples(config.dataset)
    predicted_path = Path(args.predicted)
    if not predicted_path.exists():
        raise ConfigError(f"predicted scores file not found: {predicted_path}")
    if _looks_like_score_file(predicted_path):
        predicted = harness.load_external_scores(predicted_path)
    else:
        predicted = harness.predicted_from_samples(load_samples(predicted_path))
    report = harness.run_spearman(oracle, predicted)
    harness.write_json(report, args.out)
    print(
        f"spearman: per-sample mean={report['per_sample_mean']}, pooled={report['pooled']}"
        f" ({report['n_used']}/{report['n_samples']} samples) -> {args.out}"
    )
    return EXIT_OK


def _looks_like_score_file(path: Path) -> bool:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                return False
            return "score" in rec and "context_id" in rec
    return False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cival",
        description="Leave-one-out contextual influence valuation and context selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("value", help="compute influence values for every sample")
    _add_common_flags(p)
    p.add_argument("--utility", choices=[k.value for k in UtilityKind])
    p.add_argument("--metric", choices=[m.value for m in MetricKind])
    p.add_argument("--dedup", choices=["text", "none"])
    p.add_argument("--out", required=True, help="output JSON Lines of valued samples")
    p.set_defaults(func=cmd_value)

    p = sub.add_parser("build-dataset", help="build the scorer training corpus")
    _add_common_flags(p)
    p.add_argument("--utility", choices=[k.value for k in UtilityKind])
    p.add_argument("--metric", choices=[m.value for m in MetricKind])
    p.add_argument("--out", required=True, help="output corpus JSON Lines")
    p.add_argument("--manifest", required=True, help="output manifest JSON")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--delta1", type=float, default=5.0)
    p.add_argument("--delta2", type=float, default=5.0)
    p.add_argument("--keep-rate", dest="keep_rate", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--donor-subset-size", dest="donor_subset_size", type=int, default=4)
    p.add_argument("--epsilon1", type=float, default=0.05)
    p.add_argument("--epsilon2", type=float, default=0.3)
    p.add_argument("--max-negatives", dest="max_negatives", type=int, default=8)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--high-per-hard", dest="high_per_hard", type=int, default=1)
    p.add_argument("--low-per-hard", dest="low_per_hard", type=int, default=1)
    p.add_argument("--recompute", action="store_true", help="recompute influence for synthetics")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("score", help="score contexts with trained scorer weights")
    _add_common_flags(p)
    p.add_argument("--weights", help="scorer weight file (.csmw)")
    p.add_argument("--embeddings", help="pair-embedding JSON Lines file")
    p.add_argument("--out", required=True, help="output score JSON Lines")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="apply a selection strategy to a dataset")
    _add_common_flags(p)
    p.add_argument(
        "--strategy",
        required=True,
        choices=["positive-ci", "top-k", "external-score", "random"],
    )
    p.add_argument("--k", type=int, help="top-k size where applicable")
    p.add_argument("--scores", help="external score JSON Lines file")
    p.add_argument("--out", required=True, help="output selections JSON Lines")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("curves", help="prefix-growth selection curves")
    _add_common_flags(p)
    p.add_argument("--utility", choices=[k.value for k in UtilityKind])
    p.add_argument("--metric", choices=[m.value for m in MetricKind])
    p.add_argument("--scorer", choices=list(harness.SCORERS))
    p.add_argument("--order", choices=list(harness.ORDERS))
    p.add_argument("--weights")
    p.add_argument("--embeddings")
    p.add_argument("--scores")
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("eval", help="strategy-table evaluation")
    _add_common_flags(p)
    p.add_argument("--metric", choices=[m.value for m in MetricKind])
    p.add_argument("--strategies", help="comma-separated strategy list")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--weights")
    p.add_argument("--embeddings")
    p.add_argument("--scores")
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spearman", help="rank correlation of predicted scores vs oracle")
    _add_common_flags(p)
    p.add_argument("--predicted", required=True, help="score JSONL or valued-sample JSONL")
    p.add_argument("--out", required=True, help="output report JSON")
    p.set_defaults(func=cmd_spearman)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GatewayError as exc:
        print(f"gateway error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except (DataError, InvariantError, WeightFormatError, MissingEmbeddingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
