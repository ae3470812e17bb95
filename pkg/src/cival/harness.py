"""Experiment orchestration: run configuration, selection-curve and
strategy-table evaluation, and rank-correlation reports.

All outputs are deterministic functions of (config, cache state, seed):
no timestamps, sorted JSON keys, fixed CSV column order.
"""

from __future__ import annotations

import json
import csv
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from cival.csm import FileEmbeddings, load_weights, score_contexts
from cival.gateway import Gateway, GeneratorConfig
from cival.metrics import MetricKind, UndefinedCorrelationError, spearman
from cival.simworld import SimWorld
from cival.types import ContextList, Sample
from cival.valuation import UtilityKind, select_positive, top_k_select, utility

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """The run configuration is inconsistent or references missing files."""


class DataError(ValueError):
    """Input data is malformed or lacks required fields."""


SCORERS = ("oracle-ci", "csm", "external-score-file", "random")
ORDERS = ("descending", "ascending")
EVAL_STRATEGIES = (
    "vanilla",
    "keep-all",
    "positive-ci",
    "negative-ci",
    "top-k-oracle",
    "top-k-external",
    "top-k-random",
    "csm-positive",
)


@dataclass
class RunConfig:
    """One experiment's inputs, generator access, and protocol knobs."""

    dataset: str = ""
    output_dir: str = "out"
    world: str | None = None
    backend: str = "simulated"
    endpoint: str | None = None
    model: str = "simulated"
    template_id: str = "numbered-v1"
    temperature: float = 0.0
    max_output_tokens: int = 256
    concurrency: int = 4
    cache_dir: str | None = None
    utility: str = "metric"
    metric: str = "exact-match"
    scorer: str = "oracle-ci"
    order: str = "descending"
    top_k: int = 5
    seed: int = 2024
    max_samples: int = 1000
    weights: str | None = None
    embeddings: str | None = None
    scores: str | None = None
    strategies: tuple[str, ...] = (
        "vanilla",
        "keep-all",
        "positive-ci",
        "top-k-oracle",
        "top-k-random",
    )
    dedup: str = "text"

    def validate(self, require_dataset: bool = True, require_backend: bool = True) -> "RunConfig":
        if require_dataset:
            if not self.dataset:
                raise ConfigError("dataset path is required")
            if not Path(self.dataset).exists():
                raise ConfigError(f"dataset not found: {self.dataset}")
        if require_backend and self.backend == "simulated":
            if not self.world:
                raise ConfigError("simulated backend requires a world file")
            if not Path(self.world).exists():
                raise ConfigError(f"world file not found: {self.world}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"unknown scorer: {self.scorer!r} (expected one of {SCORERS})")
        if self.order not in ORDERS:
            raise ConfigError(f"unknown order: {self.order!r}")
        try:
            UtilityKind(self.utility)
        except ValueError:
            raise ConfigError(f"unknown utility kind: {self.utility!r}") from None
        try:
            MetricKind(self.metric)
        except ValueError:
            raise ConfigError(f"unknown metric: {self.metric!r}") from None
        if self.scorer == "csm" or "csm-positive" in self.strategies:
            if not self.weights or not self.embeddings:
                raise ConfigError("csm scoring requires weights and embeddings paths")
            for p in (self.weights, self.embeddings):
                if not Path(p).exists():
                    raise ConfigError(f"file not found: {p}")
        if self.scorer == "external-score-file" or "top-k-external" in self.strategies:
            if not self.scores:
                raise ConfigError("external scoring requires a scores file")
            if not Path(self.scores).exists():
                raise ConfigError(f"scores file not found: {self.scores}")
        for s in self.strategies:
            if s not in EVAL_STRATEGIES:
                raise ConfigError(f"unknown strategy: {s!r} (expected one of {EVAL_STRATEGIES})")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")
        if self.max_samples < 1:
            raise ConfigError("max_samples must be >= 1")
        return self

    @classmethod
    def from_toml(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config parse error in {path}: {exc}") from None
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "strategies" in doc:
            doc["strategies"] = tuple(doc["strategies"])
        return cls(**doc)

    def override(self, **updates: Any) -> "RunConfig":
        """Apply non-None flag overrides on top of this config."""
        filtered = {k: v for k, v in updates.items() if v is not None}
        if "strategies" in filtered:
            filtered["strategies"] = tuple(filtered["strategies"])
        return replace(self, **filtered)

    def echo(self) -> dict[str, Any]:
        """Protocol knobs for embedding in result files. File-system paths
        are omitted so identical runs in different locations stay
        byte-identical."""
        doc = asdict(self)
        doc["strategies"] = list(self.strategies)
        for path_field in (
            "dataset", "world", "weights", "embeddings", "scores",
            "cache_dir", "output_dir", "endpoint",
        ):
            doc.pop(path_field, None)
        return doc


def build_gateway(config: RunConfig) -> Gateway:
    gen = GeneratorConfig(
        backend=config.backend,
        model=config.model,
        endpoint=config.endpoint,
        template_id=config.template_id,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        concurrency=config.concurrency,
        cache_dir=config.cache_dir,
    )
    world = SimWorld.load(config.world) if config.backend == "simulated" else None
    return Gateway(gen, world=world)


# -- score sources ---------------------------------------------------------


def load_external_scores(path: str | Path) -> dict[tuple[str, str], float]:
    """JSON Lines of {"query_id", "context_id", "score"} keyed by pair."""
    table: dict[tuple[str, str], float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                table[(str(rec["query_id"]), str(rec["context_id"]))] = float(rec["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: bad score record ({exc})") from exc
    return table


def write_external_scores(
    path: str | Path, rows: Iterable[tuple[str, str, float]]
) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for qid, cid, s in rows:
            fh.write(
                json.dumps(
                    {"query_id": qid, "context_id": cid, "score": float(s)}, sort_keys=True
                )
            )
            fh.write("\n")
            n += 1
    return n


def per_sample_scores(samples: Sequence[Sample], config: RunConfig) -> list[list[float]]:
    """Resolve the configured scorer to one score per context per sample."""
    if config.scorer == "oracle-ci":
        out = []
        for s in samples:
            if s.ci is None:
                raise DataError(f"sample {s.query.id!r} has no oracle influence values")
            out.append(list(s.ci.values))
        return out
    if config.scorer == "external-score-file":
        table = load_external_scores(config.scores)
        out = []
        for s in samples:
            row = []
            for ctx in s.contexts:
                key = (s.query.id, ctx.id)
                if key not in table:
                    raise DataError(f"no external score for pair {key!r}")
                row.append(table[key])
            out.append(row)
        return out
    if config.scorer == "csm":
        weights = load_weights(config.weights)
        provider = FileEmbeddings(config.embeddings)
        return [
            [float(v) for v in score_contexts(s.query, s.contexts, weights, provider)]
            for s in samples
        ]
    if config.scorer == "random":
        rng = np.random.default_rng(config.seed)
        return [[float(v) for v in rng.random(len(s.contexts))] for s in samples]
    raise ConfigError(f"unknown scorer: {config.scorer!r}")


# -- curves -----------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    k: int
    score: float
    mean_added_ci: float | None


@dataclass(frozen=True)
class CurveResult:
    points: tuple[CurvePoint, ...]
    # mean oracle CI of the rank-k added contexts, for k = 1..max_n
    marginal_added_ci: tuple[float, ...] = ()
    k_star: int | None = None


def run_curves(samples: Sequence[Sample], config: RunConfig, gateway: Gateway) -> CurveResult:
    """Prefix-growth evaluation: add contexts in the configured score order
    and measure utility at every prefix size, averaged over the dataset.

    k=0 is vanilla generation. The zero-influence cutoff k* is the largest
    k whose rank-k added contexts still have positive mean oracle CI.
    """
    samples = list(samples)[: config.max_samples]
    if not samples:
        raise DataError("no samples to evaluate")
    scores = per_sample_scores(samples, config)
    kind = UtilityKind(config.utility)
    metric = MetricKind(config.metric)
    reverse = config.order == "descending"

    orderings: list[list[int]] = []
    for s, sc in zip(samples, scores):
        if len(sc) != len(s.contexts):
            raise DataError(f"sample {s.query.id!r}: scorer returned {len(sc)} scores")
        idx = sorted(
            range(len(sc)), key=(lambda i: (-sc[i], i)) if reverse else (lambda i: (sc[i], i))
        )
        orderings.append(idx)

    max_n = max(len(s.contexts) for s in samples)
    prefix_utils: list[list[float]] = []
    for s, order in zip(samples, orderings):
        row = []
        for k in range(len(order) + 1):
            subset = s.contexts.take(order[:k])
            row.append(utility(subset, s.query, s.answers, kind, gateway, metric))
        prefix_utils.append(row)

    have_ci = all(s.ci is not None for s in samples)
    points: list[CurvePoint] = []
    for k in range(max_n + 1):
        vals = [row[min(k, len(row) - 1)] for row in prefix_utils]
        mean_added = None
        if have_ci and k > 0:
            added = [
                s.ci[i]
                for s, order in zip(samples, orderings)
                for i in order[: min(k, len(order))]
            ]
            mean_added = float(np.mean(added)) if added else None
        points.append(CurvePoint(k=k, score=float(np.mean(vals)), mean_added_ci=mean_added))

    marginal: list[float] = []
    k_star: int | None = None
    if have_ci:
        for k in range(1, max_n + 1):
            added = [
                s.ci[order[k - 1]]
                for s, order in zip(samples, orderings)
                if len(order) >= k
            ]
            marginal.append(float(np.mean(added)))
        k_star = 0
        for k in range(1, max_n + 1):
            if marginal[k - 1] > 0:
                k_star = k
    return CurveResult(points=tuple(points), marginal_added_ci=tuple(marginal), k_star=k_star)


def write_curves_csv(result: CurveResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "score", "mean_added_ci", "marginal_added_ci"])
        for p in result.points:
            marginal = (
                result.marginal_added_ci[p.k - 1]
                if 1 <= p.k <= len(result.marginal_added_ci)
                else None
            )
            writer.writerow(
                [
                    p.k,
                    repr(p.score),
                    "" if p.mean_added_ci is None else repr(p.mean_added_ci),
                    "" if marginal is None else repr(marginal),
                ]
            )


# -- strategy table -----------------------------------------------------------


def _kept_for_strategy(
    strategy: str,
    sample: Sample,
    config: RunConfig,
    external: Mapping[tuple[str, str], float] | None,
    csm_bits: tuple[Any, Any] | None,
    rng: np.random.Generator,
) -> ContextList:
    contexts = sample.contexts
    if strategy == "vanilla":
        return ContextList(())
    if strategy == "keep-all":
        return contexts
    if strategy in ("positive-ci", "negative-ci", "top-k-oracle"):
        if sample.ci is None:
            raise DataError(f"sample {sample.query.id!r} has no oracle influence values")
        if strategy == "positive-ci":
            kept_ids = set(select_positive(contexts, sample.ci).kept_ids)
        elif strategy == "negative-ci":
            kept_ids = {c.id for c, phi in zip(contexts, sample.ci) if phi < 0}
        else:
            kept_ids = set(top_k_select(contexts, sample.ci.values, config.top_k).kept_ids)
        return ContextList(tuple(c for c in contexts if c.id in kept_ids))
    if strategy == "top-k-external":
        row = []
        for ctx in contexts:
            key = (sample.query.id, ctx.id)
            if key not in external:
                raise DataError(f"no external score for pair {key!r}")
            row.append(external[key])
        kept_ids = set(top_k_select(contexts, row, config.top_k).kept_ids)
        return ContextList(tuple(c for c in contexts if c.id in kept_ids))
    if strategy == "top-k-random":
        row = [float(v) for v in rng.random(len(contexts))]
        kept_ids = set(top_k_select(contexts, row, config.top_k).kept_ids)
        return ContextList(tuple(c for c in contexts if c.id in kept_ids))
    if strategy == "csm-positive":
        weights, provider = csm_bits
        m = score_contexts(sample.query, contexts, weights, provider)
        return ContextList(tuple(c for c, s in zip(contexts, m) if s > 0))
    raise ConfigError(f"unknown strategy: {strategy!r}")


def run_eval(samples: Sequence[Sample], config: RunConfig, gateway: Gateway) -> list[dict[str, Any]]:
    """Task-metric table: one row per selection strategy.

    Every strategy generates with its kept contexts (an empty selection
    falls back to vanilla generation) and is scored with the configured
    answer metric.
    """
    samples = list(samples)[: config.max_samples]
    if not samples:
        raise DataError("no samples to evaluate")
    metric = MetricKind(config.metric)
    external = (
        load_external_scores(config.scores)
        if "top-k-external" in config.strategies
        else None
    )
    csm_bits = None
    if "csm-positive" in config.strategies:
        csm_bits = (load_weights(config.weights), FileEmbeddings(config.embeddings))
    rows: list[dict[str, Any]] = []
    for strategy in config.strategies:
        rng = np.random.default_rng(config.seed)
        scores = []
        kept_sizes = []
        for sample in samples:
            kept = _kept_for_strategy(strategy, sample, config, external, csm_bits, rng)
            value = utility(
                kept, sample.query, sample.answers, UtilityKind.METRIC, gateway, metric
            )
            scores.append(value)
            kept_sizes.append(len(kept))
        rows.append(
            {
                "strategy": strategy,
                "mean_score": float(np.mean(scores)),
                "mean_kept": float(np.mean(kept_sizes)),
                "n_samples": len(samples),
            }
        )
    return rows


def write_eval_csv(rows: Sequence[Mapping[str, Any]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "mean_score", "mean_kept", "n_samples"])
        for row in rows:
            writer.writerow(
                [row["strategy"], repr(row["mean_score"]), repr(row["mean_kept"]), row["n_samples"]]
            )


# -- rank correlation ----------------------------------------------------------


def run_spearman(
    oracle_samples: Sequence[Sample],
    predicted: Mapping[tuple[str, str], float],
) -> dict[str, Any]:
    """Rank agreement between predicted scores and oracle influence values.

    Reports the per-sample mean (samples with fewer than two contexts or
    constant ranks are skipped and counted) and the pooled correlation over
    all aligned pairs.
    """
    per_sample: list[float] = []
    pooled_x: list[float] = []
    pooled_y: list[float] = []
    skipped = 0
    for s in oracle_samples:
        if s.ci is None:
            raise DataError(f"sample {s.query.id!r} has no oracle influence values")
        xs = []
        for ctx in s.contexts:
            key = (s.query.id, ctx.id)
            if key not in predicted:
                raise DataError(f"no predicted score for pair {key!r}")
            xs.append(predicted[key])
        ys = list(s.ci.values)
        pooled_x.extend(xs)
        pooled_y.extend(ys)
        try:
            per_sample.append(spearman(xs, ys))
        except (UndefinedCorrelationError, ValueError):
            skipped += 1
    pooled: float | None
    try:
        pooled = spearman(pooled_x, pooled_y) if len(pooled_x) >= 2 else None
    except UndefinedCorrelationError:
        pooled = None
    return {
        "per_sample_mean": float(np.mean(per_sample)) if per_sample else None,
        "pooled": pooled,
        "n_samples": len(oracle_samples),
        "n_used": len(per_sample),
        "n_skipped": skipped,
    }


def predicted_from_samples(samples: Sequence[Sample]) -> dict[tuple[str, str], float]:
    """Use a valued dataset's own influence vectors as a score table."""
    table: dict[tuple[str, str], float] = {}
    for s in samples:
        if s.ci is None:
            raise DataError(f"sample {s.query.id!r} has no influence values")
        for ctx, v in zip(s.contexts, s.ci):
            table[(s.query.id, ctx.id)] = float(v)
    return table


def write_json(doc: Mapping[str, Any], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")
