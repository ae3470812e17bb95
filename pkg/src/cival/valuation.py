"""Utility evaluation, leave-one-out influence values, and selection rules.

The influence value of a context is the utility drop when it is removed
from the full (deduplicated) list. Selection keeps contexts with strictly
positive influence, which maximizes the summed-influence surrogate of the
subset-selection objective.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from cival.gateway import Gateway
from cival.metrics import MetricKind, normalize_answer, score_text
from cival.types import AnswerSet, CIVector, ContextList, Query, Sample, SelectionResult


class UtilityKind(str, Enum):
    CROSS_ENTROPY = "cross-entropy"
    METRIC = "metric"


def utility(
    subset: ContextList,
    query: Query,
    answers: AnswerSet,
    kind: UtilityKind,
    gateway: Gateway,
    metric: MetricKind = MetricKind.EXACT_MATCH,
) -> float:
    """Utility of answering `query` with exactly the contexts in `subset`.

    Cross-entropy kind: the maximum over gold aliases of the total forced
    log-probability (the negated cross-entropy). Metric kind: the chosen
    answer metric applied to the generated text. On a simulated gateway in
    additive mode, both kinds delegate to the world's analytic utility,
    which is what makes leave-one-out recover planted weights exactly.
    """
    if gateway.is_simulated and gateway.world.mode == "additive":
        return gateway.sim_utility(query.id, [c.id for c in subset])
    if kind is UtilityKind.CROSS_ENTROPY:
        return max(gateway.score_answer(query, subset, alias) for alias in answers)
    response = gateway.generate(query, subset)
    return score_text(metric, response.text, answers)


def dedup(
    contexts: ContextList,
    policy: str = "text",
    embeddings: Mapping[str, Sequence[float]] | None = None,
    threshold: float = 0.95,
) -> ContextList:
    """Remove semantically duplicate contexts, keeping first occurrences.

    `text` policy: equality of normalized text. `embedding` policy: cosine
    similarity of caller-supplied vectors (keyed by context id) at or above
    `threshold` marks a duplicate. `none` disables deduplication.
    """
    if policy == "none":
        return contexts
    if policy == "text":
        seen: set[str] = set()
        kept = []
        for ctx in contexts:
            key = normalize_answer(ctx.text)
            if key in seen:
                continue
            seen.add(key)
            kept.append(ctx)
        return ContextList(tuple(kept))
    if policy == "embedding":
        if embeddings is None:
            raise ValueError("embedding dedup policy requires context vectors")
        kept = []
        kept_vecs: list[np.ndarray] = []
        for ctx in contexts:
            try:
                vec = np.asarray(embeddings[ctx.id], dtype=float)
            except KeyError:
                raise ValueError(f"no embedding vector for context {ctx.id!r}") from None
            norm = np.linalg.norm(vec)
            unit = vec / norm if norm > 0 else vec
            if any(float(np.dot(unit, kv)) >= threshold for kv in kept_vecs):
                continue
            kept.append(ctx)
            kept_vecs.append(unit)
        return ContextList(tuple(kept))
    raise ValueError(f"unknown dedup policy: {policy!r}")


def ci_values(
    sample: Sample,
    kind: UtilityKind,
    gateway: Gateway,
    metric: MetricKind = MetricKind.EXACT_MATCH,
    dedup_policy: str = "text",
    embeddings: Mapping[str, Sequence[float]] | None = None,
) -> CIVector:
    """Leave-one-out influence values over the deduplicated context list.

    Performs exactly n+1 utility evaluations for a post-dedup list of
    length n; the returned vector is index-aligned with that list (see
    `value_sample` for the convenience that also returns it).
    """
    contexts = dedup(sample.contexts, policy=dedup_policy, embeddings=embeddings)
    n = len(contexts)
    if n == 0:
        return CIVector(())
    subsets = [contexts] + [contexts.drop(i) for i in range(n)]

    def evaluate(subset: ContextList) -> float:
        return utility(subset, sample.query, sample.answers, kind, gateway, metric)

    if not gateway.is_simulated and gateway.config.concurrency > 1:
        with ThreadPoolExecutor(max_workers=min(gateway.config.concurrency, n + 1)) as pool:
            utilities = list(pool.map(evaluate, subsets))
    else:
        utilities = [evaluate(s) for s in subsets]
    full = utilities[0]
    return CIVector(tuple(full - u for u in utilities[1:]))


def value_sample(
    sample: Sample,
    kind: UtilityKind,
    gateway: Gateway,
    metric: MetricKind = MetricKind.EXACT_MATCH,
    dedup_policy: str = "text",
    embeddings: Mapping[str, Sequence[float]] | None = None,
) -> Sample:
    """The sample with its deduplicated context list and influence values."""
    contexts = dedup(sample.contexts, policy=dedup_policy, embeddings=embeddings)
    deduped = sample.with_contexts(contexts)
    ci = ci_values(deduped, kind, gateway, metric=metric, dedup_policy="none")
    return deduped.with_ci(ci)


def select_positive(contexts: ContextList, ci: CIVector) -> SelectionResult:
    """Keep exactly the contexts with strictly positive influence."""
    if len(contexts) != len(ci):
        raise ValueError(f"misaligned lengths: {len(contexts)} contexts, {len(ci)} values")
    kept = [(c.id, phi) for c, phi in zip(contexts, ci) if phi > 0]
    return SelectionResult(
        kept_ids=tuple(cid for cid, _ in kept),
        scores=tuple(phi for _, phi in kept),
        strategy="positive-ci",
    )


def group_influence(ci: CIVector, members: Sequence[int]) -> float:
    """Summed influence of a member set; the surrogate for subset utility."""
    if len(set(members)) != len(members):
        raise ValueError("member indices must be distinct")
    total = 0.0
    for i in sorted(members):
        if not 0 <= i < len(ci):
            raise IndexError(f"member index out of range: {i}")
        total += ci[i]
    return total


def top_k_select(contexts: ContextList, scores: Sequence[float], k: int) -> SelectionResult:
    """Keep the k highest-scoring contexts (ties to the lower index),
    preserving original list order."""
    if len(contexts) != len(scores):
        raise ValueError(f"misaligned lengths: {len(contexts)} contexts, {len(scores)} scores")
    if k < 0:
        raise ValueError("k must be >= 0")
    ranked = sorted(range(len(contexts)), key=lambda i: (-scores[i], i))
    kept_indices = sorted(ranked[:k])
    return SelectionResult(
        kept_ids=tuple(contexts[i].id for i in kept_indices),
        scores=tuple(float(scores[i]) for i in kept_indices),
        strategy="top-k",
    )


def scale_ci(vectors: Sequence[CIVector]) -> list[CIVector]:
    """Scale a dataset's influence values into [-1, 1] by the dataset-wide
    maximum absolute value; ranking and signs are preserved. All-zero (or
    empty) input is returned unchanged."""
    peak = 0.0
    for vec in vectors:
        for v in vec:
            peak = max(peak, abs(v))
    if peak == 0.0:
        return [CIVector(tuple(vec.values)) for vec in vectors]
    return [CIVector(tuple(v / peak for v in vec)) for vec in vectors]
