"""Deterministic synthetic generator substrate.

A SimWorld defines, per query, a set of required facts and, per context,
signed fact tags (support > 0, poison < 0). The simulated generator emits
the gold answer iff the supplied contexts cover every required fact with
supporting evidence and their summed support strictly exceeds the summed
poison. Utilities over subsets are analytic, so leave-one-out values and
exhaustive subset searches can be verified exactly.

Additive-mode worlds draw weights as integer multiples of 2**-10 so subset
sums and their differences are exact in float64.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from cival.types import AnswerSet, Context, ContextList, Query, Sample

MODES = ("additive", "threshold")

WEIGHT_QUANTUM = 2.0**-10


@dataclass(frozen=True)
class SimQuery:
    """One query the world can answer."""

    id: str
    text: str
    required_facts: tuple[str, ...]
    gold: str

    def __post_init__(self) -> None:
        if not self.required_facts:
            raise ValueError(f"query {self.id!r}: required fact set must be non-empty")


@dataclass(frozen=True)
class SimWorld:
    """Fact universe, per-query requirements, and per-context signed tags."""

    queries: Mapping[str, SimQuery]
    context_tags: Mapping[str, tuple[tuple[str, float], ...]]
    mode: str = "threshold"
    seed: int = 0
    distractor: str = "I cannot tell from the given passages."

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode!r}")
        for cid, tags in self.context_tags.items():
            for fact, weight in tags:
                if not (weight == weight and abs(weight) != float("inf")):
                    raise ValueError(f"context {cid!r}: non-finite weight on {fact!r}")

    @property
    def facts(self) -> frozenset[str]:
        universe = {f for q in self.queries.values() for f in q.required_facts}
        universe.update(f for tags in self.context_tags.values() for f, _ in tags)
        return frozenset(universe)

    def _query(self, query_id: str) -> SimQuery:
        try:
            return self.queries[query_id]
        except KeyError:
            raise KeyError(f"unknown query id: {query_id!r}") from None

    def _tags(self, context_id: str) -> tuple[tuple[str, float], ...]:
        try:
            return self.context_tags[context_id]
        except KeyError:
            raise KeyError(f"unknown context id: {context_id!r}") from None

    def relevant_weight(self, query_id: str, context_id: str) -> float:
        """Summed tag weight of this context on the query's required facts."""
        required = set(self._query(query_id).required_facts)
        return sum(w for f, w in self._tags(context_id) if f in required)

    def answers_correctly(self, query_id: str, context_ids: Sequence[str]) -> bool:
        """True iff the subset covers every required fact with supporting
        evidence and summed support strictly exceeds summed poison."""
        q = self._query(query_id)
        required = set(q.required_facts)
        supported: set[str] = set()
        support = 0.0
        poison = 0.0
        for cid in context_ids:
            for fact, weight in self._tags(cid):
                if fact not in required:
                    continue
                if weight > 0:
                    supported.add(fact)
                    support += weight
                else:
                    poison += -weight
        return supported >= required and support > poison

    def answer_for(self, query_id: str, context_ids: Sequence[str]) -> str:
        q = self._query(query_id)
        return q.gold if self.answers_correctly(query_id, context_ids) else self.distractor

    def exact_utility(self, query_id: str, context_ids: Sequence[str]) -> float:
        """Analytic utility of a subset: the additive sum of relevant weights,
        or the 0/1 answer-correctness indicator in threshold mode."""
        if self.mode == "additive":
            return sum(self.relevant_weight(query_id, cid) for cid in context_ids)
        return 1.0 if self.answers_correctly(query_id, context_ids) else 0.0

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "distractor": self.distractor,
            "queries": [
                {
                    "id": q.id,
                    "text": q.text,
                    "required_facts": list(q.required_facts),
                    "gold": q.gold,
                }
                for q in sorted(self.queries.values(), key=lambda q: q.id)
            ],
            "contexts": [
                {"id": cid, "tags": [[f, w] for f, w in tags]}
                for cid, tags in sorted(self.context_tags.items())
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "SimWorld":
        queries = {
            q["id"]: SimQuery(q["id"], q["text"], tuple(q["required_facts"]), q["gold"])
            for q in doc["queries"]
        }
        tags = {
            c["id"]: tuple((str(f), float(w)) for f, w in c["tags"]) for c in doc["contexts"]
        }
        return cls(
            queries=queries,
            context_tags=tags,
            mode=doc.get("mode", "threshold"),
            seed=int(doc.get("seed", 0)),
            distractor=doc.get("distractor", "I cannot tell from the given passages."),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, ensure_ascii=False, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "SimWorld":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _quantized_weight(rng: random.Random, lo: int, hi: int, nonzero: bool) -> float:
    """A weight k * 2**-10 with k uniform in [lo, hi]; exact in float64."""
    while True:
        k = rng.randint(lo, hi)
        if k != 0 or not nonzero:
            return k * WEIGHT_QUANTUM


@dataclass(frozen=True)
class WorldBuild:
    world: SimWorld
    samples: tuple[Sample, ...]
    # planted per-sample relevant weights, aligned with each sample's contexts
    weights: tuple[tuple[float, ...], ...] = ()


def make_additive_world(
    n_samples: int,
    seed: int,
    max_contexts: int = 12,
    min_contexts: int = 1,
    nonzero_only: bool = False,
    include_irrelevant: bool = True,
) -> WorldBuild:
    """Seeded additive-mode world with per-context planted weights.

    Each query gets its own fact namespace, so contexts are never relevant
    to another query. Weights are exact binary fractions; with
    `nonzero_only` the positive-CI set is the unique utility argmax.
    """
    rng = random.Random(seed)
    queries: dict[str, SimQuery] = {}
    tags: dict[str, tuple[tuple[str, float], ...]] = {}
    samples: list[Sample] = []
    planted: list[tuple[float, ...]] = []
    for i in range(n_samples):
        qid = f"q{i:04d}"
        fact = f"{qid}/topic"
        gold = f"answer-{i:04d}"
        queries[qid] = SimQuery(qid, f"What is recorded about topic {i:04d}?", (fact,), gold)
        n = rng.randint(min_contexts, max_contexts)
        contexts: list[Context] = []
        weights: list[float] = []
        for j in range(n):
            cid = f"{qid}/c{j}"
            if include_irrelevant and not nonzero_only and rng.random() < 0.2:
                # irrelevant context: tagged onto an off-query fact
                tags[cid] = ((f"{qid}/offtopic{j}", 1.0),)
                weights.append(0.0)
            else:
                w = _quantized_weight(rng, -1024, 1024, nonzero=nonzero_only)
                tags[cid] = ((fact, w),)
                weights.append(w)
            contexts.append(Context(cid, f"passage {j} concerning topic {i:04d} variant {cid}"))
        samples.append(
            Sample(
                query=Query(qid, queries[qid].text),
                answers=AnswerSet((gold,)),
                contexts=ContextList(tuple(contexts)),
            )
        )
        planted.append(tuple(weights))
    world = SimWorld(queries=queries, context_tags=tags, mode="additive", seed=seed)
    return WorldBuild(world, tuple(samples), tuple(planted))


def make_threshold_world(
    n_samples: int,
    seed: int,
    n_golden: int = 2,
    n_noise: int = 2,
    n_poison: int = 2,
    poison_weight: float = -0.25,
) -> WorldBuild:
    """Seeded threshold-mode world with planted golden/noise/poison contexts.

    Golden contexts each cover a distinct required fact (all are needed),
    noise contexts tag off-query facts, and poison contexts carry negative
    weight on required facts, small enough that the full list still answers.
    Context order within each sample is shuffled per the seed.
    """
    if n_golden < 1:
        raise ValueError("need at least one golden context per sample")
    rng = random.Random(seed)
    queries: dict[str, SimQuery] = {}
    tags: dict[str, tuple[tuple[str, float], ...]] = {}
    samples: list[Sample] = []
    for i in range(n_samples):
        qid = f"q{i:04d}"
        facts = tuple(f"{qid}/f{g}" for g in range(n_golden))
        gold = f"answer-{i:04d}"
        queries[qid] = SimQuery(
            qid, f"Which record completes entry {i:04d}?", facts, gold
        )
        roster: list[tuple[str, str]] = []  # (context id, text)
        for g in range(n_golden):
            cid = f"{qid}/gold{g}"
            tags[cid] = ((facts[g], 1.0),)
            roster.append((cid, f"verified source {g} stating fact {facts[g]} for entry {i:04d}"))
        for m in range(n_noise):
            cid = f"{qid}/noise{m}"
            tags[cid] = ((f"{qid}/unrelated{m}", 1.0),)
            roster.append((cid, f"tangential note {m} about unrelated matter for entry {i:04d}"))
        for p in range(n_poison):
            cid = f"{qid}/poison{p}"
            tags[cid] = ((facts[p % n_golden], poison_weight),)
            roster.append((cid, f"misleading account {p} disputing entry {i:04d}"))
        rng.shuffle(roster)
        contexts = ContextList(tuple(Context(cid, text) for cid, text in roster))
        samples.append(
            Sample(
                query=Query(qid, queries[qid].text),
                answers=AnswerSet((gold,)),
                contexts=contexts,
            )
        )
    world = SimWorld(queries=queries, context_tags=tags, mode="threshold", seed=seed)
    return WorldBuild(world, tuple(samples))
