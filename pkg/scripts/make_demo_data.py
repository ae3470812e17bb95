#!/usr/bin/env python3
"""Regenerate the bundled demo dataset under tests/data/demo/.

Builds a 50-query threshold-mode world with varied context rosters (so the
corpus forge sees trivial and hard samples), the matching raw sample file,
and a deterministic baseline score file for the external-score paths.
Everything derives from one fixed seed; the outputs are committed so tests
and examples run against stable bytes.
"""

from __future__ import annotations

import json
import random
import sys
from pathlib import Path

from cival.simworld import SimQuery, SimWorld
from cival.types import AnswerSet, Context, ContextList, Query, Sample, write_samples

SEED = 2024
N_SAMPLES = 50
OUT_DIR = Path(__file__).resolve().parent.parent / "tests" / "data" / "demo"


def build(seed: int = SEED, n_samples: int = N_SAMPLES):
    rng = random.Random(seed)
    queries: dict[str, SimQuery] = {}
    tags: dict[str, tuple[tuple[str, float], ...]] = {}
    samples: list[Sample] = []
    for i in range(n_samples):
        qid = f"q{i:04d}"
        n_golden = 3 if i % 5 == 4 else 2
        n_noise = 2 + (i % 3)
        n_poison = 2
        facts = tuple(f"{qid}/f{g}" for g in range(n_golden))
        gold = f"answer-{i:04d}"
        queries[qid] = SimQuery(qid, f"Which record completes entry {i:04d}?", facts, gold)
        roster: list[tuple[str, str]] = []
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
            tags[cid] = ((facts[p % n_golden], -0.25),)
            roster.append((cid, f"misleading account {p} disputing entry {i:04d}"))
        rng.shuffle(roster)
        samples.append(
            Sample(
                query=Query(qid, queries[qid].text),
                answers=AnswerSet((gold,)),
                contexts=ContextList(tuple(Context(cid, text) for cid, text in roster)),
                meta={"cluster": f"cluster-{i % 7}"},
            )
        )
    world = SimWorld(queries=queries, context_tags=tags, mode="threshold", seed=seed)
    return world, samples


def baseline_scores(world: SimWorld, samples: list[Sample], seed: int) -> list[dict]:
    """Noisy rank-correlated scores standing in for an external reranker."""
    rng = random.Random(seed + 1)
    rows = []
    for s in samples:
        for ctx in s.contexts:
            base = world.relevant_weight(s.query.id, ctx.id)
            rows.append(
                {
                    "query_id": s.query.id,
                    "context_id": ctx.id,
                    "score": round(base + rng.gauss(0.0, 0.3), 6),
                }
            )
    return rows


def main() -> int:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    world, samples = build()
    world.save(OUT_DIR / "world.json")
    write_samples(OUT_DIR / "samples.jsonl", samples)
    with open(OUT_DIR / "baseline_scores.jsonl", "w", encoding="utf-8") as fh:
        for row in baseline_scores(world, samples, SEED):
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
    print(f"wrote demo dataset ({len(samples)} samples) to {OUT_DIR}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
