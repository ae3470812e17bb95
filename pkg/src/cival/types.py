"""Shared domain types and the JSON Lines sample schema.

All types are immutable values: construction validates every invariant and
raises :class:`InvariantError` naming the failing field. The JSON Lines
record layout (one sample per line) is part of the package's external
interface and its field names are stable:

    {"id", "query", "answers": [...], "contexts": [{"id", "text", "origin"?}],
     "ci": [...]?, "meta": {}?}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from cival.metrics import normalize_answer

SELECTION_STRATEGIES = ("positive-ci", "top-k", "external-score", "random")


class InvariantError(ValueError):
    """A domain-type invariant does not hold."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class Query:
    """A user query. `id` is caller-supplied and opaque to the engine."""

    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise InvariantError("query.id", "must be non-empty")
        if not self.text.strip():
            raise InvariantError("query.text", "must be non-empty after trimming")


@dataclass(frozen=True)
class AnswerSet:
    """Gold answer aliases. Two aliases may not collide after normalization."""

    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise InvariantError("answers", "must be non-empty")
        seen: dict[str, str] = {}
        for alias in self.answers:
            if not alias:
                raise InvariantError("answers", "aliases must be non-empty strings")
            norm = normalize_answer(alias)
            if norm in seen:
                raise InvariantError(
                    "answers",
                    f"duplicate alias after normalization: {alias!r} vs {seen[norm]!r}",
                )
            seen[norm] = alias

    def __iter__(self) -> Iterator[str]:
        return iter(self.answers)


@dataclass(frozen=True)
class Context:
    """One retrieved text chunk."""

    id: str
    text: str
    origin: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise InvariantError("context.id", "must be non-empty")
        if not self.text:
            raise InvariantError("context.text", "must be non-empty")


@dataclass(frozen=True)
class ContextList:
    """An ordered list of contexts with pairwise-distinct ids."""

    contexts: tuple[Context, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "contexts", tuple(self.contexts))
        seen: set[str] = set()
        for ctx in self.contexts:
            if ctx.id in seen:
                raise InvariantError("contexts", f"duplicate id: {ctx.id!r}")
            seen.add(ctx.id)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.contexts)

    def __len__(self) -> int:
        return len(self.contexts)

    def __iter__(self) -> Iterator[Context]:
        return iter(self.contexts)

    def __getitem__(self, index: int) -> Context:
        return self.contexts[index]

    def drop(self, index: int) -> "ContextList":
        """The list with the context at `index` removed (leave-one-out)."""
        if not 0 <= index < len(self.contexts):
            raise IndexError(index)
        return ContextList(self.contexts[:index] + self.contexts[index + 1 :])

    def take(self, indices: Sequence[int]) -> "ContextList":
        """Sub-list at the given indices, in the given order."""
        return ContextList(tuple(self.contexts[i] for i in indices))


@dataclass(frozen=True)
class CIVector:
    """Per-context influence values, index-aligned with a ContextList."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        for i, v in enumerate(vals):
            if not math.isfinite(v):
                raise InvariantError("ci", f"value at index {i} is not finite: {v!r}")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self) -> Iterator[float]:
        return iter(self.values)

    def __getitem__(self, index: int) -> float:
        return self.values[index]


@dataclass(frozen=True)
class Sample:
    """One valuation unit: query, gold answers, contexts, optional CI values."""

    query: Query
    answers: AnswerSet
    contexts: ContextList
    ci: CIVector | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.ci is not None and len(self.ci) != len(self.contexts):
            raise InvariantError(
                "ci",
                f"length mismatch: {len(self.ci)} values for {len(self.contexts)} contexts",
            )

    def with_ci(self, ci: CIVector) -> "Sample":
        return Sample(self.query, self.answers, self.contexts, ci, dict(self.meta))

    def with_contexts(self, contexts: ContextList, ci: CIVector | None = None) -> "Sample":
        return Sample(self.query, self.answers, contexts, ci, dict(self.meta))


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a selection rule over one context list."""

    kept_ids: tuple[str, ...]
    scores: tuple[float, ...]
    strategy: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "kept_ids", tuple(self.kept_ids))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if self.strategy not in SELECTION_STRATEGIES:
            raise InvariantError("strategy", f"unknown strategy: {self.strategy!r}")
        if len(self.kept_ids) != len(self.scores):
            raise InvariantError("scores", "one score per kept context required")
        if len(set(self.kept_ids)) != len(self.kept_ids):
            raise InvariantError("kept_ids", "duplicate id")


def validate_sample(sample: Sample) -> Sample:
    """Re-check every invariant on `sample` and return it unchanged.

    Construction already validates, so this is mainly useful after JSON
    ingestion or as an explicit pipeline gate. Idempotent by design.
    """
    Query(sample.query.id, sample.query.text)
    AnswerSet(sample.answers.answers)
    ContextList(sample.contexts.contexts)
    if sample.ci is not None:
        CIVector(sample.ci.values)
        if len(sample.ci) != len(sample.contexts):
            raise InvariantError(
                "ci",
                f"length mismatch: {len(sample.ci)} values for {len(sample.contexts)} contexts",
            )
    return sample


def sample_to_record(sample: Sample) -> dict[str, Any]:
    """The JSON-serializable record for one sample (schema above)."""
    record: dict[str, Any] = {
        "id": sample.query.id,
        "query": sample.query.text,
        "answers": list(sample.answers.answers),
        "contexts": [
            {"id": c.id, "text": c.text, **({"origin": c.origin} if c.origin is not None else {})}
            for c in sample.contexts
        ],
    }
    if sample.ci is not None:
        record["ci"] = list(sample.ci.values)
    if sample.meta:
        record["meta"] = dict(sample.meta)
    return record


def sample_from_record(record: Mapping[str, Any]) -> Sample:
    """Parse one JSON record into a Sample, validating invariants."""
    try:
        query = Query(str(record["id"]), str(record["query"]))
        answers = AnswerSet(tuple(str(a) for a in record["answers"]))
        contexts = ContextList(
            tuple(
                Context(str(c["id"]), str(c["text"]), c.get("origin"))
                for c in record["contexts"]
            )
        )
    except KeyError as exc:
        raise InvariantError("record", f"missing field {exc.args[0]!r}") from exc
    ci = CIVector(tuple(record["ci"])) if record.get("ci") is not None else None
    meta = dict(record.get("meta") or {})
    return Sample(query, answers, contexts, ci, meta)


def write_samples(path: str | Path, samples: Iterable[Sample]) -> int:
    """Write samples as JSON Lines. Returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def load_samples(path: str | Path) -> list[Sample]:
    """Load a JSON Lines dataset, enforcing dataset-wide id uniqueness."""
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvariantError("record", f"line {lineno}: invalid JSON ({exc})") from exc
            sample = sample_from_record(record)
            if sample.query.id in seen:
                raise InvariantError("query.id", f"duplicate id: {sample.query.id!r} (line {lineno})")
            seen.add(sample.query.id)
            samples.append(sample)
    return samples
