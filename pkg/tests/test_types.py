from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from cival.types import (
    AnswerSet,
    CIVector,
    Context,
    ContextList,
    InvariantError,
    Query,
    Sample,
    SelectionResult,
    load_samples,
    sample_from_record,
    sample_to_record,
    validate_sample,
    write_samples,
)


def make_sample(n_contexts=3, with_ci=True, meta=None):
    contexts = ContextList(
        tuple(Context(f"c{i}", f"passage number {i}") for i in range(n_contexts))
    )
    ci = CIVector(tuple(0.1 * i - 0.1 for i in range(n_contexts))) if with_ci else None
    return Sample(
        query=Query("q0", "who wrote it?"),
        answers=AnswerSet(("The Author", "Author Name")),
        contexts=contexts,
        ci=ci,
        meta=meta or {},
    )


def test_validate_sample_identity_and_idempotent():
    s = make_sample()
    assert validate_sample(s) is s
    assert validate_sample(validate_sample(s)) is s


def test_duplicate_context_ids_rejected():
    with pytest.raises(InvariantError, match="duplicate id"):
        ContextList((Context("c0", "a"), Context("c0", "b")))


def test_ci_length_mismatch_rejected():
    with pytest.raises(InvariantError, match="length mismatch"):
        Sample(
            query=Query("q", "text"),
            answers=AnswerSet(("x",)),
            contexts=ContextList((Context("c0", "t"),)),
            ci=CIVector((0.1, 0.2)),
        )


def test_empty_query_text_rejected():
    with pytest.raises(InvariantError, match="query.text"):
        Query("q", "   ")


def test_answer_aliases_must_differ_after_normalization():
    with pytest.raises(InvariantError, match="duplicate alias"):
        AnswerSet(("The Cat.", "the cat"))


def test_non_finite_ci_rejected():
    with pytest.raises(InvariantError, match="not finite"):
        CIVector((0.0, float("nan")))


def test_selection_result_strategy_checked():
    with pytest.raises(InvariantError, match="strategy"):
        SelectionResult(("a",), (1.0,), "bogus")
    with pytest.raises(InvariantError, match="duplicate id"):
        SelectionResult(("a", "a"), (1.0, 2.0), "top-k")


def test_context_list_drop_and_take():
    cl = make_sample(4).contexts
    assert cl.drop(1).ids == ("c0", "c2", "c3")
    assert cl.take([2, 0]).ids == ("c2", "c0")
    with pytest.raises(IndexError):
        cl.drop(7)


def test_record_round_trip_fixture():
    s = make_sample(meta={"cluster": "k1"})
    rec = sample_to_record(s)
    assert set(rec) == {"id", "query", "answers", "contexts", "ci", "meta"}
    assert sample_from_record(rec) == s


def test_origin_omitted_when_absent():
    s = make_sample(1, with_ci=False)
    rec = sample_to_record(s)
    assert "origin" not in rec["contexts"][0]
    assert "ci" not in rec


@given(
    n=st.integers(min_value=0, max_value=6),
    with_ci=st.booleans(),
    values=st.lists(
        st.floats(min_value=-100, max_value=100, allow_nan=False), min_size=6, max_size=6
    ),
    origin=st.none() | st.text(min_size=1, max_size=8),
)
def test_round_trip_property(n, with_ci, values, origin):
    contexts = ContextList(
        tuple(Context(f"c{i}", f"text {i}", origin) for i in range(n))
    )
    sample = Sample(
        query=Query("q", "a question?"),
        answers=AnswerSet(("only answer",)),
        contexts=contexts,
        ci=CIVector(tuple(values[:n])) if with_ci else None,
        meta={"k": "v"},
    )
    assert sample_from_record(sample_to_record(sample)) == sample


def test_jsonl_round_trip_and_unique_ids(tmp_path):
    samples = [
        Sample(
            Query(f"q{i}", f"question {i}"),
            AnswerSet((f"answer {i}",)),
            ContextList((Context(f"q{i}/c0", f"text {i}"),)),
        )
        for i in range(5)
    ]
    path = tmp_path / "data.jsonl"
    assert write_samples(path, samples) == 5
    assert load_samples(path) == samples

    dup = samples + [samples[0]]
    path2 = tmp_path / "dup.jsonl"
    write_samples(path2, dup)
    with pytest.raises(InvariantError, match="duplicate id"):
        load_samples(path2)
