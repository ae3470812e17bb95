from __future__ import annotations

import pytest

from cival.simworld import (
    SimQuery,
    SimWorld,
    make_additive_world,
    make_threshold_world,
)


def test_json_round_trip(tmp_path):
    build = make_threshold_world(n_samples=4, seed=5)
    path = tmp_path / "world.json"
    build.world.save(path)
    loaded = SimWorld.load(path)
    assert loaded == build.world


def test_additive_round_trip_preserves_utilities(tmp_path):
    build = make_additive_world(n_samples=6, seed=9, max_contexts=5)
    path = tmp_path / "world.json"
    build.world.save(path)
    loaded = SimWorld.load(path)
    for sample in build.samples:
        ids = list(sample.contexts.ids)
        assert loaded.exact_utility(sample.query.id, ids) == build.world.exact_utility(
            sample.query.id, ids
        )


def test_unknown_ids_raise():
    build = make_threshold_world(n_samples=1, seed=1)
    with pytest.raises(KeyError, match="unknown query id"):
        build.world.exact_utility("nope", [])
    qid = next(iter(build.world.queries))
    with pytest.raises(KeyError, match="unknown context id"):
        build.world.exact_utility(qid, ["nope"])


def test_validation():
    with pytest.raises(ValueError, match="unknown mode"):
        SimWorld(queries={}, context_tags={}, mode="magic")
    with pytest.raises(ValueError, match="non-empty"):
        SimQuery("q", "text", (), "gold")
    with pytest.raises(ValueError, match="non-finite"):
        SimWorld(
            queries={"q": SimQuery("q", "t", ("f",), "g")},
            context_tags={"c": (("f", float("inf")),)},
        )


def test_fact_universe():
    world = SimWorld(
        queries={"q": SimQuery("q", "t", ("f1",), "g")},
        context_tags={"c": (("f2", 1.0),)},
    )
    assert world.facts == {"f1", "f2"}


def test_threshold_world_planted_structure():
    build = make_threshold_world(n_samples=3, seed=2, n_golden=2, n_noise=1, n_poison=1)
    for sample in build.samples:
        ids = list(sample.contexts.ids)
        world = build.world
        assert world.exact_utility(sample.query.id, ids) == 1.0  # full list answers
        golden = [cid for cid in ids if "gold" in cid]
        assert world.exact_utility(sample.query.id, golden) == 1.0
        # dropping either golden context breaks coverage
        assert world.exact_utility(sample.query.id, golden[:1]) == 0.0
        noise = [cid for cid in ids if "noise" in cid]
        assert world.exact_utility(sample.query.id, noise) == 0.0
