from __future__ import annotations

import math

import pytest

from cival.forge import (
    ContrastivePairSet,
    ForgeConfig,
    FrequencyTable,
    SampleCategory,
    categorize,
    contrastive_pairs,
    downsample,
    empirical_freq,
    forge_corpus,
    intervene_high,
    intervene_low,
    rarity,
)
from cival.gateway import Gateway, GeneratorConfig
from cival.simworld import make_additive_world
from cival.types import AnswerSet, CIVector, Context, ContextList, Query, Sample
from cival.valuation import UtilityKind, ci_values


def sample_with_ci(sid, phis, cluster=None, n_prefix="c"):
    contexts = ContextList(
        tuple(Context(f"{sid}/{n_prefix}{i}", f"text {sid} {i}") for i in range(len(phis)))
    )
    meta = {"cluster": cluster} if cluster is not None else {}
    return Sample(
        Query(sid, f"question {sid}?"),
        AnswerSet((f"answer {sid}",)),
        contexts,
        CIVector(tuple(phis)),
        meta,
    )


class TestRarity:
    def test_zeros(self):
        assert rarity(CIVector((0.0, 0.0, 0.0)), alpha=17.0).r == 0.0

    def test_alpha_zero_gives_mean(self):
        stats = rarity(CIVector((0.4, 0.8)), alpha=0.0)
        assert stats.r == stats.mu == pytest.approx(0.6)

    def test_hand_computed(self):
        stats = rarity(CIVector((0.2, -0.1, 0.5)), alpha=10.0)
        assert stats.mu == pytest.approx(0.2)
        assert stats.sigma == pytest.approx(math.sqrt(0.06))  # population std
        assert stats.r == pytest.approx(2.6495, abs=1e-4)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            rarity(CIVector(()), alpha=1.0)


class TestCategorize:
    def test_reference_thresholds(self):
        # reference setting: delta1 = delta2 = 5
        assert categorize(2.0, 5.0, 5.0) is SampleCategory.TRIVIAL
        assert categorize(7.0, 5.0, 5.0) is SampleCategory.HARD
        assert categorize(5.0, 5.0, 5.0) is SampleCategory.NEITHER

    def test_separated_thresholds(self):
        assert categorize(4.0, 3.0, 6.0) is SampleCategory.NEITHER

    def test_bad_order(self):
        with pytest.raises(ValueError, match="delta1"):
            categorize(1.0, 6.0, 5.0)


class TestDownsample:
    def samples(self, n=40):
        return [sample_with_ci(f"s{i}", [0.0, 0.1]) for i in range(n)]

    def test_keep_all_and_none(self):
        samples = self.samples()
        assert downsample(samples, 1.0, seed=3) == samples
        assert downsample(samples, 0.0, seed=3) == []

    def test_deterministic(self):
        samples = self.samples()
        a = downsample(samples, 0.3, seed=11)
        b = downsample(samples, 0.3, seed=11)
        assert a == b
        assert 0 < len(a) < len(samples)

    def test_bad_rate(self):
        with pytest.raises(ValueError, match="keep_rate"):
            downsample(self.samples(2), 1.5, seed=0)


class TestInterveneHigh:
    def host(self):
        return sample_with_ci("host", [0.6, 0.05, 0.3, -0.2], cluster="a")

    def donor(self):
        return sample_with_ci("donor", [0.0, 0.0, 0.0, 0.0, 0.0], cluster="b")

    def test_structure(self):
        out = intervene_high(self.host(), self.donor(), gamma=0.1, donor_subset_size=2, seed=5)
        transplanted = {"host/c0", "host/c2"}
        assert transplanted <= set(out.contexts.ids)
        donor_part = set(out.contexts.ids) - transplanted
        assert len(donor_part) == 2
        assert all(cid.startswith("donor/") for cid in donor_part)
        assert out.query == self.host().query
        assert out.answers == self.host().answers
        assert out.ci is None
        assert out.meta["intervention"] == "high-ci"
        assert out.meta["transplanted_ids"] == ["host/c0", "host/c2"]

    def test_gamma_filters(self):
        out = intervene_high(
            sample_with_ci("host", [0.6, 0.05], cluster="a"),
            self.donor(),
            gamma=0.1,
            donor_subset_size=1,
            seed=5,
        )
        assert "host/c0" in out.contexts.ids
        assert "host/c1" not in out.contexts.ids

    def test_no_high_ci_error(self):
        with pytest.raises(ValueError, match="gamma"):
            intervene_high(
                sample_with_ci("host", [0.01, -0.5], cluster="a"),
                self.donor(),
                gamma=0.1,
                donor_subset_size=2,
                seed=5,
            )

    def test_same_query_rejected(self):
        host = self.host()
        with pytest.raises(ValueError, match="identical"):
            intervene_high(host, host, gamma=0.1, donor_subset_size=2, seed=5)

    def test_same_cluster_rejected(self):
        donor = sample_with_ci("donor", [0.0], cluster="a")
        with pytest.raises(ValueError, match="cluster"):
            intervene_high(self.host(), donor, gamma=0.1, donor_subset_size=1, seed=5)

    def test_distinctness_needs_evidence(self):
        donor = sample_with_ci("donor", [0.0])
        host = sample_with_ci("host", [0.6])
        with pytest.raises(ValueError, match="distinctness"):
            intervene_high(host, donor, gamma=0.1, donor_subset_size=1, seed=5)

    def test_embedding_distinctness(self):
        vecs = {"host": [1.0, 0.0], "donor": [0.9, 0.1], "far": [0.0, 1.0]}
        host = sample_with_ci("host", [0.6])
        near = sample_with_ci("donor", [0.0])
        far = sample_with_ci("far", [0.0])
        with pytest.raises(ValueError, match="not semantically distinct"):
            intervene_high(
                host, near, gamma=0.1, donor_subset_size=1, seed=5, query_embeddings=vecs
            )
        out = intervene_high(
            host, far, gamma=0.1, donor_subset_size=1, seed=5, query_embeddings=vecs
        )
        assert out.query.id == "host"

    def test_seeded_sampling_reproducible(self):
        a = intervene_high(self.host(), self.donor(), 0.1, 2, seed=9)
        b = intervene_high(self.host(), self.donor(), 0.1, 2, seed=9)
        assert a == b


class TestInterveneLow:
    def test_provenance_is_donor(self):
        host = sample_with_ci("host", [0.6, 0.05], cluster="a")
        donor = sample_with_ci("donor", [0.0, 0.0, 0.0], cluster="b")
        out = intervene_low(host, donor, gamma=0.1, donor_subset_size=2, seed=7)
        assert out.query == donor.query
        assert out.answers == donor.answers
        assert "host/c0" in out.contexts.ids
        assert out.meta["intervention"] == "low-ci"

    def test_recompute_on_additive_world_zeroes_transplants(self):
        build = make_additive_world(n_samples=4, seed=13, max_contexts=5, nonzero_only=True)
        gw = Gateway(GeneratorConfig(backend="simulated"), world=build.world)
        valued = []
        for s in build.samples:
            phi = ci_values(s, UtilityKind.METRIC, gw)
            meta = dict(s.meta)
            meta["cluster"] = s.query.id
            valued.append(Sample(s.query, s.answers, s.contexts, phi, meta))
        host = next(s for s in valued if any(v > 0.1 for v in s.ci))
        donor = next(s for s in valued if s.query.id != host.query.id)
        out = intervene_low(
            host, donor, gamma=0.1, donor_subset_size=3, seed=3,
            recompute=True, gateway=gw,
        )
        transplanted = set(out.meta["transplanted_ids"])
        assert transplanted
        for ctx, phi in zip(out.contexts, out.ci):
            if ctx.id in transplanted:
                assert phi == 0.0  # irrelevant to the donor query: exactly zero

    def test_new_id(self):
        host = sample_with_ci("host", [0.6], cluster="a")
        donor = sample_with_ci("donor", [0.0], cluster="b")
        out = intervene_low(host, donor, 0.1, 1, seed=1, new_id="donor#low0")
        assert out.query.id == "donor#low0"
        assert out.query.text == donor.query.text


class TestEmpiricalFreq:
    def test_identical_values_single_bin(self):
        table = empirical_freq([2.5, 2.5, 2.5], bin_count=4)
        assert table.lookup(2.5) == 1.0

    def test_two_halves(self):
        table = empirical_freq([0.0, 1.0], bin_count=2)
        assert table.lookup(0.0) == 0.5
        assert table.lookup(1.0) == 0.5

    def test_ten_values_five_bins(self):
        values = [float(v) for v in range(10)]
        table = empirical_freq(values, bin_count=5)
        assert table.probs == (0.2, 0.2, 0.2, 0.2, 0.2)
        for v in values:
            assert table.lookup(v) == 0.2

    def test_probs_sum_to_one(self):
        import numpy as np

        rng = np.random.default_rng(3)
        table = empirical_freq(list(rng.normal(size=200)), bin_count=20)
        assert abs(sum(table.probs) - 1.0) <= 1e-12
        occupied = [p for p in table.probs if p > 0]
        assert occupied

    def test_round_trip(self):
        table = empirical_freq([1.0, 2.0, 2.5], bin_count=3)
        assert FrequencyTable.from_dict(table.to_dict()) == table


class TestContrastivePairs:
    def test_threshold_roles(self):
        # anchor c0=0.5: positive c1 (gap .02 < eps1), negative c2 (gap .4 > eps2),
        # c3 (gap .2) in neither role
        s = sample_with_ci("s", [0.5, 0.52, 0.1, 0.3])
        sets = contrastive_pairs(s, epsilon1=0.05, epsilon2=0.3, max_negatives=4, seed=0)
        by_anchor = {ps.anchor: ps for ps in sets}
        assert by_anchor[0].positive == 1
        assert by_anchor[0].negatives == (2,)
        assert 3 not in by_anchor[0].negatives

    def test_anchors_without_roles_skipped(self):
        s = sample_with_ci("s", [0.0, 1.0])  # no positives for either anchor
        assert contrastive_pairs(s, 0.05, 0.3, 4, seed=0) == []

    def test_negative_cap_deterministic(self):
        phis = [0.0, 0.001, 1.0, 1.1, 1.2, 1.3, 1.4]
        s = sample_with_ci("s", phis)
        a = contrastive_pairs(s, 0.05, 0.3, max_negatives=2, seed=5)
        b = contrastive_pairs(s, 0.05, 0.3, max_negatives=2, seed=5)
        assert a == b
        assert all(len(ps.negatives) <= 2 for ps in a)

    def test_invariant_validation(self):
        with pytest.raises(ValueError, match="epsilon1"):
            ContrastivePairSet(0, 1, (2,), epsilon1=0.5, epsilon2=0.1)
        with pytest.raises(ValueError, match="negative"):
            ContrastivePairSet(0, 1, (), epsilon1=0.1, epsilon2=0.5)


class TestForgeCorpus:
    def dataset(self):
        samples = []
        # trivial: all near-zero influence
        for i in range(10):
            samples.append(sample_with_ci(f"t{i}", [0.01, 0.0, -0.01], cluster=f"k{i % 3}"))
        # hard: large dispersion (alpha=10 pushes r above 5)
        for i in range(4):
            samples.append(
                sample_with_ci(f"h{i}", [0.9, -0.8, 0.0, 0.7], cluster=f"k{i % 3}")
            )
        return samples

    def test_partition_is_exhaustive(self):
        config = ForgeConfig(alpha=10.0, delta1=5.0, delta2=5.0)
        for s in self.dataset():
            st = rarity(s.ci, config.alpha)
            assert categorize(st.r, config.delta1, config.delta2) in (
                SampleCategory.TRIVIAL,
                SampleCategory.HARD,
                SampleCategory.NEITHER,
            )

    def test_forge_deterministic_and_counted(self):
        config = ForgeConfig(keep_rate=0.5, high_per_hard=1, low_per_hard=1)
        a = forge_corpus(self.dataset(), config, seed=2024)
        b = forge_corpus(self.dataset(), config, seed=2024)
        assert a.corpus == b.corpus
        assert a.manifest == b.manifest
        counts = a.manifest["counts"]
        assert counts["trivial"] == 10
        assert counts["hard"] == 4
        assert counts["trivial_kept"] <= counts["trivial"]
        assert counts["synthetic_high"] + counts["synthetic_low"] > 0
        assert counts["corpus"] == len(a.corpus)

    def test_corpus_meta_fields(self):
        config = ForgeConfig(keep_rate=1.0)
        result = forge_corpus(self.dataset(), config, seed=7)
        ids = set()
        for s in result.corpus:
            ids.add(s.query.id)
            if s.ci is not None:
                assert "rarity" in s.meta
                assert s.meta["category"] in {c.value for c in SampleCategory}
                assert s.meta["freq_p"] > 0
        assert len(ids) == len(result.corpus)  # unique ids for the trainer

    def test_unvalued_input_rejected(self):
        bad = Sample(
            Query("x", "q?"), AnswerSet(("a",)), ContextList((Context("x/c", "t"),))
        )
        with pytest.raises(ValueError, match="no influence values"):
            forge_corpus([bad], ForgeConfig(), seed=1)
