"""Training-corpus construction for the learned influence scorer.

Valued samples are split by rarity rate into trivial and hard groups;
trivial samples are down-sampled, hard samples spawn cross-instance
interventions (transplanting high-influence contexts into a semantically
distinct sample's environment, and the converse recombination under the
donor's query). Empirical rarity frequencies provide the importance
weights for the reweighted regression loss, and contrastive pair sets are
mined from hard samples.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from cival.gateway import Gateway
from cival.metrics import MetricKind
from cival.types import CIVector, Context, ContextList, Query, Sample
from cival.valuation import UtilityKind, value_sample


@dataclass(frozen=True)
class RarityStats:
    """Mean/dispersion summary of one sample's influence values."""

    mu: float
    sigma: float
    alpha: float
    r: float

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


class SampleCategory(str, Enum):
    TRIVIAL = "trivial"
    HARD = "hard"
    NEITHER = "neither"


@dataclass(frozen=True)
class ContrastivePairSet:
    """Anchor/positive/negative context indices within one sample."""

    anchor: int
    positive: int
    negatives: tuple[int, ...]
    epsilon1: float
    epsilon2: float

    def __post_init__(self) -> None:
        if self.epsilon1 > self.epsilon2:
            raise ValueError("epsilon1 must be <= epsilon2")
        if not self.negatives:
            raise ValueError("at least one negative required")


@dataclass(frozen=True)
class FrequencyTable:
    """Equal-width histogram over rarity rates; p(r) is the occupied-bin
    empirical probability."""

    lo: float
    hi: float
    bin_count: int
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.bin_count < 1:
            raise ValueError("bin_count must be >= 1")
        if len(self.probs) != self.bin_count:
            raise ValueError("one probability per bin required")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"occupied-bin probabilities must sum to 1, got {total}")

    @property
    def edges(self) -> tuple[float, ...]:
        if self.bin_count == 0:
            return (self.lo, self.hi)
        width = (self.hi - self.lo) / self.bin_count
        return tuple(self.lo + i * width for i in range(self.bin_count)) + (self.hi,)

    def bin_index(self, r: float) -> int:
        width = (self.hi - self.lo) / self.bin_count
        if width <= 0:
            return 0
        idx = int((r - self.lo) / width)
        return min(self.bin_count - 1, max(0, idx))

    def lookup(self, r: float) -> float:
        return self.probs[self.bin_index(r)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "bin_count": self.bin_count,
            "probs": list(self.probs),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "FrequencyTable":
        return cls(
            lo=float(doc["lo"]),
            hi=float(doc["hi"]),
            bin_count=int(doc["bin_count"]),
            probs=tuple(float(p) for p in doc["probs"]),
        )


def rarity(ci: CIVector | Sequence[float], alpha: float) -> RarityStats:
    """Rarity rate r = mean + alpha * population standard deviation."""
    values = np.asarray(tuple(ci), dtype=float)
    if values.size == 0:
        raise ValueError("rarity is undefined for an empty influence vector")
    mu = float(values.mean())
    sigma = float(values.std())  # population convention
    return RarityStats(mu=mu, sigma=sigma, alpha=float(alpha), r=mu + alpha * sigma)


def categorize(r: float, delta1: float, delta2: float) -> SampleCategory:
    """Strictly-below-delta1 samples are trivial, strictly-above-delta2 are
    hard; boundary values fall in neither group."""
    if delta1 > delta2:
        raise ValueError("delta1 must be <= delta2")
    if r < delta1:
        return SampleCategory.TRIVIAL
    if r > delta2:
        return SampleCategory.HARD
    return SampleCategory.NEITHER


def downsample(samples: Sequence[Sample], keep_rate: float, seed: int) -> list[Sample]:
    """Keep each sample independently with probability `keep_rate`."""
    if not 0.0 <= keep_rate <= 1.0:
        raise ValueError("keep_rate must be in [0, 1]")
    rng = random.Random(seed)
    return [s for s in samples if rng.random() < keep_rate]


def _check_distinct(
    host: Sample,
    donor: Sample,
    query_embeddings: Mapping[str, Sequence[float]] | None,
    cosine_threshold: float,
) -> None:
    if host.query.id == donor.query.id:
        raise ValueError("donor query is identical to the host query")
    if query_embeddings is not None:
        try:
            a = np.asarray(query_embeddings[host.query.id], dtype=float)
            b = np.asarray(query_embeddings[donor.query.id], dtype=float)
        except KeyError as exc:
            raise ValueError(f"no query embedding for {exc.args[0]!r}") from None
        denom = float(np.linalg.norm(a) * np.linalg.norm(b))
        cosine = float(np.dot(a, b)) / denom if denom > 0 else 1.0
        if cosine >= cosine_threshold:
            raise ValueError(
                f"donor query is not semantically distinct (cosine {cosine:.3f})"
            )
        return
    host_cluster = host.meta.get("cluster")
    donor_cluster = donor.meta.get("cluster")
    if host_cluster is None or donor_cluster is None:
        raise ValueError(
            "cannot establish semantic distinctness: provide query embeddings"
            " or cluster tags in sample meta"
        )
    if host_cluster == donor_cluster:
        raise ValueError(f"donor shares the host's cluster tag {host_cluster!r}")


def _high_ci_contexts(host: Sample, gamma: float) -> list[Context]:
    if host.ci is None:
        raise ValueError("host sample carries no influence values")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    kept = [c for c, phi in zip(host.contexts, host.ci) if phi > gamma]
    if not kept:
        raise ValueError(f"no contexts with influence above gamma={gamma}")
    return kept


def _sample_donor_contexts(
    donor: Sample, size: int, rng: random.Random, exclude_ids: set[str]
) -> list[Context]:
    pool = [c for c in donor.contexts if c.id not in exclude_ids]
    k = min(size, len(pool))
    picked = sorted(rng.sample(range(len(pool)), k))
    return [pool[i] for i in picked]


def _recombine(
    query: Query,
    answers,
    transplanted: list[Context],
    environment: list[Context],
    meta: dict[str, Any],
    new_id: str | None,
) -> Sample:
    if new_id is not None:
        query = Query(new_id, query.text)
    contexts = ContextList(tuple(transplanted) + tuple(environment))
    return Sample(query=query, answers=answers, contexts=contexts, ci=None, meta=meta)


def intervene_high(
    host: Sample,
    donor: Sample,
    gamma: float,
    donor_subset_size: int,
    seed: int,
    recompute: bool = False,
    *,
    gateway: Gateway | None = None,
    kind: UtilityKind = UtilityKind.METRIC,
    metric: MetricKind = MetricKind.EXACT_MATCH,
    query_embeddings: Mapping[str, Sequence[float]] | None = None,
    cosine_threshold: float = 0.5,
    new_id: str | None = None,
) -> Sample:
    """Transplant the host's high-influence contexts into a noisier
    environment sampled from a semantically distinct donor, keeping the
    host's query and answers. Their marginal contribution under the host
    query becomes more pronounced, yielding a synthetic high-influence
    sample."""
    _check_distinct(host, donor, query_embeddings, cosine_threshold)
    transplanted = _high_ci_contexts(host, gamma)
    rng = random.Random(seed)
    environment = _sample_donor_contexts(
        donor, donor_subset_size, rng, {c.id for c in transplanted}
    )
    meta = {
        "intervention": "high-ci",
        "host_id": host.query.id,
        "donor_id": donor.query.id,
        "transplanted_ids": [c.id for c in transplanted],
    }
    out = _recombine(host.query, host.answers, transplanted, environment, meta, new_id)
    if recompute:
        if gateway is None:
            raise ValueError("recompute requires a gateway")
        out = value_sample(out, kind, gateway, metric=metric, dedup_policy="none")
        out = Sample(out.query, out.answers, out.contexts, out.ci, meta)
    return out


def intervene_low(
    host: Sample,
    donor: Sample,
    gamma: float,
    donor_subset_size: int,
    seed: int,
    recompute: bool = False,
    *,
    gateway: Gateway | None = None,
    kind: UtilityKind = UtilityKind.METRIC,
    metric: MetricKind = MetricKind.EXACT_MATCH,
    query_embeddings: Mapping[str, Sequence[float]] | None = None,
    cosine_threshold: float = 0.5,
    new_id: str | None = None,
) -> Sample:
    """Recombine the host's high-influence contexts under the donor's
    semantically distinct query (keeping the donor's query and answers),
    making them low-influence there: a synthetic low-influence sample."""
    _check_distinct(host, donor, query_embeddings, cosine_threshold)
    transplanted = _high_ci_contexts(host, gamma)
    rng = random.Random(seed)
    environment = _sample_donor_contexts(
        donor, donor_subset_size, rng, {c.id for c in transplanted}
    )
    meta = {
        "intervention": "low-ci",
        "host_id": host.query.id,
        "donor_id": donor.query.id,
        "transplanted_ids": [c.id for c in transplanted],
    }
    out = _recombine(donor.query, donor.answers, transplanted, environment, meta, new_id)
    if recompute:
        if gateway is None:
            raise ValueError("recompute requires a gateway")
        out = value_sample(out, kind, gateway, metric=metric, dedup_policy="none")
        out = Sample(out.query, out.answers, out.contexts, out.ci, meta)
    return out


def empirical_freq(rarity_values: Sequence[float], bin_count: int) -> FrequencyTable:
    """Equal-width empirical histogram of rarity rates."""
    if len(rarity_values) == 0:
        raise ValueError("no rarity values")
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    lo = float(min(rarity_values))
    hi = float(max(rarity_values))
    width = (hi - lo) / bin_count
    counts = [0] * bin_count
    for r in rarity_values:
        idx = int((float(r) - lo) / width) if width > 0 else 0
        counts[min(bin_count - 1, max(0, idx))] += 1
    total = len(rarity_values)
    return FrequencyTable(lo=lo, hi=hi, bin_count=bin_count, probs=tuple(c / total for c in counts))


def contrastive_pairs(
    sample: Sample,
    epsilon1: float,
    epsilon2: float,
    max_negatives: int,
    seed: int,
) -> list[ContrastivePairSet]:
    """Mine anchor/positive/negative index sets from a (hard) sample.

    A positive shares the anchor's influence value within epsilon1; a
    negative differs by more than epsilon2. Anchors lacking either role are
    skipped; negatives beyond `max_negatives` are subsampled per the seed.
    """
    if epsilon1 > epsilon2:
        raise ValueError("epsilon1 must be <= epsilon2")
    if sample.ci is None:
        raise ValueError("sample carries no influence values")
    if max_negatives < 1:
        raise ValueError("max_negatives must be >= 1")
    phis = sample.ci.values
    rng = random.Random(seed)
    out: list[ContrastivePairSet] = []
    for a in range(len(phis)):
        positives = [j for j in range(len(phis)) if j != a and abs(phis[a] - phis[j]) < epsilon1]
        negatives = [j for j in range(len(phis)) if j != a and abs(phis[a] - phis[j]) > epsilon2]
        if not positives or not negatives:
            continue
        positive = min(positives, key=lambda j: (abs(phis[a] - phis[j]), j))
        if len(negatives) > max_negatives:
            negatives = sorted(rng.sample(negatives, max_negatives))
        out.append(
            ContrastivePairSet(
                anchor=a,
                positive=positive,
                negatives=tuple(negatives),
                epsilon1=epsilon1,
                epsilon2=epsilon2,
            )
        )
    return out


@dataclass(frozen=True)
class ForgeConfig:
    """Knobs for corpus construction. The rarity/threshold values follow
    the reference setting (alpha=10, delta1=delta2=5); the rest are
    implementation defaults exposed for tuning."""

    alpha: float = 10.0
    delta1: float = 5.0
    delta2: float = 5.0
    keep_rate: float = 0.2
    gamma: float = 0.1
    donor_subset_size: int = 4
    epsilon1: float = 0.05
    epsilon2: float = 0.3
    max_negatives: int = 8
    bin_count: int = 20
    high_per_hard: int = 1
    low_per_hard: int = 1
    recompute: bool = False
    cosine_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.delta1 > self.delta2:
            raise ValueError("delta1 must be <= delta2")
        if not 0.0 <= self.keep_rate <= 1.0:
            raise ValueError("keep_rate must be in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.epsilon1 > self.epsilon2:
            raise ValueError("epsilon1 must be <= epsilon2")


@dataclass(frozen=True)
class ForgeResult:
    corpus: tuple[Sample, ...]
    manifest: dict[str, Any]


def forge_corpus(
    samples: Sequence[Sample],
    config: ForgeConfig,
    seed: int,
    *,
    gateway: Gateway | None = None,
    kind: UtilityKind = UtilityKind.METRIC,
    metric: MetricKind = MetricKind.EXACT_MATCH,
    query_embeddings: Mapping[str, Sequence[float]] | None = None,
) -> ForgeResult:
    """Build the training corpus and its manifest from valued samples.

    Every input sample must carry influence values. Output sample meta
    records rarity, category, the empirical frequency weight, mined
    contrastive pairs, and intervention provenance for synthetic samples.
    """
    for s in samples:
        if s.ci is None:
            raise ValueError(f"sample {s.query.id!r} carries no influence values")
    if config.recompute and gateway is None:
        raise ValueError("recompute requires a gateway")

    rng = random.Random(seed)
    stats = {s.query.id: rarity(s.ci, config.alpha) for s in samples}
    categories = {
        sid: categorize(st.r, config.delta1, config.delta2) for sid, st in stats.items()
    }
    trivial = [s for s in samples if categories[s.query.id] is SampleCategory.TRIVIAL]
    hard = [s for s in samples if categories[s.query.id] is SampleCategory.HARD]
    neither = [s for s in samples if categories[s.query.id] is SampleCategory.NEITHER]

    kept_trivial = downsample(trivial, config.keep_rate, rng.randrange(2**32))

    synthetic: list[Sample] = []
    interventions: list[dict[str, Any]] = []
    skipped = {"no_high_ci": 0, "no_donor": 0}
    for host in hard:
        try:
            _high_ci_contexts(host, config.gamma)
        except ValueError:
            skipped["no_high_ci"] += 1
            continue
        donors = [s for s in samples if s.query.id != host.query.id]
        rng.shuffle(donors)
        for flavor, per_hard, op in (
            ("high-ci", config.high_per_hard, intervene_high),
            ("low-ci", config.low_per_hard, intervene_low),
        ):
            made = 0
            for donor in donors:
                if made >= per_hard:
                    break
                call_seed = rng.randrange(2**32)
                new_id = f"{host.query.id}#{flavor}{made}"
                try:
                    out = op(
                        host,
                        donor,
                        config.gamma,
                        config.donor_subset_size,
                        call_seed,
                        recompute=config.recompute,
                        gateway=gateway,
                        kind=kind,
                        metric=metric,
                        query_embeddings=query_embeddings,
                        cosine_threshold=config.cosine_threshold,
                        new_id=new_id,
                    )
                except ValueError:
                    continue  # this donor not usable; try the next
                synthetic.append(out)
                interventions.append(
                    {
                        "kind": flavor,
                        "host_id": host.query.id,
                        "donor_id": donor.query.id,
                        "new_id": out.query.id,
                        "recomputed": config.recompute,
                    }
                )
                made += 1
            if made < per_hard and per_hard > 0:
                skipped["no_donor"] += 1

    corpus_samples = list(kept_trivial) + list(neither) + list(hard) + synthetic

    valued = [s for s in corpus_samples if s.ci is not None]
    corpus_stats = {}
    for s in valued:
        sid = s.query.id
        st = stats.get(sid)
        corpus_stats[sid] = st if st is not None else rarity(s.ci, config.alpha)
    freq = empirical_freq([corpus_stats[s.query.id].r for s in valued], config.bin_count)

    final: list[Sample] = []
    for s in corpus_samples:
        meta = dict(s.meta)
        if s.ci is not None:
            st = corpus_stats[s.query.id]
            cat = categorize(st.r, config.delta1, config.delta2)
            meta["rarity"] = st.r
            meta["category"] = cat.value
            meta["freq_p"] = freq.lookup(st.r)
            if cat is SampleCategory.HARD:
                pairs = contrastive_pairs(
                    s,
                    config.epsilon1,
                    config.epsilon2,
                    config.max_negatives,
                    rng.randrange(2**32),
                )
                meta["contrastive_pairs"] = [
                    [p.anchor, p.positive, list(p.negatives)] for p in pairs
                ]
        final.append(Sample(s.query, s.answers, s.contexts, s.ci, meta))

    manifest = {
        "config": asdict(config),
        "seed": seed,
        "counts": {
            "input": len(samples),
            "trivial": len(trivial),
            "trivial_kept": len(kept_trivial),
            "hard": len(hard),
            "neither": len(neither),
            "synthetic_high": sum(1 for i in interventions if i["kind"] == "high-ci"),
            "synthetic_low": sum(1 for i in interventions if i["kind"] == "low-ci"),
            "corpus": len(final),
            "skipped": skipped,
        },
        "frequency_table": freq.to_dict(),
        "interventions": interventions,
    }
    return ForgeResult(corpus=tuple(final), manifest=manifest)
