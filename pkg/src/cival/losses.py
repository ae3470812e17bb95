"""Reference implementations of the training losses and the Gumbel mask.

These are pure functions with no autodiff; the trainer re-implements them
on tensors and must match these values on identical numeric inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from cival.forge import ContrastivePairSet


@dataclass(frozen=True)
class LossBreakdown:
    """Component losses and their linear combination."""

    combined: float
    mse: float | None = None
    cts: float | None = None
    suf: float | None = None
    nec: float | None = None
    beta: float | None = None
    lam: float | None = None
    tau: float | None = None

    def __post_init__(self) -> None:
        for name in ("combined", "mse", "cts", "suf", "nec"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")


def _as_vector(values: Sequence[float]) -> np.ndarray:
    return np.asarray(tuple(values), dtype=float)


def weighted_mse(
    predictions: Sequence[Sequence[float]],
    targets: Sequence[Sequence[float]],
    p: Sequence[float],
) -> float:
    """Frequency-reweighted regression loss: the mean over samples of the
    per-sample mean squared error divided by that sample's empirical
    rarity frequency p(i). With uniform p = 1 this is plain MSE."""
    if not (len(predictions) == len(targets) == len(p)):
        raise ValueError(
            f"misaligned inputs: {len(predictions)} predictions,"
            f" {len(targets)} targets, {len(p)} weights"
        )
    if len(predictions) == 0:
        raise ValueError("no samples")
    terms = []
    for i, (pred, tgt, pi) in enumerate(zip(predictions, targets, p)):
        if pi <= 0:
            raise ValueError(f"p must be > 0, got {pi} at sample {i}")
        pv = _as_vector(pred)
        tv = _as_vector(tgt)
        if pv.shape != tv.shape:
            raise ValueError(f"sample {i}: prediction/target length mismatch")
        terms.append(float(np.mean((pv - tv) ** 2)) / pi)
    return float(np.mean(terms))


def contrastive_loss(
    embeddings: Sequence[Sequence[float]],
    pair_sets: Sequence[ContrastivePairSet],
    tau: float,
) -> float:
    """InfoNCE-style loss over anchor/positive/negative triples.

    For each anchor: -log( exp(g_a.g_+ / tau) /
    (sum_neg exp(g_a.g_- / tau) + exp(g_a.g_+ / tau)) ), averaged over
    anchors. Returns 0.0 for an empty pair-set list.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not pair_sets:
        return 0.0
    g = np.asarray([np.asarray(e, dtype=float) for e in embeddings], dtype=float)
    losses = []
    for ps in pair_sets:
        anchor = g[ps.anchor]
        s_pos = float(np.dot(anchor, g[ps.positive])) / tau
        s_neg = [float(np.dot(anchor, g[j])) / tau for j in ps.negatives]
        losses.append(float(logsumexp(np.array(s_neg + [s_pos]))) - s_pos)
    return float(np.mean(losses))


class GumbelMask(NamedTuple):
    """Forward mask values plus the underlying soft keep-coordinates.

    `values` equals `soft` unless the mask was hardened, in which case
    `values` holds the 0/1 straight-through forward values.
    """

    values: np.ndarray
    soft: np.ndarray


def gumbel_mask(
    scores: Sequence[float],
    temperature: float,
    seed: int,
    hard: bool = False,
) -> GumbelMask:
    """Two-category Gumbel-Softmax keep/drop mask per context.

    Each context's keep logit is its score m_i against a fixed drop logit
    of 0; with seeded Gumbel noise (g_keep, g_drop) the soft keep
    coordinate is sigmoid((m_i + g_keep - g_drop) / temperature).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    m = _as_vector(scores)
    rng = np.random.default_rng(seed)
    noise = rng.gumbel(size=(m.shape[0], 2))
    soft = expit((m + noise[:, 0] - noise[:, 1]) / temperature)
    if hard:
        return GumbelMask(values=(soft > 0.5).astype(float), soft=soft)
    return GumbelMask(values=soft, soft=soft)


def sufficiency_loss(gold_logprobs: Sequence[Sequence[float]] | Sequence[float]) -> float:
    """Negative log-likelihood of the gold answer tokens under the masked
    input, averaged over the batch. Accepts one item (a flat sequence of
    token log-probabilities) or a batch of such sequences."""
    items: Sequence[Sequence[float]]
    if len(gold_logprobs) > 0 and isinstance(gold_logprobs[0], (int, float)):
        items = [gold_logprobs]  # single item
    else:
        items = gold_logprobs  # type: ignore[assignment]
    if len(items) == 0:
        raise ValueError("no batch items")
    nlls = []
    for i, lps in enumerate(items):
        arr = _as_vector(lps)
        if arr.size and (not np.all(np.isfinite(arr)) or np.any(arr > 0)):
            raise ValueError(f"item {i}: log-probabilities must be finite and <= 0")
        nlls.append(-float(arr.sum()))
    return float(np.mean(nlls))


def necessity_loss(distribution: Sequence[float], epsilon: float = 1e-8) -> float:
    """KL divergence from the uniform distribution to the generator's
    output under the complement mask, with epsilon-clamped probabilities:
    sum_v (1/V) * ln((1/V) / max(f_v, epsilon)). Zero iff uniform."""
    f = _as_vector(distribution)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("distribution must be a non-empty vector")
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("malformed distribution: negative or non-finite mass")
    if abs(float(f.sum()) - 1.0) > 1e-6:
        raise ValueError(f"malformed distribution: sums to {float(f.sum())}")
    v = f.shape[0]
    u = 1.0 / v
    clamped = np.maximum(f, epsilon)
    return float(np.sum(u * (math.log(u) - np.log(clamped))))


def combine(
    losses: Mapping[str, float],
    beta: float = 0.1,
    lam: float = 1.0,
    tau: float | None = None,
) -> LossBreakdown:
    """Linear combination of component losses.

    Supervised: combined = mse + beta * cts. End-to-end: combined =
    suf + lam * nec. The mapping must carry exactly one paradigm's
    components.
    """
    has_st = "mse" in losses or "cts" in losses
    has_e2e = "suf" in losses or "nec" in losses
    if has_st and has_e2e:
        raise ValueError("mixed supervised and end-to-end components")
    if has_st:
        if "mse" not in losses or "cts" not in losses:
            raise ValueError("supervised combination requires both mse and cts")
        combined = losses["mse"] + beta * losses["cts"]
        return LossBreakdown(
            combined=combined, mse=losses["mse"], cts=losses["cts"], beta=beta, tau=tau
        )
    if has_e2e:
        if "suf" not in losses or "nec" not in losses:
            raise ValueError("end-to-end combination requires both suf and nec")
        combined = losses["suf"] + lam * losses["nec"]
        return LossBreakdown(
            combined=combined, suf=losses["suf"], nec=losses["nec"], lam=lam, tau=tau
        )
    raise ValueError("missing loss components")
