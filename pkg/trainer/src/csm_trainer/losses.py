"""Tensor implementations of the training losses and the Gumbel mask.

These must agree numerically with the valuation package's pure-function
references on identical inputs (the parity tests pin this to 1e-5).
"""

from __future__ import annotations

import math
from typing import Sequence

import torch

PairSet = tuple[int, int, Sequence[int]]  # (anchor, positive, negatives)


def weighted_mse(
    predictions: Sequence[torch.Tensor],
    targets: Sequence[torch.Tensor],
    p: Sequence[float],
) -> torch.Tensor:
    """Mean over samples of per-sample mean squared error divided by the
    sample's empirical rarity frequency."""
    if not (len(predictions) == len(targets) == len(p)):
        raise ValueError("misaligned inputs")
    if len(predictions) == 0:
        raise ValueError("no samples")
    terms = []
    for pred, tgt, pi in zip(predictions, targets, p):
        if pi <= 0:
            raise ValueError(f"p must be > 0, got {pi}")
        terms.append(torch.mean((pred - tgt) ** 2) / pi)
    return torch.stack(terms).mean()


def contrastive_loss(
    embeddings: torch.Tensor, pair_sets: Sequence[PairSet], tau: float
) -> torch.Tensor:
    """InfoNCE over anchor/positive/negative triples on the given rows."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not pair_sets:
        return embeddings.new_zeros(())
    losses = []
    for anchor, positive, negatives in pair_sets:
        a = embeddings[anchor]
        s_pos = torch.dot(a, embeddings[positive]) / tau
        s_neg = torch.stack([torch.dot(a, embeddings[j]) / tau for j in negatives])
        losses.append(torch.logsumexp(torch.cat([s_neg, s_pos[None]]), dim=0) - s_pos)
    return torch.stack(losses).mean()


def gumbel_mask(
    scores: torch.Tensor,
    temperature: float,
    generator: torch.Generator | None = None,
    hard: bool = False,
) -> torch.Tensor:
    """Two-category Gumbel-Softmax keep/drop mask, differentiable in the
    scores. Hard mode uses the straight-through estimator."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    u = torch.rand(scores.shape[0], 2, generator=generator, dtype=scores.dtype)
    noise = -torch.log(-torch.log(u))
    soft = torch.sigmoid((scores + noise[:, 0] - noise[:, 1]) / temperature)
    if hard:
        return (soft > 0.5).to(soft.dtype).detach() + soft - soft.detach()
    return soft


def sufficiency_loss(gold_logprobs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Negative log-likelihood of gold tokens, averaged over the batch."""
    if len(gold_logprobs) == 0:
        raise ValueError("no batch items")
    return torch.stack([-lp.sum() for lp in gold_logprobs]).mean()


def necessity_loss(distribution: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """KL from uniform to the complement-masked output distribution."""
    v = distribution.shape[-1]
    u = 1.0 / v
    clamped = torch.clamp(distribution, min=epsilon)
    return torch.sum(u * (math.log(u) - torch.log(clamped)), dim=-1)


def combine_supervised(mse: torch.Tensor, cts: torch.Tensor, beta: float) -> torch.Tensor:
    return mse + beta * cts


def combine_end2end(suf: torch.Tensor, nec: torch.Tensor, lam: float) -> torch.Tensor:
    return suf + lam * nec
