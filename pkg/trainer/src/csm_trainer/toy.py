"""Planted-structure testbed for end-to-end training.

The toy generator's answer distribution is an analytic, differentiable
function of the masked fact votes: softmax over the answer vocabulary of
the mask-weighted sum of per-context vote vectors. Golden contexts vote for
the gold answer, poison contexts vote for a wrong answer, noise contexts
vote for nothing. Context embeddings encode the type direction plus noise,
so a scorer can learn to separate them from generator feedback alone.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from csm_trainer.data import TrainSample


class ToyGenerator(nn.Module):
    """Frozen differentiable generator over a small answer vocabulary."""

    def __init__(self, vocab_size: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.register_buffer("logit_scale", torch.tensor(1.0))

    def distribution(self, votes: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """softmax over the vocabulary of the mask-weighted vote sum."""
        logits = self.logit_scale * (mask[:, None] * votes).sum(dim=0)
        return torch.softmax(logits, dim=-1)

    def gold_logprob(self, votes: torch.Tensor, mask: torch.Tensor, gold: int) -> torch.Tensor:
        logits = self.logit_scale * (mask[:, None] * votes).sum(dim=0)
        return torch.log_softmax(logits, dim=-1)[gold]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, buf in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(buf.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def make_planted_corpus(
    n_samples: int,
    dim: int,
    seed: int,
    vocab_size: int = 8,
    n_golden: int = 2,
    n_poison: int = 2,
    n_noise: int = 2,
    vote_strength: float = 4.0,
    embedding_noise: float = 0.3,
) -> tuple[list[TrainSample], dict[str, str]]:
    """Samples with typed contexts plus a context-id -> type map."""
    rng = np.random.default_rng(seed)
    golden_dir = rng.normal(size=dim)
    golden_dir /= np.linalg.norm(golden_dir)
    poison_dir = rng.normal(size=dim)
    poison_dir -= golden_dir * (poison_dir @ golden_dir)
    poison_dir /= np.linalg.norm(poison_dir)

    samples: list[TrainSample] = []
    kinds: dict[str, str] = {}
    for i in range(n_samples):
        qid = f"toy{i:04d}"
        gold = int(rng.integers(vocab_size))
        wrong = int((gold + 1 + rng.integers(vocab_size - 1)) % vocab_size)
        roster = (
            [("golden", g) for g in range(n_golden)]
            + [("poison", p) for p in range(n_poison)]
            + [("noise", m) for m in range(n_noise)]
        )
        rng.shuffle(roster)
        cids, rows, votes = [], [], []
        for kind, j in roster:
            cid = f"{qid}/{kind}{j}"
            cids.append(cid)
            kinds[cid] = kind
            vote = np.zeros(vocab_size)
            if kind == "golden":
                base = golden_dir
                vote[gold] = vote_strength / n_golden
            elif kind == "poison":
                base = poison_dir
                vote[wrong] = vote_strength / n_poison
            else:
                base = np.zeros(dim)
            rows.append(base + embedding_noise * rng.normal(size=dim))
            votes.append(vote)
        samples.append(
            TrainSample(
                query_id=qid,
                context_ids=tuple(cids),
                embeddings=torch.tensor(np.stack(rows), dtype=torch.float32),
                gold_index=gold,
                votes=torch.tensor(np.stack(votes), dtype=torch.float32),
            )
        )
    return samples, kinds


def pairwise_ranking_accuracy(
    scores: dict[str, float], kinds: dict[str, str]
) -> float:
    """Fraction of (golden, poison) pairs within each sample where the
    golden context outscores the poison context."""
    by_sample: dict[str, list[tuple[str, float]]] = {}
    for cid, s in scores.items():
        by_sample.setdefault(cid.rsplit("/", 1)[0], []).append((cid, s))
    wins = total = 0
    for members in by_sample.values():
        golden = [s for cid, s in members if kinds[cid] == "golden"]
        poison = [s for cid, s in members if kinds[cid] == "poison"]
        for g in golden:
            for p in poison:
                total += 1
                wins += g > p
    return wins / total if total else float("nan")
