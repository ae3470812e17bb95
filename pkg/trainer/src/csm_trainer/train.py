"""Training loops: supervised regression on oracle influence targets and
end-to-end training through a frozen generator via soft context selection.

Determinism contract: with a fixed seed on one device, two runs produce
identical loss trajectories. The generator is never updated in end-to-end
mode; only scorer parameters receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from csm_trainer.data import TrainSample
from csm_trainer.losses import (
    combine_end2end,
    combine_supervised,
    contrastive_loss,
    gumbel_mask,
    necessity_loss,
    sufficiency_loss,
    weighted_mse,
)
from csm_trainer.model import InfluenceScorer
from csm_trainer.toy import ToyGenerator
from csm_trainer.weights_io import write_csmw


@dataclass
class TrainConfig:
    """Hyperparameters. Reference defaults: supervised 10 epochs at batch
    size 16 with tau=1 and beta=0.1; end-to-end 10 epochs at batch size 4
    with lambda=1. Optimizer settings are implementation defaults."""

    paradigm: str = "supervised"
    local_encoder: str = "bert-base-uncased"
    epochs: int = 10
    batch_size: int = 16
    beta: float = 0.1
    tau: float = 1.0
    lam: float = 1.0
    gumbel_temperature: float = 1.0
    hard_mask: bool = False
    lr: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 2024
    ffn_dim: int | None = None
    mlp_hidden: int | None = None

    def __post_init__(self) -> None:
        if self.paradigm not in ("supervised", "end-to-end"):
            raise ValueError(f"unknown paradigm: {self.paradigm!r}")
        if self.paradigm == "end-to-end" and self.batch_size == 16:
            self.batch_size = 4  # reference default for generator-in-the-loop

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: InfluenceScorer
    log: list[dict] = field(default_factory=list)


def _batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator).tolist()
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_supervised(samples: Sequence[TrainSample], config: TrainConfig) -> TrainResult:
    """Minimize reweighted MSE plus the contrastive term on hard samples.

    Samples without influence targets (label-free synthetics) are skipped
    by the regression term; their count is recorded in the log header.
    """
    if config.paradigm != "supervised":
        raise ValueError("config paradigm must be 'supervised'")
    targeted = [s for s in samples if s.targets is not None]
    if not targeted:
        raise ValueError("corpus carries no influence targets")
    for s in targeted:
        if s.freq_p is None:
            raise ValueError(f"sample {s.query_id!r} lacks a frequency weight")
    dim = targeted[0].embeddings.shape[1]
    torch.manual_seed(config.seed)
    model = InfluenceScorer(
        dim, config.ffn_dim, config.mlp_hidden, local_encoder=config.local_encoder
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    shuffler = torch.Generator().manual_seed(config.seed)
    log: list[dict] = [
        {
            "event": "start",
            "paradigm": "supervised",
            "n_samples": len(samples),
            "n_targeted": len(targeted),
            "config": config.echo(),
        }
    ]
    step = 0
    for epoch in range(config.epochs):
        for batch_idx in _batches(len(targeted), config.batch_size, shuffler):
            batch = [targeted[i] for i in batch_idx]
            preds, targets, weights = [], [], []
            pair_losses = []
            for s in batch:
                g, m = model.globals_and_scores(s.embeddings)
                preds.append(m)
                targets.append(s.targets)
                weights.append(s.freq_p)
                if s.category == "hard" and s.pairs:
                    pair_losses.append(contrastive_loss(g, s.pairs, config.tau))
            mse = weighted_mse(preds, targets, weights)
            if pair_losses:
                cts = torch.stack(pair_losses).mean()
            else:
                cts = mse.new_zeros(())
            loss = combine_supervised(mse, cts, config.beta)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "mse": float(mse.detach()),
                    "cts": float(cts.detach()),
                    "combined": float(loss.detach()),
                }
            )
            step += 1
    return TrainResult(model=model, log=log)


def train_end2end(
    samples: Sequence[TrainSample],
    generator: ToyGenerator,
    config: TrainConfig,
) -> TrainResult:
    """Minimize sufficiency + lambda * necessity through the soft mask.

    The scorer's outputs become per-context keep probabilities via the
    Gumbel-Softmax trick; the kept mask scales each context's contribution
    to the frozen generator, and the complement mask drives the necessity
    term. Gradients flow only into scorer parameters.
    """
    if config.paradigm != "end-to-end":
        raise ValueError("config paradigm must be 'end-to-end'")
    for s in samples:
        if s.votes is None or s.gold_index is None:
            raise ValueError(f"sample {s.query_id!r} lacks generator hooks")
    dim = samples[0].embeddings.shape[1]
    torch.manual_seed(config.seed)
    model = InfluenceScorer(
        dim, config.ffn_dim, config.mlp_hidden, local_encoder=config.local_encoder
    )
    for p in generator.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    shuffler = torch.Generator().manual_seed(config.seed)
    noise = torch.Generator().manual_seed(config.seed + 1)
    log: list[dict] = [
        {
            "event": "start",
            "paradigm": "end-to-end",
            "n_samples": len(samples),
            "generator_checksum": generator.checksum(),
            "config": config.echo(),
        }
    ]
    step = 0
    for epoch in range(config.epochs):
        for batch_idx in _batches(len(samples), config.batch_size, shuffler):
            batch = [samples[i] for i in batch_idx]
            gold_lps, comp_kls = [], []
            for s in batch:
                scores = model(s.embeddings)
                mask = gumbel_mask(
                    scores, config.gumbel_temperature, generator=noise, hard=config.hard_mask
                )
                gold_lps.append(generator.gold_logprob(s.votes, mask, s.gold_index))
                comp_kls.append(necessity_loss(generator.distribution(s.votes, 1.0 - mask)))
            suf = sufficiency_loss([lp[None] for lp in gold_lps])
            nec = torch.stack(comp_kls).mean()
            loss = combine_end2end(suf, nec, config.lam)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "suf": float(suf.detach()),
                    "nec": float(nec.detach()),
                    "combined": float(loss.detach()),
                }
            )
            step += 1
    log.append({"event": "end", "generator_checksum": generator.checksum()})
    return TrainResult(model=model, log=log)


def export_weights(model: InfluenceScorer, path: str | Path) -> None:
    """Write the `.csmw` interchange file the inference side loads."""
    write_csmw(path, model.metadata(), model.export_tensors())


def write_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(log, fh, sort_keys=True, indent=2)
        fh.write("\n")
