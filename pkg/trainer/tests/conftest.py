from __future__ import annotations

import numpy as np
import pytest
import torch

from csm_trainer.data import TrainSample


def linear_corpus(n_train: int, n_held: int, dim: int, seed: int, scale: float = 0.1):
    """Train/held-out samples whose influence targets are one fixed linear
    map of the provided embeddings; recoverable by construction."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=dim)
    out = []
    for i in range(n_train + n_held):
        k = int(rng.integers(3, 9))
        emb = rng.normal(size=(k, dim)).astype(np.float32)
        phi = (emb @ w_true) * scale
        out.append(
            TrainSample(
                query_id=f"lin{seed}-{i}",
                context_ids=tuple(f"lin{seed}-{i}/c{j}" for j in range(k)),
                embeddings=torch.from_numpy(emb),
                targets=torch.tensor(phi, dtype=torch.float32),
                freq_p=1.0,
                category="trivial",
            )
        )
    return out[:n_train], out[n_train:]


@pytest.fixture(scope="session")
def linear_split():
    return linear_corpus(120, 40, 16, seed=5)
