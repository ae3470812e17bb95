"""Corpus and embedding ingestion.

Reads the valuation package's external formats directly: sample JSON Lines
({"id", "query", "answers", "contexts", "ci"?, "meta"?}), the forge
manifest (for the rarity frequency table), and pair-embedding JSON Lines
({"query_id", "context_id", "vector"}).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


@dataclass
class TrainSample:
    query_id: str
    context_ids: tuple[str, ...]
    embeddings: torch.Tensor  # (n, dim) float32
    targets: torch.Tensor | None = None  # (n,) oracle influence values
    freq_p: float | None = None
    category: str | None = None
    pairs: tuple[tuple[int, int, tuple[int, ...]], ...] = ()
    # end-to-end extras
    gold_index: int | None = None
    votes: torch.Tensor | None = None  # (n, vocab)

    def __len__(self) -> int:
        return len(self.context_ids)


def load_embedding_table(path: str | Path) -> dict[tuple[str, str], np.ndarray]:
    table: dict[tuple[str, str], np.ndarray] = {}
    dim = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            vec = np.asarray(rec["vector"], dtype=np.float32)
            if dim == 0:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(f"inconsistent embedding dimension: {vec.shape[0]} vs {dim}")
            table[(str(rec["query_id"]), str(rec["context_id"]))] = vec
    return table


def _parse_pairs(raw) -> tuple[tuple[int, int, tuple[int, ...]], ...]:
    if not raw:
        return ()
    return tuple((int(a), int(p), tuple(int(n) for n in negs)) for a, p, negs in raw)


def load_corpus(
    corpus_path: str | Path,
    embeddings_path: str | Path,
) -> list[TrainSample]:
    """Corpus records joined with their pair embeddings."""
    table = load_embedding_table(embeddings_path)
    samples: list[TrainSample] = []
    with open(corpus_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            qid = str(rec["id"])
            cids = tuple(str(c["id"]) for c in rec["contexts"])
            rows = []
            for cid in cids:
                key = (qid, cid)
                if key not in table:
                    raise ValueError(f"line {lineno}: no embedding for pair {key!r}")
                rows.append(table[key])
            emb = torch.from_numpy(np.stack(rows)) if rows else torch.zeros(0, 0)
            meta = rec.get("meta") or {}
            ci = rec.get("ci")
            samples.append(
                TrainSample(
                    query_id=qid,
                    context_ids=cids,
                    embeddings=emb,
                    targets=torch.tensor(ci, dtype=torch.float32) if ci is not None else None,
                    freq_p=float(meta["freq_p"]) if "freq_p" in meta else None,
                    category=meta.get("category"),
                    pairs=_parse_pairs(meta.get("contrastive_pairs")),
                )
            )
    return samples


def load_toy_corpus(
    corpus_path: str | Path,
    embeddings_path: str | Path,
) -> list[TrainSample]:
    """End-to-end toy corpus: JSON Lines of
    {"id", "gold_index", "contexts": [{"id", "votes": [...]}]}."""
    table = load_embedding_table(embeddings_path)
    samples: list[TrainSample] = []
    with open(corpus_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            qid = str(rec["id"])
            cids = tuple(str(c["id"]) for c in rec["contexts"])
            emb = torch.from_numpy(np.stack([table[(qid, cid)] for cid in cids]))
            votes = torch.tensor(
                [c["votes"] for c in rec["contexts"]], dtype=torch.float32
            )
            samples.append(
                TrainSample(
                    query_id=qid,
                    context_ids=cids,
                    embeddings=emb,
                    gold_index=int(rec["gold_index"]),
                    votes=votes,
                )
            )
    return samples


def save_toy_corpus(
    path: str | Path, samples: Sequence[TrainSample]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "id": s.query_id,
                "gold_index": s.gold_index,
                "contexts": [
                    {"id": cid, "votes": [float(v) for v in row]}
                    for cid, row in zip(s.context_ids, s.votes)
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
