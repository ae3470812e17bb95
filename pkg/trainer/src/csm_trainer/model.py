"""The influence scorer: 3-layer 8-head pre-norm self-attention over local
pair embeddings, followed by a 2-layer MLP head.

The architecture and its `.csmw` tensor layout mirror the inference side
exactly: projections apply as y = x @ w + b on row vectors, layer norm uses
eps 1e-5, activations are exact (erf) GELU, and there is no positional
encoding.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

GLOBAL_LAYERS = 3
GLOBAL_HEADS = 8
LN_EPS = 1e-5


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        q = self.wq(x).view(n, self.heads, self.head_dim).transpose(0, 1)
        k = self.wk(x).view(n, self.heads, self.head_dim).transpose(0, 1)
        v = self.wv(x).view(n, self.heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(0, 1).reshape(n, d)
        return self.wo(ctx)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class InfluenceScorer(nn.Module):
    """Scores each context row of an (n, dim) pair-embedding matrix."""

    def __init__(
        self,
        dim: int,
        ffn_dim: int | None = None,
        mlp_hidden: int | None = None,
        local_encoder: str = "bert-base-uncased",
    ):
        super().__init__()
        self.dim = dim
        self.ffn_dim = ffn_dim if ffn_dim is not None else 2 * dim
        self.mlp_hidden = mlp_hidden if mlp_hidden is not None else dim
        self.local_encoder = local_encoder
        self.blocks = nn.ModuleList(
            Block(dim, GLOBAL_HEADS, self.ffn_dim) for _ in range(GLOBAL_LAYERS)
        )
        self.head = nn.Sequential(
            nn.Linear(dim, self.mlp_hidden), nn.GELU(), nn.Linear(self.mlp_hidden, 1)
        )

    def globals_and_scores(self, L: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Global embeddings G (the contrastive-loss representations) and
        per-context scores M."""
        x = L
        for block in self.blocks:
            x = block(x)
        return x, self.head(x).squeeze(-1)

    def forward(self, L: torch.Tensor) -> torch.Tensor:
        return self.globals_and_scores(L)[1]

    # -- interchange ----------------------------------------------------

    def metadata(self) -> dict:
        return {
            "dim": self.dim,
            "heads": GLOBAL_HEADS,
            "layers": GLOBAL_LAYERS,
            "ffn_dim": self.ffn_dim,
            "mlp_hidden": self.mlp_hidden,
            "ln_eps": LN_EPS,
            "activation": "gelu",
            "local_encoder": self.local_encoder,
        }

    def export_tensors(self) -> dict[str, np.ndarray]:
        """Interchange tensors; Linear weights transpose to x @ w + b form."""

        def mat(linear: nn.Linear) -> np.ndarray:
            return linear.weight.detach().cpu().numpy().T.astype(np.float32)

        def vec(linear: nn.Linear) -> np.ndarray:
            return linear.bias.detach().cpu().numpy().astype(np.float32)

        def ln(norm: nn.LayerNorm) -> tuple[np.ndarray, np.ndarray]:
            return (
                norm.weight.detach().cpu().numpy().astype(np.float32),
                norm.bias.detach().cpu().numpy().astype(np.float32),
            )

        tensors: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            prefix = f"blocks.{i}"
            tensors[f"{prefix}.ln1.scale"], tensors[f"{prefix}.ln1.bias"] = ln(block.ln1)
            tensors[f"{prefix}.ln2.scale"], tensors[f"{prefix}.ln2.bias"] = ln(block.ln2)
            for name, linear in (
                ("wq", block.attn.wq),
                ("wk", block.attn.wk),
                ("wv", block.attn.wv),
                ("wo", block.attn.wo),
            ):
                tensors[f"{prefix}.attn.{name}"] = mat(linear)
                tensors[f"{prefix}.attn.b{name[1]}"] = vec(linear)
            tensors[f"{prefix}.ffn.w1"] = mat(block.ffn[0])
            tensors[f"{prefix}.ffn.b1"] = vec(block.ffn[0])
            tensors[f"{prefix}.ffn.w2"] = mat(block.ffn[2])
            tensors[f"{prefix}.ffn.b2"] = vec(block.ffn[2])
        tensors["head.w1"] = mat(self.head[0])
        tensors["head.b1"] = vec(self.head[0])
        tensors["head.w2"] = mat(self.head[2])
        tensors["head.b2"] = vec(self.head[2])
        return tensors
