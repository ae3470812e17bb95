"""Influence-scorer inference: weight interchange format, pluggable pair
embeddings, the global self-attention stack, and the MLP scoring head.

The global stack has no positional encoding, so scores are a function of
the context set only. Forward passes compute over rows sorted into a
canonical order and restore the caller's order afterwards, which makes
permutation equivariance hold exactly in floating point, not just in
exact arithmetic.

Weight files (`.csmw`) are a little-endian uint64 header length, a JSON
header (metadata, tensor manifest, payload checksum), then the raw
float32 tensor payload in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol

import httpx
import numpy as np
from scipy.special import erf

from cival.types import Context, ContextList, Query, SelectionResult

FORMAT_NAME = "csmw"
FORMAT_VERSION = 1
GLOBAL_LAYERS = 3
GLOBAL_HEADS = 8
DEFAULT_LN_EPS = 1e-5
DEFAULT_LOCAL_ENCODER = "bert-base-uncased"


class WeightFormatError(ValueError):
    """The weight file cannot be parsed or is internally inconsistent."""


class WeightChecksumError(WeightFormatError):
    """The payload does not match the header checksum."""


class WeightShapeError(WeightFormatError):
    """A tensor's shape disagrees with the declared architecture."""


def expected_shapes(dim: int, heads: int, layers: int, ffn_dim: int, mlp_hidden: int) -> dict[str, tuple[int, ...]]:
    """Tensor manifest for the fixed architecture. Projections apply as
    row-vector matmuls: y = x @ w + b."""
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(layers):
        prefix = f"blocks.{i}"
        shapes[f"{prefix}.ln1.scale"] = (dim,)
        shapes[f"{prefix}.ln1.bias"] = (dim,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}"] = (dim, dim)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.attn.{b}"] = (dim,)
        shapes[f"{prefix}.ln2.scale"] = (dim,)
        shapes[f"{prefix}.ln2.bias"] = (dim,)
        shapes[f"{prefix}.ffn.w1"] = (dim, ffn_dim)
        shapes[f"{prefix}.ffn.b1"] = (ffn_dim,)
        shapes[f"{prefix}.ffn.w2"] = (ffn_dim, dim)
        shapes[f"{prefix}.ffn.b2"] = (dim,)
    shapes["head.w1"] = (dim, mlp_hidden)
    shapes["head.b1"] = (mlp_hidden,)
    shapes["head.w2"] = (mlp_hidden, 1)
    shapes["head.b2"] = (1,)
    return shapes


@dataclass(frozen=True)
class CSMWeights:
    """Loaded, shape-validated scorer parameters (float32)."""

    dim: int
    ffn_dim: int
    mlp_hidden: int
    tensors: Mapping[str, np.ndarray]
    heads: int = GLOBAL_HEADS
    layers: int = GLOBAL_LAYERS
    ln_eps: float = DEFAULT_LN_EPS
    activation: str = "gelu"
    local_encoder: str = DEFAULT_LOCAL_ENCODER

    def __post_init__(self) -> None:
        if self.layers != GLOBAL_LAYERS or self.heads != GLOBAL_HEADS:
            raise WeightShapeError(
                f"architecture is fixed at {GLOBAL_LAYERS} layers / {GLOBAL_HEADS} heads,"
                f" got {self.layers}/{self.heads}"
            )
        if self.dim % self.heads != 0:
            raise WeightShapeError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.activation != "gelu":
            raise WeightFormatError(f"unsupported activation: {self.activation!r}")
        expected = expected_shapes(self.dim, self.heads, self.layers, self.ffn_dim, self.mlp_hidden)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise WeightShapeError(f"tensor manifest mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            actual = tuple(self.tensors[name].shape)
            if actual != shape:
                raise WeightShapeError(f"{name}: expected shape {shape}, got {actual}")

    def metadata(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "heads": self.heads,
            "layers": self.layers,
            "ffn_dim": self.ffn_dim,
            "mlp_hidden": self.mlp_hidden,
            "ln_eps": self.ln_eps,
            "activation": self.activation,
            "local_encoder": self.local_encoder,
        }


def save_weights(weights: CSMWeights, path: str | Path) -> None:
    """Serialize to the `.csmw` interchange format."""
    names = sorted(weights.tensors)
    manifest = []
    chunks = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        blob = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset}
        )
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "metadata": weights.metadata(),
        "tensors": manifest,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_weights(path: str | Path) -> CSMWeights:
    """Parse, shape-validate and checksum-verify a `.csmw` file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise WeightFormatError("file too short for header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise WeightFormatError("file truncated inside header")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"header parse failure: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise WeightFormatError(f"not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version: {header.get('version')!r}")
    payload = raw[8 + header_len :]
    checksum = hashlib.sha256(payload).hexdigest()
    if checksum != header.get("checksum"):
        raise WeightChecksumError("payload checksum mismatch (file corrupted or truncated)")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        if entry.get("dtype") != "float32":
            raise WeightFormatError(f"{entry.get('name')}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        end = offset + 4 * count
        if end > len(payload):
            raise WeightChecksumError(f"{entry['name']}: payload truncated")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    md = header.get("metadata", {})
    try:
        return CSMWeights(
            dim=int(md["dim"]),
            ffn_dim=int(md["ffn_dim"]),
            mlp_hidden=int(md["mlp_hidden"]),
            tensors=tensors,
            heads=int(md.get("heads", GLOBAL_HEADS)),
            layers=int(md.get("layers", GLOBAL_LAYERS)),
            ln_eps=float(md.get("ln_eps", DEFAULT_LN_EPS)),
            activation=str(md.get("activation", "gelu")),
            local_encoder=str(md.get("local_encoder", DEFAULT_LOCAL_ENCODER)),
        )
    except KeyError as exc:
        raise WeightFormatError(f"metadata missing field {exc.args[0]!r}") from exc


def random_weights(
    seed: int,
    dim: int = 16,
    ffn_dim: int = 32,
    mlp_hidden: int = 16,
    scale: float = 0.2,
    local_encoder: str = DEFAULT_LOCAL_ENCODER,
) -> CSMWeights:
    """Randomly initialized weights (normal matrices, identity layer norm,
    zero biases); used for tests, benchmarks, and fresh training runs."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(dim, GLOBAL_HEADS, GLOBAL_LAYERS, ffn_dim, mlp_hidden).items():
        if name.endswith(".scale"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.normal(size=shape) * scale).astype(np.float32)
    return CSMWeights(
        dim=dim, ffn_dim=ffn_dim, mlp_hidden=mlp_hidden, tensors=tensors,
        local_encoder=local_encoder,
    )


# -- embedding providers --------------------------------------------------


class MissingEmbeddingError(KeyError):
    """No vector is available for a (query, context) pair."""


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, query: Query, context: Context) -> np.ndarray: ...


class FileEmbeddings:
    """Precomputed pair vectors from JSON Lines records of
    {"query_id", "context_id", "vector": [...]}."""

    def __init__(self, source: str | Path | Iterable[Mapping[str, Any]]):
        self._vectors: dict[tuple[str, str], np.ndarray] = {}
        self.dim = 0
        if isinstance(source, (str, Path)):
            records = self._read(Path(source))
        else:
            records = source
        for rec in records:
            vec = np.asarray(rec["vector"], dtype=np.float64)
            if self.dim == 0:
                self.dim = vec.shape[0]
            elif vec.shape[0] != self.dim:
                raise ValueError(
                    f"inconsistent embedding dimension: {vec.shape[0]} vs {self.dim}"
                )
            self._vectors[(str(rec["query_id"]), str(rec["context_id"]))] = vec

    @staticmethod
    def _read(path: Path) -> Iterable[Mapping[str, Any]]:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)

    def embed(self, query: Query, context: Context) -> np.ndarray:
        try:
            return self._vectors[(query.id, context.id)]
        except KeyError:
            raise MissingEmbeddingError(
                f"no vector for pair (query={query.id!r}, context={context.id!r})"
            ) from None


class RemoteEmbeddings:
    """OpenAI-compatible /embeddings backend over the rendered pair text."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        import os

        self.dim = dim
        self.model = model
        headers = {}
        api_key = os.environ.get(api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=endpoint, headers=headers, timeout=timeout, transport=transport
        )

    def embed(self, query: Query, context: Context) -> np.ndarray:
        resp = self._client.post(
            "/embeddings",
            json={"model": self.model, "input": [f"{query.text}\n\n{context.text}"]},
        )
        resp.raise_for_status()
        vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        if vec.shape[0] != self.dim:
            raise ValueError(f"endpoint returned dimension {vec.shape[0]}, expected {self.dim}")
        return vec


def embed_pairs(query: Query, contexts: ContextList, provider: EmbeddingProvider) -> np.ndarray:
    """One pair vector per context, stacked to an (n, dim) matrix."""
    if len(contexts) == 0:
        return np.zeros((0, provider.dim), dtype=np.float64)
    return np.stack([provider.embed(query, ctx) for ctx in contexts])


# -- forward pass ---------------------------------------------------------
#
# BLAS kernels choose SIMD accumulation strategies per row *position* (most
# visibly for narrow outputs), so the same row content can round differently
# at different positions. To make permutation equivariance exact, both the
# attention stack and the scoring head compute on rows sorted into a
# canonical (lexicographic) order, unify outputs of identical rows, and then
# restore the caller's order.


def _canonical_order(x: np.ndarray) -> np.ndarray:
    return np.lexsort(x.T[::-1])


def _unify_duplicate_rows(x_sorted: np.ndarray, out_sorted: np.ndarray) -> np.ndarray:
    n = x_sorted.shape[0]
    start = 0
    for i in range(1, n + 1):
        if i == n or not np.array_equal(x_sorted[i], x_sorted[start]):
            if i - start > 1:
                out_sorted[start + 1 : i] = out_sorted[start]
            start = i
    return out_sorted


def _canonicalized(fn, x: np.ndarray) -> np.ndarray:
    order = _canonical_order(x)
    xc = np.ascontiguousarray(x[order])
    out = _unify_duplicate_rows(xc, fn(xc))
    restored = np.empty_like(out)
    restored[order] = out
    return restored


def _layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _attention(h: np.ndarray, t: Mapping[str, np.ndarray], prefix: str, heads: int) -> np.ndarray:
    n, d = h.shape
    dh = d // heads
    q = h @ t[f"{prefix}.wq"] + t[f"{prefix}.bq"]
    k = h @ t[f"{prefix}.wk"] + t[f"{prefix}.bk"]
    v = h @ t[f"{prefix}.wv"] + t[f"{prefix}.bv"]
    # (n, d) -> (heads, n, dh)
    q = q.reshape(n, heads, dh).transpose(1, 0, 2)
    k = k.reshape(n, heads, dh).transpose(1, 0, 2)
    v = v.reshape(n, heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=-1, keepdims=True)
    ctx = a @ v  # (heads, n, dh)
    merged = ctx.transpose(1, 0, 2).reshape(n, d)
    return merged @ t[f"{prefix}.wo"] + t[f"{prefix}.bo"]


def _forward_blocks(x: np.ndarray, weights: CSMWeights) -> np.ndarray:
    t = {name: arr.astype(np.float64) for name, arr in weights.tensors.items()}
    for i in range(weights.layers):
        prefix = f"blocks.{i}"
        h = _layer_norm(x, t[f"{prefix}.ln1.scale"], t[f"{prefix}.ln1.bias"], weights.ln_eps)
        x = x + _attention(h, t, f"{prefix}.attn", weights.heads)
        h = _layer_norm(x, t[f"{prefix}.ln2.scale"], t[f"{prefix}.ln2.bias"], weights.ln_eps)
        x = x + _gelu(h @ t[f"{prefix}.ffn.w1"] + t[f"{prefix}.ffn.b1"]) @ t[f"{prefix}.ffn.w2"] + t[f"{prefix}.ffn.b2"]
    return x


def global_forward(L: np.ndarray, weights: CSMWeights) -> np.ndarray:
    """Three pre-normalized self-attention blocks over the context rows.

    No positional encoding: the output is permutation-equivariant in the
    input rows, exactly (see the canonical-order note above).
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[1] != weights.dim:
        raise WeightShapeError(
            f"input must be (n, {weights.dim}), got {L.shape}"
        )
    if L.shape[0] == 0:
        return L.copy()
    return _canonicalized(lambda x: _forward_blocks(x, weights), L)


def score(G: np.ndarray, weights: CSMWeights) -> np.ndarray:
    """Row-wise two-layer MLP from global embeddings to scalar scores."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != weights.dim:
        raise WeightShapeError(f"input must be (n, {weights.dim}), got {G.shape}")
    if G.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    t = weights.tensors
    w1 = t["head.w1"].astype(np.float64)
    b1 = t["head.b1"].astype(np.float64)
    w2 = t["head.w2"].astype(np.float64)
    b2 = t["head.b2"].astype(np.float64)
    return _canonicalized(lambda x: (_gelu(x @ w1 + b1) @ w2 + b2), G)[:, 0]


def score_contexts(
    query: Query, contexts: ContextList, weights: CSMWeights, provider: EmbeddingProvider
) -> np.ndarray:
    """Predicted influence scores for every context in the list."""
    L = embed_pairs(query, contexts, provider)
    if len(contexts) == 0:
        return np.zeros(0, dtype=np.float64)
    return score(global_forward(L, weights), weights)


def csm_select(
    query: Query, contexts: ContextList, weights: CSMWeights, provider: EmbeddingProvider
) -> SelectionResult:
    """Keep the contexts the scorer predicts as positive-influence."""
    m = score_contexts(query, contexts, weights, provider)
    kept = [(ctx.id, float(s)) for ctx, s in zip(contexts, m) if s > 0]
    return SelectionResult(
        kept_ids=tuple(cid for cid, _ in kept),
        scores=tuple(s for _, s in kept),
        strategy="positive-ci",
    )
