from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest

from cival.csm import (
    CSMWeights,
    FileEmbeddings,
    MissingEmbeddingError,
    RemoteEmbeddings,
    WeightChecksumError,
    WeightFormatError,
    WeightShapeError,
    csm_select,
    embed_pairs,
    expected_shapes,
    global_forward,
    load_weights,
    random_weights,
    save_weights,
    score,
    score_contexts,
)
from cival.types import Context, ContextList, Query


def zeroed_projection_weights(seed=0, dim=16):
    w = random_weights(seed, dim=dim)
    tensors = dict(w.tensors)
    for i in range(w.layers):
        tensors[f"blocks.{i}.attn.wo"] = np.zeros((dim, dim), dtype=np.float32)
        tensors[f"blocks.{i}.attn.bo"] = np.zeros(dim, dtype=np.float32)
        tensors[f"blocks.{i}.ffn.w2"] = np.zeros((w.ffn_dim, dim), dtype=np.float32)
        tensors[f"blocks.{i}.ffn.b2"] = np.zeros(dim, dtype=np.float32)
    return CSMWeights(dim=w.dim, ffn_dim=w.ffn_dim, mlp_hidden=w.mlp_hidden, tensors=tensors)


class TestWeightFormat:
    def test_round_trip(self, tmp_path):
        w = random_weights(3, dim=16, ffn_dim=24, mlp_hidden=8)
        path = tmp_path / "model.csmw"
        save_weights(w, path)
        loaded = load_weights(path)
        assert loaded.layers == 3 and loaded.heads == 8
        assert loaded.dim == 16 and loaded.ffn_dim == 24 and loaded.mlp_hidden == 8
        assert loaded.local_encoder == w.local_encoder
        for name, arr in w.tensors.items():
            assert np.array_equal(loaded.tensors[name], arr)

    def test_corrupted_payload_checksum(self, tmp_path):
        w = random_weights(4)
        path = tmp_path / "model.csmw"
        save_weights(w, path)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightChecksumError):
            load_weights(path)

    def test_truncated_file(self, tmp_path):
        w = random_weights(4)
        path = tmp_path / "model.csmw"
        save_weights(w, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 64])
        with pytest.raises(WeightChecksumError):
            load_weights(path)

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "model.csmw"
        path.write_bytes(b"\x10\x00\x00\x00\x00\x00\x00\x00not json at all!")
        with pytest.raises(WeightFormatError, match="parse failure"):
            load_weights(path)

    def test_shape_mismatch_detected(self):
        w = random_weights(5)
        tensors = dict(w.tensors)
        tensors["head.w1"] = np.zeros((w.dim + 1, w.mlp_hidden), dtype=np.float32)
        with pytest.raises(WeightShapeError, match="head.w1"):
            CSMWeights(dim=w.dim, ffn_dim=w.ffn_dim, mlp_hidden=w.mlp_hidden, tensors=tensors)

    def test_architecture_pinned(self):
        w = random_weights(6)
        with pytest.raises(WeightShapeError, match="fixed"):
            CSMWeights(
                dim=w.dim, ffn_dim=w.ffn_dim, mlp_hidden=w.mlp_hidden,
                tensors=dict(w.tensors), layers=2,
            )

    def test_dim_must_divide_heads(self):
        shapes = expected_shapes(10, 8, 3, 16, 8)
        tensors = {k: np.zeros(v, dtype=np.float32) for k, v in shapes.items()}
        with pytest.raises(WeightShapeError, match="divisible"):
            CSMWeights(dim=10, ffn_dim=16, mlp_hidden=8, tensors=tensors)


class TestForward:
    def test_permutation_equivariance_exact(self):
        rng = np.random.default_rng(17)
        for trial in range(30):
            w = random_weights(trial, dim=16)
            n = int(rng.integers(1, 9))
            L = rng.normal(size=(n, 16))
            base = score(global_forward(L, w), w)
            perm = rng.permutation(n)
            permuted = score(global_forward(L[perm], w), w)
            assert np.array_equal(permuted, base[perm])

    def test_zeroed_projections_are_identity(self):
        rng = np.random.default_rng(3)
        w = zeroed_projection_weights()
        L = rng.normal(size=(5, 16))
        G = global_forward(L, w)
        assert np.array_equal(G, L)

    def test_single_context(self):
        w = random_weights(8, dim=16)
        L = np.random.default_rng(0).normal(size=(1, 16))
        out1 = score(global_forward(L, w), w)
        out2 = score(global_forward(L, w), w)
        assert out1.shape == (1,)
        assert np.array_equal(out1, out2)

    def test_zero_head_weights_zero_scores(self):
        w = random_weights(2)
        tensors = dict(w.tensors)
        tensors["head.w1"] = np.zeros_like(tensors["head.w1"])
        tensors["head.b1"] = np.zeros_like(tensors["head.b1"])
        tensors["head.w2"] = np.zeros_like(tensors["head.w2"])
        tensors["head.b2"] = np.zeros_like(tensors["head.b2"])
        wz = CSMWeights(dim=w.dim, ffn_dim=w.ffn_dim, mlp_hidden=w.mlp_hidden, tensors=tensors)
        L = np.random.default_rng(1).normal(size=(4, 16))
        assert np.all(score(global_forward(L, wz), wz) == 0.0)

    def test_deterministic_across_threads(self):
        w = random_weights(9, dim=16)
        L = np.random.default_rng(2).normal(size=(7, 16))
        expected = score(global_forward(L, w), w)

        def run(_):
            return score(global_forward(L, w), w)

        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(run, range(8)))
        for r in results:
            assert np.array_equal(r, expected)

    def test_dimension_mismatch(self):
        w = random_weights(1, dim=16)
        with pytest.raises(WeightShapeError, match="input must be"):
            global_forward(np.zeros((3, 8)), w)

    def test_empty_input(self):
        w = random_weights(1, dim=16)
        assert global_forward(np.zeros((0, 16)), w).shape == (0, 16)


class TestEmbeddings:
    def records(self):
        return [
            {"query_id": "q", "context_id": f"c{i}", "vector": [float(i), 1.0, 0.0, 0.5]}
            for i in range(3)
        ]

    def test_file_backend_returns_stored_vectors(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in self.records()) + "\n")
        provider = FileEmbeddings(path)
        assert provider.dim == 4
        contexts = ContextList(tuple(Context(f"c{i}", f"t{i}") for i in range(3)))
        L = embed_pairs(Query("q", "question?"), contexts, provider)
        assert L.shape == (3, 4)
        assert np.array_equal(L[:, 0], [0.0, 1.0, 2.0])

    def test_missing_pair_named(self):
        provider = FileEmbeddings(self.records())
        with pytest.raises(MissingEmbeddingError, match="c9"):
            provider.embed(Query("q", "question?"), Context("c9", "t"))

    def test_inconsistent_dimension(self):
        records = self.records() + [{"query_id": "q", "context_id": "cX", "vector": [1.0]}]
        with pytest.raises(ValueError, match="inconsistent"):
            FileEmbeddings(records)

    def test_remote_backend(self):
        def handler(request: httpx.Request) -> httpx.Response:
            body = json.loads(request.content)
            text = body["input"][0]
            return httpx.Response(
                200, json={"data": [{"embedding": [float(len(text)), 0.0]}]}
            )

        provider = RemoteEmbeddings(
            "https://emb.test/v1", model="embed-model", dim=2,
            transport=httpx.MockTransport(handler),
        )
        vec = provider.embed(Query("q", "hi"), Context("c", "there"))
        assert vec.shape == (2,)
        assert vec[0] == len("hi\n\nthere")


class TestSelect:
    def make_provider(self, query_id, contexts, vectors):
        records = [
            {"query_id": query_id, "context_id": ctx.id, "vector": list(vec)}
            for ctx, vec in zip(contexts, vectors)
        ]
        return FileEmbeddings(records)

    def test_positive_scores_kept(self):
        rng = np.random.default_rng(4)
        w = random_weights(11, dim=16)
        contexts = ContextList(tuple(Context(f"c{i}", f"t{i}") for i in range(6)))
        provider = self.make_provider("q", contexts, rng.normal(size=(6, 16)))
        query = Query("q", "question?")
        result = csm_select(query, contexts, w, provider)
        m = score_contexts(query, contexts, w, provider)
        expected = tuple(c.id for c, s in zip(contexts, m) if s > 0)
        assert result.kept_ids == expected
        assert result.strategy == "positive-ci"

    def test_all_nonpositive_empty(self):
        w = zeroed_projection_weights()
        tensors = dict(w.tensors)
        tensors["head.b2"] = np.full(1, -5.0, dtype=np.float32)
        wneg = CSMWeights(dim=w.dim, ffn_dim=w.ffn_dim, mlp_hidden=w.mlp_hidden, tensors=tensors)
        contexts = ContextList((Context("a", "x"), Context("b", "y")))
        provider = self.make_provider("q", contexts, np.zeros((2, 16)))
        assert csm_select(Query("q", "?"), contexts, wneg, provider).kept_ids == ()

    def test_selection_membership_permutation_invariant(self):
        rng = np.random.default_rng(8)
        w = random_weights(13, dim=16)
        contexts = tuple(Context(f"c{i}", f"t{i}") for i in range(5))
        vectors = rng.normal(size=(5, 16))
        provider = self.make_provider("q", contexts, vectors)
        query = Query("q", "question?")
        base = csm_select(query, ContextList(contexts), w, provider)
        perm = [3, 1, 4, 0, 2]
        permuted = csm_select(
            query, ContextList(tuple(contexts[i] for i in perm)), w, provider
        )
        assert set(base.kept_ids) == set(permuted.kept_ids)
