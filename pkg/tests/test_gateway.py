from __future__ import annotations

import json
import threading

import httpx
import pytest

from cival.gateway import (
    CapabilityUnsupportedError,
    Gateway,
    GatewayError,
    GeneratorConfig,
    GeneratorResponse,
    render_prompt,
)
from cival.simworld import SimQuery, SimWorld, make_additive_world
from cival.types import Context, ContextList, Query


def small_world(mode="threshold"):
    queries = {
        "q1": SimQuery("q1", "what is the fact?", ("f1", "f2"), "the truth"),
    }
    tags = {
        "g1": (("f1", 1.0),),
        "g2": (("f2", 1.0),),
        "noise": (("other", 1.0),),
        "poison": (("f1", -0.5),),
        "bigpoison": (("f1", -3.0),),
    }
    return SimWorld(queries=queries, context_tags=tags, mode=mode, seed=0)


def ctx_list(*ids):
    return ContextList(tuple(Context(i, f"text of {i}") for i in ids))


QUERY = Query("q1", "what is the fact?")


class TestSimulatedGenerate:
    def test_covering_support_emits_gold(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        resp = gw.generate(QUERY, ctx_list("g1", "g2"))
        assert resp.text == "the truth"

    def test_empty_contexts_emit_distractor(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        resp = gw.generate(QUERY, ctx_list())
        assert resp.text == gw.world.distractor

    def test_poison_majority_flips_answer(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        assert gw.generate(QUERY, ctx_list("g1", "g2", "poison")).text == "the truth"
        assert gw.generate(QUERY, ctx_list("g1", "g2", "bigpoison")).text == gw.world.distractor

    def test_unknown_query_id(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        with pytest.raises(KeyError, match="unknown query id"):
            gw.generate(Query("nope", "?"), ctx_list("g1"))

    def test_determinism(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        subset = ctx_list("g1", "poison")
        assert gw.generate(QUERY, subset) == gw.generate(QUERY, subset)


class TestSimulatedScoring:
    def test_emitted_answer_scores_zero(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        assert gw.score_answer(QUERY, ctx_list("g1", "g2"), "the truth") == 0.0

    def test_other_answer_pays_per_token_penalty(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        assert gw.score_answer(QUERY, ctx_list("g1", "g2"), "two words") == -20.0
        assert gw.score_answer(QUERY, ctx_list(), "the truth") == -20.0


class TestSimUtility:
    def test_additive_sum_and_empty(self):
        build = make_additive_world(n_samples=1, seed=3, max_contexts=5, nonzero_only=True)
        gw = Gateway(GeneratorConfig(backend="simulated"), world=build.world)
        sample = build.samples[0]
        ids = list(sample.contexts.ids)
        total = gw.sim_utility(sample.query.id, ids)
        assert total == pytest.approx(sum(build.weights[0]))
        assert gw.sim_utility(sample.query.id, []) == 0.0

    def test_additive_consistency_loo(self):
        build = make_additive_world(n_samples=5, seed=9, max_contexts=6)
        gw = Gateway(GeneratorConfig(backend="simulated"), world=build.world)
        for sample, weights in zip(build.samples, build.weights):
            ids = list(sample.contexts.ids)
            full = gw.sim_utility(sample.query.id, ids)
            for i, w in enumerate(weights):
                rest = ids[:i] + ids[i + 1 :]
                assert full - gw.sim_utility(sample.query.id, rest) == w

    def test_threshold_mode_indicator(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        assert gw.sim_utility("q1", ["g1", "g2"]) == 1.0
        assert gw.sim_utility("q1", ["g1"]) == 0.0

    def test_counts(self):
        gw = Gateway(GeneratorConfig(backend="simulated"), world=small_world())
        gw.sim_utility("q1", ["g1"])
        gw.generate(QUERY, ctx_list("g1"))
        assert gw.counts == {"sim_utility": 1, "generate": 1}


class TestConfigValidation:
    def test_bad_backend(self):
        with pytest.raises(ValueError, match="unknown backend"):
            GeneratorConfig(backend="local")

    def test_remote_needs_endpoint(self):
        with pytest.raises(ValueError, match="endpoint"):
            GeneratorConfig(backend="remote")

    def test_negative_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            GeneratorConfig(temperature=-0.1)

    def test_logprob_invariant(self):
        with pytest.raises(ValueError, match="finite and <= 0"):
            GeneratorResponse(text="x", token_logprobs=(("tok", 0.5),))


def test_prompt_template_renders_numbered_contexts():
    prompt = render_prompt("numbered-v1", QUERY, ctx_list("g1", "g2"))
    assert "Context 1: text of g1" in prompt
    assert "Context 2: text of g2" in prompt
    assert prompt.rstrip().endswith("Answer:")
    with pytest.raises(ValueError, match="unknown prompt template"):
        render_prompt("nope", QUERY, ctx_list())


class _ChatServer:
    """Minimal OpenAI-compatible chat endpoint for transport injection."""

    def __init__(self, fail_first: int = 0, status: int = 503):
        self.requests = 0
        self.fail_first = fail_first
        self.status = status

    def handler(self, request: httpx.Request) -> httpx.Response:
        self.requests += 1
        if self.requests <= self.fail_first:
            return httpx.Response(self.status, headers={"Retry-After": "0"})
        body = json.loads(request.content)
        text = f"echo:{body['messages'][0]['content'][-20:]}"
        return httpx.Response(
            200,
            json={
                "choices": [{"message": {"content": text}}],
                "usage": {"prompt_tokens": 5, "completion_tokens": 2},
            },
        )


def remote_config(tmp_path, **kw):
    return GeneratorConfig(
        backend="remote",
        endpoint="https://llm.test/v1",
        model="test-model",
        cache_dir=str(tmp_path / "cache"),
        max_retries=2,
        **kw,
    )


class TestRemote:
    def test_cache_hit_is_byte_identical_and_free(self, tmp_path):
        server = _ChatServer()
        gw = Gateway(
            remote_config(tmp_path), transport=httpx.MockTransport(server.handler)
        )
        subset = ctx_list("g1")
        first = gw.generate(QUERY, subset)
        second = gw.generate(QUERY, subset)
        assert first == second
        assert server.requests == 1
        assert gw.counts.get("cache_hit") == 1

    def test_cache_survives_new_gateway(self, tmp_path):
        server = _ChatServer()
        transport = httpx.MockTransport(server.handler)
        gw1 = Gateway(remote_config(tmp_path), transport=transport)
        resp1 = gw1.generate(QUERY, ctx_list("g1"))
        gw2 = Gateway(remote_config(tmp_path), transport=transport)
        resp2 = gw2.generate(QUERY, ctx_list("g1"))
        assert resp1 == resp2
        assert server.requests == 1

    def test_retry_then_success(self, tmp_path):
        server = _ChatServer(fail_first=2)
        gw = Gateway(remote_config(tmp_path), transport=httpx.MockTransport(server.handler))
        resp = gw.generate(QUERY, ctx_list("g1"))
        assert resp.text.startswith("echo:")
        assert server.requests == 3

    def test_retries_exhausted_surface_retry_after(self, tmp_path):
        server = _ChatServer(fail_first=99, status=429)
        gw = Gateway(remote_config(tmp_path), transport=httpx.MockTransport(server.handler))
        with pytest.raises(GatewayError, match="retries exhausted") as err:
            gw.generate(QUERY, ctx_list("g1"))
        assert err.value.retry_after == 0.0

    def test_hard_http_error_not_retried(self, tmp_path):
        server = _ChatServer(fail_first=99, status=401)
        gw = Gateway(remote_config(tmp_path), transport=httpx.MockTransport(server.handler))
        with pytest.raises(GatewayError, match="HTTP 401"):
            gw.generate(QUERY, ctx_list("g1"))
        assert server.requests == 1

    def test_score_without_logprobs_is_capability_error(self, tmp_path):
        def handler(request: httpx.Request) -> httpx.Response:
            return httpx.Response(200, json={"choices": [{"text": "x"}]})

        gw = Gateway(remote_config(tmp_path), transport=httpx.MockTransport(handler))
        with pytest.raises(CapabilityUnsupportedError, match="metric-based utility"):
            gw.score_answer(QUERY, ctx_list("g1"), "the truth")

    def test_score_sums_continuation_logprobs(self, tmp_path):
        def handler(request: httpx.Request) -> httpx.Response:
            body = json.loads(request.content)
            prompt = body["prompt"]
            # two prompt tokens, two continuation tokens
            cut = len(prompt) - len(" the truth")
            return httpx.Response(
                200,
                json={
                    "choices": [
                        {
                            "logprobs": {
                                "token_logprobs": [None, -0.5, -1.25, -0.25],
                                "text_offset": [0, 5, cut, cut + 4],
                            }
                        }
                    ]
                },
            )

        gw = Gateway(remote_config(tmp_path), transport=httpx.MockTransport(handler))
        total = gw.score_answer(QUERY, ctx_list("g1"), "the truth")
        assert total == pytest.approx(-1.5)

    def test_concurrent_calls_are_safe(self, tmp_path):
        server = _ChatServer()
        gw = Gateway(
            remote_config(tmp_path, concurrency=4),
            transport=httpx.MockTransport(server.handler),
        )
        results = [None] * 8
        subsets = [ctx_list(f"c{i}") for i in range(8)]

        def work(i):
            results[i] = gw.generate(QUERY, subsets[i])

        threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(r is not None for r in results)
        assert gw.counts["generate"] == 8
