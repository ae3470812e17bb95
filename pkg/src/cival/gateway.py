"""Uniform access to the generator: remote OpenAI-compatible endpoints and
the deterministic simulated backend, with on-disk response caching.

Remote requests are cached under a key derived from (model, template id,
rendered prompt, decoding parameters), so identical calls are byte-identical
replays and cost zero endpoint requests. The simulated backend is a pure
function of (world, query, subset) and needs no cache.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from cival.simworld import SimWorld
from cival.types import ContextList, Query

BACKENDS = ("remote", "simulated")

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class GatewayError(RuntimeError):
    """A generator call failed after exhausting retries."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class CapabilityUnsupportedError(GatewayError):
    """The backend cannot score a forced continuation; callers should fall
    back to metric-based utility."""


def _render_numbered_v1(query: Query, contexts: ContextList) -> str:
    lines = [
        "Answer the question using the numbered context passages."
        " Reply with the answer only.",
        "",
    ]
    for i, ctx in enumerate(contexts, start=1):
        lines.append(f"Context {i}: {ctx.text}")
    if len(contexts):
        lines.append("")
    lines.append(f"Question: {query.text}")
    lines.append("Answer:")
    return "\n".join(lines)


PROMPT_TEMPLATES: dict[str, Callable[[Query, ContextList], str]] = {
    "numbered-v1": _render_numbered_v1,
}


def render_prompt(template_id: str, query: Query, contexts: ContextList) -> str:
    try:
        template = PROMPT_TEMPLATES[template_id]
    except KeyError:
        raise ValueError(f"unknown prompt template: {template_id!r}") from None
    return template(query, contexts)


@dataclass(frozen=True)
class GeneratorConfig:
    """How to reach the generator and how to decode."""

    backend: str = "simulated"
    model: str = "simulated"
    endpoint: str | None = None
    template_id: str = "numbered-v1"
    temperature: float = 0.0
    max_output_tokens: int = 256
    concurrency: int = 4
    cache_dir: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    # simulated forced-answer scoring: log-prob penalty per token for any
    # answer other than the one the backend would emit
    score_penalty_per_token: float = -10.0
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend: {self.backend!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.concurrency < 1:
            raise ValueError("concurrency limit must be >= 1")
        if self.backend == "remote" and not self.endpoint:
            raise ValueError("remote backend requires an endpoint URL")
        if self.template_id not in PROMPT_TEMPLATES:
            raise ValueError(f"unknown prompt template: {self.template_id!r}")


@dataclass(frozen=True)
class GeneratorResponse:
    text: str
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    usage: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.token_logprobs is not None:
            for tok, lp in self.token_logprobs:
                if not math.isfinite(lp) or lp > 0:
                    raise ValueError(f"token log-probability must be finite and <= 0: {tok!r}: {lp}")


class ResponseCache:
    """Content-addressed JSON cache with atomic writes."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def key(payload: Mapping[str, Any]) -> str:
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        path = self._path(key)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            return None  # partial write from a crashed run; treat as a miss

    def put(self, key: str, value: Mapping[str, Any]) -> None:
        path = self._path(key)
        tmp = path.with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
        with self._lock:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(value, fh, sort_keys=True, ensure_ascii=False)
            os.replace(tmp, path)


class Gateway:
    """One configured generator with counters and (for remote) a cache.

    Thread-safe: remote calls are bounded by the configured concurrency and
    counters are lock-protected. A custom httpx transport can be injected
    for testing.
    """

    def __init__(
        self,
        config: GeneratorConfig,
        world: SimWorld | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.world = world
        if config.backend == "simulated" and world is None:
            raise ValueError("simulated backend requires a SimWorld")
        self._cache = ResponseCache(config.cache_dir) if config.cache_dir else None
        self._semaphore = threading.Semaphore(config.concurrency)
        self._counts: Counter[str] = Counter()
        self._count_lock = threading.Lock()
        self._client: httpx.Client | None = None
        self._transport = transport
        self._client_lock = threading.Lock()

    # -- bookkeeping ---------------------------------------------------

    @property
    def is_simulated(self) -> bool:
        return self.config.backend == "simulated"

    @property
    def counts(self) -> dict[str, int]:
        with self._count_lock:
            return dict(self._counts)

    def _bump(self, kind: str) -> None:
        with self._count_lock:
            self._counts[kind] += 1

    def reset_counts(self) -> None:
        with self._count_lock:
            self._counts.clear()

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    # -- public operations ----------------------------------------------

    def generate(self, query: Query, contexts: ContextList) -> GeneratorResponse:
        """The generator's completion for query ⊕ contexts."""
        self._bump("generate")
        if self.is_simulated:
            return self._sim_generate(query, contexts)
        return self._remote_generate(query, contexts)

    def score_answer(self, query: Query, contexts: ContextList, answer: str) -> float:
        """Total log-probability of `answer` as a forced continuation."""
        self._bump("score_answer")
        if self.is_simulated:
            emitted = self.world.answer_for(query.id, [c.id for c in contexts])
            if answer == emitted:
                return 0.0
            n_tokens = max(1, len(answer.split()))
            return self.config.score_penalty_per_token * n_tokens
        return self._remote_score(query, contexts, answer)

    def sim_utility(self, query_id: str, context_ids: Sequence[str]) -> float:
        """Analytic subset utility of the simulated world (brute-force oracle)."""
        if not self.is_simulated:
            raise CapabilityUnsupportedError("exact utility requires the simulated backend")
        self._bump("sim_utility")
        return self.world.exact_utility(query_id, context_ids)

    # -- simulated backend ----------------------------------------------

    def _sim_generate(self, query: Query, contexts: ContextList) -> GeneratorResponse:
        text = self.world.answer_for(query.id, [c.id for c in contexts])
        return GeneratorResponse(
            text=text,
            usage={
                "prompt_tokens": sum(len(c.text.split()) for c in contexts)
                + len(query.text.split()),
                "completion_tokens": len(text.split()),
            },
        )

    # -- remote backend ---------------------------------------------------

    def _http(self) -> httpx.Client:
        with self._client_lock:
            if self._client is None:
                headers = {}
                api_key = os.environ.get(self.config.api_key_env)
                if api_key:
                    headers["Authorization"] = f"Bearer {api_key}"
                self._client = httpx.Client(
                    base_url=self.config.endpoint,
                    headers=headers,
                    timeout=self.config.timeout,
                    transport=self._transport,
                )
            return self._client

    def _post_with_retry(self, path: str, body: Mapping[str, Any]) -> dict[str, Any]:
        delay = 0.5
        last_retry_after: float | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                with self._semaphore:
                    resp = self._http().post(path, json=body)
            except httpx.HTTPError as exc:
                if attempt == self.config.max_retries:
                    raise GatewayError(f"network error calling {path}: {exc}") from exc
                time.sleep(delay)
                delay *= 2
                continue
            if resp.status_code == 200:
                return resp.json()
            if resp.status_code in RETRYABLE_STATUS:
                retry_after = resp.headers.get("Retry-After")
                last_retry_after = float(retry_after) if retry_after else None
                if attempt == self.config.max_retries:
                    break
                time.sleep(last_retry_after if last_retry_after is not None else delay)
                delay *= 2
                continue
            raise GatewayError(f"HTTP {resp.status_code} from {path}: {resp.text[:500]}")
        raise GatewayError(
            f"HTTP retries exhausted for {path}", retry_after=last_retry_after
        )

    def _cache_lookup(self, payload: Mapping[str, Any]) -> tuple[str | None, dict | None]:
        if self._cache is None:
            return None, None
        key = ResponseCache.key(payload)
        return key, self._cache.get(key)

    def _remote_generate(self, query: Query, contexts: ContextList) -> GeneratorResponse:
        prompt = render_prompt(self.config.template_id, query, contexts)
        payload = {
            "kind": "generate",
            "model": self.config.model,
            "template_id": self.config.template_id,
            "prompt": prompt,
            "params": {
                "temperature": self.config.temperature,
                "max_tokens": self.config.max_output_tokens,
            },
        }
        key, cached = self._cache_lookup(payload)
        if cached is None:
            body = {
                "model": self.config.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.config.temperature,
                "max_tokens": self.config.max_output_tokens,
            }
            cached = self._post_with_retry("/chat/completions", body)
            if key is not None:
                self._cache.put(key, cached)
        else:
            self._bump("cache_hit")
        try:
            text = cached["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion response: {exc!r}")
        usage = cached.get("usage") or {}
        return GeneratorResponse(text=text, usage=usage)

    def _remote_score(self, query: Query, contexts: ContextList, answer: str) -> float:
        prompt = render_prompt(self.config.template_id, query, contexts)
        continuation = " " + answer
        payload = {
            "kind": "score",
            "model": self.config.model,
            "template_id": self.config.template_id,
            "prompt": prompt,
            "answer": continuation,
            "params": {"temperature": 0.0},
        }
        key, cached = self._cache_lookup(payload)
        if cached is None:
            body = {
                "model": self.config.model,
                "prompt": prompt + continuation,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
                "temperature": 0.0,
            }
            cached = self._post_with_retry("/completions", body)
            if key is not None:
                self._cache.put(key, cached)
        else:
            self._bump("cache_hit")
        try:
            lp = cached["choices"][0]["logprobs"]
            token_logprobs = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (KeyError, IndexError, TypeError):
            raise CapabilityUnsupportedError(
                "endpoint does not expose forced-continuation log-probabilities;"
                " fall back to metric-based utility"
            )
        cut = len(prompt)
        total = 0.0
        for off, tok_lp in zip(offsets, token_logprobs):
            if off >= cut and tok_lp is not None:
                total += tok_lp
        return total
