"""Chat-completion backends with retries and bounded-concurrency dispatch.

Two backends expose one ``complete(request)`` surface: an OpenAI-compatible
HTTP endpoint and the local synthetic simulator. Transient failures (network
errors, 408/429/5xx, malformed payloads) are retried with exponential
backoff; auth and configuration errors abort the run. A draw that exhausts
its retries is reported as a failed outcome, not an exception, so the caller
can record it and keep the per-question denominators honest.

Dispatch preserves attribution and order: results are yielded in ascending
draw-index order no matter which request finishes first, and simulator
randomness is seeded per draw index, so a run's bytes do not depend on the
concurrency schedule.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable, Iterator, Protocol

from .sampling import STRATEGY_TOP_K, STRATEGY_TOP_P, DecodingProfile

if TYPE_CHECKING:
    from .corpus import Question
    from .mutation import PresentedQuestion

log = logging.getLogger(__name__)

API_KEY_ENV = "LEPE_API_KEY"

BACKEND_HTTP = "http"
BACKEND_SIMULATOR = "simulator"


class BackendError(Exception):
    pass


class TransientBackendError(BackendError):
    """Worth retrying: network hiccups, rate limits, 5xx, malformed replies."""


class FatalBackendError(BackendError):
    """Not worth retrying: bad credentials, unknown model, bad request."""


class RetriesExhausted(BackendError):
    def __init__(self, request_id: str, attempts: int, last: Exception):
        super().__init__(f"{request_id}: failed after {attempts} attempts: {last}")
        self.request_id = request_id
        self.attempts = attempts
        self.last = last


@dataclass(frozen=True, slots=True)
class CompletionRequest:
    prompt_text: str
    profile: DecodingProfile
    max_tokens: int
    request_id: str
    # Simulator context; the HTTP backend ignores these.
    question: "Question | None" = None
    variant: "PresentedQuestion | None" = None
    seed: int | None = None


@dataclass(frozen=True, slots=True)
class CompletionResponse:
    text: str
    first_token_probability: float | None
    backend: str
    latency: float


class Backend(Protocol):
    name: str

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


def derive_seed(master_seed: int, index: int, tag: str = "draw") -> int:
    """Stable per-draw seed, independent of scheduling and platform."""
    payload = f"{master_seed}:{tag}:{index}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


class HttpBackend:
    """OpenAI-compatible chat-completions client over plain HTTP."""

    name = BACKEND_HTTP

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        want_logprobs: bool = True,
        session=None,
    ):
        if not base_url:
            raise FatalBackendError("http backend requires a base_url")
        if not model:
            raise FatalBackendError("http backend requires a model name")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.want_logprobs = want_logprobs
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def _payload(self, request: CompletionRequest) -> dict:
        profile = request.profile
        payload: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "max_tokens": request.max_tokens,
            "temperature": profile.temperature,
        }
        if profile.strategy == STRATEGY_TOP_K:
            payload["top_k"] = profile.k_cutoff
        elif profile.strategy == STRATEGY_TOP_P:
            payload["top_p"] = profile.p_cutoff
        if self.want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = 1
        return payload

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.monotonic()
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=self._payload(request),
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"{request.request_id}: {exc}") from exc
        if resp.status_code in (408, 409, 429) or resp.status_code >= 500:
            raise TransientBackendError(
                f"{request.request_id}: HTTP {resp.status_code}"
            )
        if resp.status_code != 200:
            raise FatalBackendError(
                f"{request.request_id}: HTTP {resp.status_code}: {resp.text[:200]}"
            )
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientBackendError(
                f"{request.request_id}: malformed completion payload ({exc})"
            ) from exc
        prob = _first_token_probability(choice)
        return CompletionResponse(
            text=text,
            first_token_probability=prob,
            backend=self.name,
            latency=time.monotonic() - started,
        )


def _first_token_probability(choice: dict) -> float | None:
    """Probability of the first generated token, when the server reports logprobs."""
    try:
        entry = choice["logprobs"]["content"][0]
        logprob = float(entry["logprob"])
    except (KeyError, IndexError, TypeError, ValueError):
        return None
    return min(1.0, math.exp(logprob))


def complete_with_retries(
    backend: Backend,
    request: CompletionRequest,
    attempts: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResponse:
    """Run one completion with exponential backoff over transient failures.

    ``attempts`` bounds the total number of tries. Fatal errors propagate
    immediately; exhausting the budget raises RetriesExhausted.
    """
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    last: Exception | None = None
    for attempt in range(1, attempts + 1):
        try:
            return backend.complete(request)
        except TransientBackendError as exc:
            last = exc
            if attempt < attempts:
                delay = backoff * (2 ** (attempt - 1))
                log.warning(
                    "%s: transient failure (attempt %d/%d), retrying in %.2fs",
                    request.request_id, attempt, attempts, delay,
                )
                if delay > 0:
                    sleep(delay)
    assert last is not None
    raise RetriesExhausted(request.request_id, attempts, last)


@dataclass(frozen=True, slots=True)
class DrawOutcome:
    index: int
    response: CompletionResponse | None  # None when the draw failed
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.response is None


def execute_requests(
    items: Iterable[tuple[int, CompletionRequest]],
    backend: Backend,
    concurrency: int = 4,
    attempts: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> Iterator[DrawOutcome]:
    """Run requests with at most ``concurrency`` in flight, yielding outcomes
    in ascending index order regardless of completion order.

    Submission is chunked so memory stays bounded on large plans. Fatal
    backend errors propagate and abort the whole run.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    from itertools import islice

    chunk_size = max(64, concurrency * 8)

    def one(indexed: tuple[int, CompletionRequest]) -> DrawOutcome:
        index, request = indexed
        try:
            response = complete_with_retries(
                backend, request, attempts=attempts, backoff=backoff, sleep=sleep
            )
            return DrawOutcome(index=index, response=response)
        except RetriesExhausted as exc:
            log.warning("draw %d marked failed: %s", index, exc)
            return DrawOutcome(index=index, response=None, error=str(exc.last))

    it = iter(items)
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        while True:
            chunk = list(islice(it, chunk_size))
            if not chunk:
                break
            outcomes = list(pool.map(one, chunk))
            outcomes.sort(key=lambda o: o.index)
            yield from outcomes


def canonical_json(obj) -> str:
    """Deterministic JSON used for digests and manifests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
