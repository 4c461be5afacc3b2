"""Endpoint descriptors and the HTTP dispatch layer.

Three endpoint roles exist: drafter (generation), verifier (echo scoring of a
prompt's own tokens), and embedder. All speak JSON over HTTP POST:

- generation:  {"prompt", "max_tokens", "temperature", "logprobs"}
               -> {"text", "tokens": [{"text", "logprob", "start", "end"}]}
- echo:        same request plus {"echo": true, "max_tokens": 0}
               -> per-token logprobs for the prompt itself
- embedding:   {"instruction", "inputs": [...]} -> {"embeddings": [[...]]}
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import requests

UNHEALTHY_AFTER_FAILURES = 3
LATENCY_EWMA_ALPHA = 0.3


class EndpointRole(str, Enum):
    DRAFTER = "drafter"
    VERIFIER = "verifier"
    EMBEDDER = "embedder"


class TransportError(Exception):
    """Base for request failures; always carries the endpoint URL."""

    def __init__(self, url: str, message: str):
        super().__init__(f"{message} (endpoint {url})")
        self.url = url


class EndpointTimeout(TransportError):
    pass


class EndpointConnectionError(TransportError):
    pass


class MalformedResponseError(TransportError):
    pass


class EndpointUnavailableError(TransportError):
    """Routing error: the endpoint was already marked unhealthy."""


@dataclass
class EndpointDescriptor:
    """One registered endpoint with health and latency bookkeeping.

    Mutable state is guarded by a lock so concurrent dispatchers can share
    a descriptor safely.
    """

    url: str
    role: EndpointRole
    healthy: bool = True
    latency_ewma_ms: float = 0.0
    consecutive_failures: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_success(self, latency_ms: float) -> None:
        with self._lock:
            self.consecutive_failures = 0
            if self.latency_ewma_ms == 0.0:
                self.latency_ewma_ms = latency_ms
            else:
                self.latency_ewma_ms = (
                    LATENCY_EWMA_ALPHA * latency_ms
                    + (1 - LATENCY_EWMA_ALPHA) * self.latency_ewma_ms
                )

    def record_failure(self) -> None:
        with self._lock:
            self.consecutive_failures += 1
            if self.consecutive_failures >= UNHEALTHY_AFTER_FAILURES:
                self.healthy = False


def dispatch(endpoint: EndpointDescriptor, payload: dict, timeout_ms: int) -> dict:
    """POST a JSON payload to an endpoint and return the decoded response.

    Honors the timeout, tracks latency, and marks the endpoint unhealthy
    after three consecutive failures; an unhealthy endpoint is skipped with
    a routing error rather than contacted.
    """
    if not endpoint.healthy:
        raise EndpointUnavailableError(endpoint.url, "endpoint marked unhealthy")
    started = time.perf_counter()
    try:
        resp = requests.post(endpoint.url, json=payload, timeout=timeout_ms / 1000.0)
    except requests.Timeout:
        endpoint.record_failure()
        raise EndpointTimeout(endpoint.url, f"request timed out after {timeout_ms} ms")
    except requests.ConnectionError as exc:
        endpoint.record_failure()
        raise EndpointConnectionError(endpoint.url, f"connection failed: {exc}")
    latency_ms = (time.perf_counter() - started) * 1000.0

    if resp.status_code != 200:
        endpoint.record_failure()
        raise MalformedResponseError(
            endpoint.url, f"unexpected HTTP status {resp.status_code}"
        )
    try:
        body = resp.json()
    except ValueError:
        endpoint.record_failure()
        raise MalformedResponseError(endpoint.url, "response body is not valid JSON")
    if not isinstance(body, dict):
        endpoint.record_failure()
        raise MalformedResponseError(endpoint.url, "response JSON is not an object")

    endpoint.record_success(latency_ms)
    return body


def round_robin_assign(
    count: int, endpoints: list[EndpointDescriptor]
) -> list[EndpointDescriptor]:
    """Assign request i to healthy endpoint (i mod p); fails if none are healthy."""
    healthy = [e for e in endpoints if e.healthy]
    if not healthy:
        raise EndpointUnavailableError(
            endpoints[0].url if endpoints else "<none>", "no healthy endpoints in pool"
        )
    return [healthy[i % len(healthy)] for i in range(count)]
