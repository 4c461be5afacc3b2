"""Deterministic mock LM server for generation, echo scoring, and embeddings.

Every numeric path in the pipeline is testable against this server without
real model weights. Responses are pure functions of the request content:

- generation is looked up in a scripted table keyed by the sha256 of the
  prompt; unscripted prompts get a documented fallback completion;
- echo scoring returns one logprob per whitespace-delimited token, either
  from a scripted per-prompt table or from the byte-sum rule below;
- embeddings hash (instruction, text) pairs into unit vectors.

Tokenization rule: the prompt's UTF-8 bytes are split at runs of
non-whitespace; each token's span stretches to the start of the next token
(trailing whitespace attaches to the preceding token, leading whitespace to
the first), so tokens tile the text. Offsets are byte offsets.

Echo rule: logprob(token) = -(1 + (sum(token bytes) mod 7)) / 10.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

DEFAULT_EMBED_DIMS = 8
FALLBACK_LOGPROB = -1.0

_NONSPACE = re.compile(rb"\S+")


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def whitespace_token_spans(text: str) -> list[tuple[str, int, int]]:
    """Whitespace tokenization with tiling byte spans, see module docstring."""
    data = text.encode("utf-8")
    runs = [m.span() for m in _NONSPACE.finditer(data)]
    tokens = []
    for i, (run_start, _run_end) in enumerate(runs):
        start = 0 if i == 0 else run_start
        end = runs[i + 1][0] if i + 1 < len(runs) else len(data)
        tokens.append((data[start:end].decode("utf-8"), start, end))
    return tokens


def echo_rule(token_bytes: bytes) -> float:
    """Documented byte-sum rule mapping token bytes to a logprob."""
    return -(1 + (sum(token_bytes) % 7)) / 10


def tokens_from_rule(text: str) -> list[dict]:
    return [
        {
            "text": tok,
            "logprob": echo_rule(tok.encode("utf-8")),
            "start": start,
            "end": end,
        }
        for tok, start, end in whitespace_token_spans(text)
    ]


def uniform_tokens(text: str, logprob: float) -> list[dict]:
    return [
        {"text": tok, "logprob": logprob, "start": start, "end": end}
        for tok, start, end in whitespace_token_spans(text)
    ]


def fallback_completion(prompt: str) -> dict:
    """Unscripted prompts echo their last line, all logprobs -1.0."""
    lines = prompt.rstrip("\n").splitlines()
    last = lines[-1] if lines else ""
    text = f"## Rationale: {last}. ## Response: {last}."
    return {"text": text, "tokens": uniform_tokens(text, FALLBACK_LOGPROB)}


def embed_vector(instruction: str, text: str, dims: int = DEFAULT_EMBED_DIMS) -> list[float]:
    """Hash-to-vector rule: component i comes from sha256(instruction, text, i).

    Each component is uniform in [-1, 1); the vector is L2-normalized.
    """
    raw = []
    for i in range(dims):
        digest = hashlib.sha256(f"{instruction}\x1f{text}\x1f{i}".encode()).digest()
        raw.append(int.from_bytes(digest[:8], "big") / 2**64 * 2 - 1)
    norm = sum(v * v for v in raw) ** 0.5
    if norm == 0.0:
        raw[0] = 1.0
        norm = 1.0
    return [v / norm for v in raw]


@dataclass
class MockScript:
    """Scripted behaviour table for the mock server.

    ``completions`` and ``echoes`` are keyed by the sha256 hex of the exact
    prompt. Completion values are {"text", "tokens"}; echo values are token
    lists for the prompt itself. ``delay_ms`` is applied to every LM/embed
    request to simulate inference latency.
    """

    completions: dict[str, dict] = field(default_factory=dict)
    echoes: dict[str, list[dict]] = field(default_factory=dict)
    delay_ms: int = 0
    embed_dims: int = DEFAULT_EMBED_DIMS

    def script_completion(
        self, prompt: str, text: str, tokens: list[dict] | None = None
    ) -> None:
        if tokens is None:
            tokens = uniform_tokens(text, FALLBACK_LOGPROB)
        self.completions[prompt_sha256(prompt)] = {"text": text, "tokens": tokens}

    def script_echo(self, prompt: str, tokens: list[dict]) -> None:
        self.echoes[prompt_sha256(prompt)] = tokens

    def generate(self, prompt: str) -> dict:
        entry = self.completions.get(prompt_sha256(prompt))
        if entry is None:
            return fallback_completion(prompt)
        return {"text": entry["text"], "tokens": entry["tokens"]}

    def echo(self, prompt: str) -> dict:
        tokens = self.echoes.get(prompt_sha256(prompt))
        if tokens is None:
            tokens = tokens_from_rule(prompt)
        return {"text": prompt, "tokens": tokens}

    def embed(self, instruction: str, inputs: list[str]) -> dict:
        return {
            "embeddings": [
                embed_vector(instruction, text, self.embed_dims) for text in inputs
            ]
        }

    def to_dict(self) -> dict:
        return {
            "delay_ms": self.delay_ms,
            "embed_dims": self.embed_dims,
            "completions": [
                {"prompt_sha256": key, "text": entry["text"], "tokens": entry["tokens"]}
                for key, entry in sorted(self.completions.items())
            ],
            "echoes": [
                {"prompt_sha256": key, "tokens": tokens}
                for key, tokens in sorted(self.echoes.items())
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MockScript":
        script = cls(
            delay_ms=int(raw.get("delay_ms", 0)),
            embed_dims=int(raw.get("embed_dims", DEFAULT_EMBED_DIMS)),
        )
        for entry in raw.get("completions", []):
            key = entry.get("prompt_sha256") or prompt_sha256(entry["prompt"])
            script.completions[key] = {
                "text": entry["text"],
                "tokens": entry["tokens"],
            }
        for entry in raw.get("echoes", []):
            key = entry.get("prompt_sha256") or prompt_sha256(entry["prompt"])
            script.echoes[key] = entry["tokens"]
        return script

    @classmethod
    def from_json_file(cls, path: str | Path) -> "MockScript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class _MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    owner: "MockLMServer"

    def handle_error(self, request, client_address):
        # Clients that hit their timeout close the socket mid-response;
        # that is expected, not a server fault.
        import sys

        exc = sys.exc_info()[1]
        if isinstance(exc, (BrokenPipeError, ConnectionResetError)):
            return
        super().handle_error(request, client_address)


class _Handler(BaseHTTPRequestHandler):
    server: _MockHTTPServer

    def log_message(self, fmt, *args):  # silence per-request stderr noise
        pass

    @property
    def mock(self) -> "MockLMServer":
        return self.server.owner

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        data = self.rfile.read(length) if length else b"{}"
        return json.loads(data.decode("utf-8"))

    def _send_json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/requests":
            self._send_json(200, self.mock.request_log_snapshot())
        else:
            self._send_json(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        try:
            body = self._read_body()
        except (ValueError, UnicodeDecodeError):
            self._send_json(400, {"error": "request body is not valid JSON"})
            return

        if self.path == "/generate":
            prompt = body.get("prompt", "")
            kind = "echo" if body.get("echo") else "generate"
            self.mock.log_request_entry(kind, prompt_sha256(prompt), prompt=prompt)
            self.mock.apply_delay()
            script = self.mock.script
            result = script.echo(prompt) if kind == "echo" else script.generate(prompt)
            self._send_json(200, result)
        elif self.path == "/embed":
            instruction = body.get("instruction", "")
            inputs = body.get("inputs", [])
            digest = hashlib.sha256(
                json.dumps([instruction, inputs]).encode("utf-8")
            ).hexdigest()
            self.mock.log_request_entry(
                "embed", digest, prompt="\x1f".join([instruction, *inputs])
            )
            self.mock.apply_delay()
            self._send_json(200, self.mock.script.embed(instruction, inputs))
        elif self.path == "/script":
            self.mock.load_script(MockScript.from_dict(body))
            self.mock.log_request_entry("script", None)
            self._send_json(200, {"ok": True})
        else:
            self._send_json(404, {"error": f"unknown path {self.path}"})


class MockLMServer:
    """Threaded HTTP server exposing the mock LM on an ephemeral port.

    Routes: POST /generate (generation, or echo scoring when the body sets
    "echo"), POST /embed, GET /requests (the append-only request log), and
    POST /script (replace the active script). Handles concurrent requests;
    responses depend only on request content.
    """

    def __init__(self, script: MockScript | None = None, port: int = 0):
        self.script = script or MockScript()
        self._log: list[dict] = []
        self._lock = threading.Lock()
        self._httpd = _MockHTTPServer(("127.0.0.1", port), _Handler)
        self._httpd.owner = self
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    @property
    def generate_url(self) -> str:
        return f"{self.url}/generate"

    @property
    def embed_url(self) -> str:
        return f"{self.url}/embed"

    def start(self) -> "MockLMServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockLMServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def load_script(self, script: MockScript) -> None:
        self.script = script

    def apply_delay(self) -> None:
        if self.script.delay_ms > 0:
            time.sleep(self.script.delay_ms / 1000.0)

    def log_request_entry(
        self, kind: str, digest: str | None, prompt: str | None = None
    ) -> None:
        with self._lock:
            self._log.append(
                {
                    "index": len(self._log),
                    "kind": kind,
                    "sha256": digest,
                    "prompt": prompt,
                }
            )

    def request_log_snapshot(self) -> list[dict]:
        with self._lock:
            return list(self._log)

    def reset_log(self) -> None:
        with self._lock:
            self._log.clear()

    def request_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for entry in self.request_log_snapshot():
            counts[entry["kind"]] = counts.get(entry["kind"], 0) + 1
        return counts
