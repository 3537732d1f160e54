"""Agent and embedding backends.

The mock backend is fully deterministic and offline; the whole acceptance
suite runs against it. The HTTP backends speak the OpenAI-compatible chat
and embeddings protocols with retry, timeout, and usage-fallback handling.
"""

from __future__ import annotations

import fnmatch
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import requests

from .executor import AgentProfile, count_tokens
from .features import EMBED_DIM


class BackendError(RuntimeError):
    """Backend failure after exhausting retries."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class ProtocolError(RuntimeError):
    """Malformed response body from a chat/embeddings endpoint."""


# ---------------------------------------------------------------------------
# Deterministic mock backend
# ---------------------------------------------------------------------------

@dataclass
class MockScript:
    """Response table keyed by (role pattern, prompt pattern), fnmatch style.

    Agents listed in ``adversarial`` return ``failure_text`` regardless of
    pattern (the failure-injection fixture). ``latency_ms`` is recorded but
    never slept on during tests.
    """

    patterns: list[tuple[str, str, str]] = field(default_factory=list)
    default_response: str = "no answer"
    adversarial: set[int] = field(default_factory=set)
    failure_text: str = "[adversarial] this output is deliberately wrong"
    latency_ms: float = 0.0


def mock_respond(script: MockScript, role: str, prompt: str) -> str:
    """First matching pattern's response; the default always matches."""
    for role_pat, prompt_pat, response in script.patterns:
        if fnmatch.fnmatch(role, role_pat) and fnmatch.fnmatch(prompt, prompt_pat):
            return response
    return script.default_response


class MockBackend:
    """Scripted agent backend with an exact call counter.

    ``responder`` overrides the pattern table when set (used by tests that
    need prompt-dependent behavior, e.g. a majority-echo decision maker).
    Token usage is left to the executor's tokenizer rule.
    """

    def __init__(
        self,
        script: MockScript | None = None,
        responder: Callable[[AgentProfile, str], str] | None = None,
    ):
        self.script = script or MockScript()
        self.responder = responder
        self.call_count = 0

    def respond(self, agent: AgentProfile, prompt: str) -> tuple[str, None]:
        self.call_count += 1
        if agent.id in self.script.adversarial:
            return self.script.failure_text, None
        if self.responder is not None:
            return self.responder(agent, prompt), None
        return mock_respond(self.script, agent.role, prompt), None


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backends
# ---------------------------------------------------------------------------

@dataclass
class ChatEndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    retries: int = 2
    temperature: float = 0.2
    requests_per_second: float = 0.0  # 0 disables throttling

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


class _Throttle:
    def __init__(self, requests_per_second: float):
        self.min_interval = 1.0 / requests_per_second if requests_per_second > 0 else 0.0
        self._last = 0.0

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        now = time.monotonic()
        delta = self.min_interval - (now - self._last)
        if delta > 0:
            time.sleep(delta)
        self._last = time.monotonic()


def _post_with_retries(cfg: ChatEndpointConfig, url: str, body: dict, throttle: _Throttle) -> dict:
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(cfg.api_key_env)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    last_error: Exception | None = None
    for attempt in range(cfg.retries + 1):
        throttle.wait()
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=cfg.timeout)
            if resp.status_code >= 500:
                raise BackendError(f"HTTP {resp.status_code} from {url}")
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code} from {url}: {resp.text[:500]}")
            return resp.json()
        except (requests.RequestException, BackendError, ValueError) as exc:
            last_error = exc
            if attempt < cfg.retries:
                time.sleep(min(2.0**attempt * 0.1, 2.0))
    raise BackendError(f"request to {url} failed after {cfg.retries + 1} attempts: {last_error}", cfg.retries)


class ChatBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(self, cfg: ChatEndpointConfig):
        self.cfg = cfg
        self._throttle = _Throttle(cfg.requests_per_second)

    def chat(self, messages: list[dict]) -> tuple[str, tuple[int, int] | None]:
        body = {"model": self.cfg.model, "messages": messages, "temperature": self.cfg.temperature}
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        payload = _post_with_retries(self.cfg, url, body, self._throttle)
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat response: {payload!r}") from exc
        usage = payload.get("usage")
        if isinstance(usage, dict) and "prompt_tokens" in usage and "completion_tokens" in usage:
            return content, (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return content, None

    def respond(self, agent: AgentProfile, prompt: str) -> tuple[str, tuple[int, int] | None]:
        messages = []
        if agent.system_prompt:
            messages.append({"role": "system", "content": agent.system_prompt})
        messages.append({"role": "user", "content": prompt})
        content, usage = self.chat(messages)
        if usage is None:
            # Server omitted usage: fall back to the deterministic rule.
            usage = (count_tokens(prompt), count_tokens(content))
        return content, usage


@dataclass
class EmbeddingEndpointConfig:
    base_url: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 30.0
    retries: int = 2
    model: str | None = None


class HttpEmbedder:
    """Embedding service client accepting ``{"embedding": [...]}`` or the
    OpenAI ``{"data": [{"embedding": [...]}]}`` shape."""

    dimension = EMBED_DIM

    def __init__(self, cfg: EmbeddingEndpointConfig):
        self.cfg = cfg
        self._throttle = _Throttle(0.0)

    def embed(self, text: str) -> np.ndarray:
        body: dict = {"input": text}
        if self.cfg.model:
            body["model"] = self.cfg.model
        chat_cfg = ChatEndpointConfig(
            base_url=self.cfg.base_url,
            model=self.cfg.model or "",
            api_key_env=self.cfg.api_key_env,
            timeout=self.cfg.timeout,
            retries=self.cfg.retries,
        )
        payload = _post_with_retries(chat_cfg, self.cfg.base_url.rstrip("/") + "/embeddings", body, self._throttle)
        if "embedding" in payload:
            vec = payload["embedding"]
        else:
            try:
                vec = payload["data"][0]["embedding"]
            except (KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"malformed embedding response: {payload!r}") from exc
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (self.dimension,):
            raise ProtocolError(f"embedding has shape {arr.shape}, expected ({self.dimension},)")
        return arr
