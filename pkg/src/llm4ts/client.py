"""Minimal client for OpenAI-compatible ``/v1/chat/completions`` servers."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import httpx

from .errors import ConfigError, EndpointError, HttpError, MalformedResponse, Timeout

logger = logging.getLogger(__name__)

ENV_OVERRIDES = {
    "LLM4TS_BASE_URL": "base_url",
    "LLM4TS_API_KEY": "api_key",
    "LLM4TS_MODEL": "model",
}
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str = "default"
    api_key: str | None = field(default=None, repr=False)
    temperature: float = 0.2
    timeout: float = 60.0
    transport_retries: int = 2
    max_tokens: int | None = None
    backoff: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self):
        if not self.base_url:
            raise ConfigError("endpoint base_url is empty")
        if not self.timeout > 0:
            raise ConfigError("endpoint timeout must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.transport_retries < 0 or self.max_in_flight < 1:
            raise ConfigError("transport_retries must be >= 0 and max_in_flight >= 1")

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        if base.endswith("/v1"):
            base = base[:-3]
        return base + "/v1/chat/completions"

    def public_dict(self) -> dict[str, Any]:
        """Config snapshot safe for manifests (never includes the key)."""
        d = asdict(self)
        d.pop("api_key")
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None, env: dict[str, str] | None = None) -> "EndpointConfig":
        data = dict(data or {})
        env = os.environ if env is None else env
        for var, key in ENV_OVERRIDES.items():
            if env.get(var):
                data[key] = env[var]
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown endpoint field(s): {sorted(unknown)}")
        if not data.get("base_url"):
            raise ConfigError("no inference endpoint configured (set endpoint.base_url or LLM4TS_BASE_URL)")
        return cls(**data)


@dataclass
class ChatResult:
    text: str | None
    latency: float
    http_status: int
    usage: dict | None = None
    retries: int = 0
    usage_estimated: bool = False

    @property
    def prompt_tokens(self) -> int | None:
        return (self.usage or {}).get("prompt_tokens")

    @property
    def completion_tokens(self) -> int | None:
        return (self.usage or {}).get("completion_tokens")


def estimate_tokens(text: str) -> int:
    return max(1, len(text) // 4) if text else 0


def build_request_body(cfg: EndpointConfig, user: str, system: str | None = None,
                       temperature: float | None = None) -> bytes:
    messages = []
    if system:
        messages.append({"role": "system", "content": system})
    messages.append({"role": "user", "content": user})
    body: dict[str, Any] = {
        "model": cfg.model,
        "messages": messages,
        "temperature": cfg.temperature if temperature is None else temperature,
    }
    if cfg.max_tokens is not None:
        body["max_tokens"] = cfg.max_tokens
    return json.dumps(body, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def _parse_body(resp: httpx.Response) -> tuple[str, dict | None]:
    try:
        payload = resp.json()
        content = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unusable completion payload: {resp.text[:200]!r}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("completion content is not a string")
    usage = payload.get("usage")
    if isinstance(usage, dict):
        usage = {k: usage[k] for k in ("prompt_tokens", "completion_tokens") if k in usage}
    else:
        usage = None
    return content, usage


class ChatClient:
    """Thread-safe synchronous client with transport retries and an in-flight cap."""

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.cfg = cfg
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(cfg.max_in_flight)
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        self._http = httpx.Client(timeout=cfg.timeout, headers=headers, transport=transport)
        self.requests_sent = 0

    @property
    def model(self) -> str:
        return self.cfg.model

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def chat(self, user: str, system: str | None = None, temperature: float | None = None) -> ChatResult:
        body = build_request_body(self.cfg, user, system, temperature)
        last_error: EndpointError | None = None
        start = time.perf_counter()
        for attempt in range(self.cfg.transport_retries + 1):
            if attempt:
                delay = self.cfg.backoff * 2 ** (attempt - 1)
                logger.warning("retrying chat completion (attempt %d) after %s", attempt + 1, last_error)
                if delay > 0:
                    self._sleep(delay)
            try:
                with self._gate:
                    self.requests_sent += 1
                    resp = self._http.post(self.cfg.url, content=body)
            except httpx.TimeoutException as exc:
                last_error = Timeout(f"no response from {self.cfg.url} within {self.cfg.timeout}s")
                last_error.__cause__ = exc
                continue
            except httpx.TransportError as exc:
                last_error = EndpointError(f"transport failure talking to {self.cfg.url}: {exc}")
                last_error.__cause__ = exc
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = HttpError(resp.status_code, resp.text)
                continue
            if resp.status_code >= 400:
                raise HttpError(resp.status_code, resp.text)
            text, usage = _parse_body(resp)
            estimated = usage is None
            if estimated:
                usage = {"prompt_tokens": estimate_tokens((system or "") + user),
                         "completion_tokens": estimate_tokens(text)}
            return ChatResult(text=text, latency=time.perf_counter() - start,
                              http_status=resp.status_code, usage=usage, retries=attempt,
                              usage_estimated=estimated)
        assert last_error is not None
        raise last_error


def chat_complete(cfg: EndpointConfig, user: str, system: str | None = None,
                  transport: httpx.BaseTransport | None = None) -> ChatResult:
    with ChatClient(cfg, transport=transport) as client:
        return client.chat(user, system=system)

