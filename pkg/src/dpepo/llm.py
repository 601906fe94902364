"""External LLM policy over an OpenAI-style chat-completion endpoint."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import requests

from .errors import ConfigError, ProtocolError, TransportError
from .policy import Proposal
from .protocol import build_prompt_context, parse_agent_output, render_intermediate_prompt, render_system_prompt

log = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "qwen2.5-7b-instruct"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    retries: int = 3
    temperature: float = 0.4
    max_tokens: int = 2048
    backoff_base: float = 0.5
    backoff_cap: float = 8.0

    def validate(self) -> "EndpointConfig":
        if not self.base_url.startswith(("http://", "https://")):
            raise ConfigError("endpoint.base_url", f"must be an http(s) URL, got {self.base_url!r}")
        if self.retries < 0:
            raise ConfigError("endpoint.retries", "must be >= 0")
        if not self.timeout > 0:
            raise ConfigError("endpoint.timeout", "must be > 0")
        return self


def llm_decide(endpoint: EndpointConfig, messages: list[dict], session: requests.Session | None = None) -> str:
    """POST ``messages`` and return the assistant text.

    Connection failures, timeouts and retryable HTTP statuses are retried with
    capped exponential backoff; anything else fails immediately.
    """
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(endpoint.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    payload = {
        "model": endpoint.model,
        "messages": messages,
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_tokens,
    }
    http = session or requests
    last: str = ""
    for attempt in range(endpoint.retries + 1):
        if attempt:
            delay = min(endpoint.backoff_cap, endpoint.backoff_base * 2 ** (attempt - 1))
            log.warning("retry %d/%d after %s (sleeping %.2fs)", attempt, endpoint.retries, last, delay)
            time.sleep(delay)
        try:
            resp = http.post(url, json=payload, headers=headers, timeout=endpoint.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last = f"{type(exc).__name__}: {exc}"
            continue
        if resp.status_code in RETRYABLE_STATUS:
            last = f"HTTP {resp.status_code}"
            continue
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        if attempt:
            log.info("request succeeded after %d retries", attempt)
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"non-conforming chat-completion body: {resp.text[:200]!r}") from exc
        if not isinstance(content, str):
            raise ProtocolError("assistant content is not a string")
        return content
    raise TransportError(f"{url} unreachable after {endpoint.retries} retries: {last}")


class LLMPolicy:
    """Renders the parallel-agent prompts and parses the reply into a turn."""

    def __init__(self, endpoint: EndpointConfig, env_name: str = "KeyDoorWorld", complete=llm_decide):
        self.endpoint = endpoint
        self.env_name = env_name
        self.complete = complete

    def messages(self, env_set, steps, env_limit: int | None) -> list[dict]:
        ctx = build_prompt_context(env_set.task_description, env_set.initial_observation, steps, env_limit)
        return [
            {"role": "system", "content": render_system_prompt(self.env_name, env_limit)},
            {"role": "user", "content": render_intermediate_prompt(ctx, self.env_name)},
        ]

    def propose(self, env_set, steps, t, env_limit, rng) -> Proposal:
        messages = self.messages(env_set, steps, env_limit)
        raw = self.complete(self.endpoint, messages)
        try:
            turn = parse_agent_output(raw)
        except ProtocolError as exc:
            return Proposal(None, raw_output=raw, parse_error=str(exc), messages=messages)
        return Proposal(turn, raw_output=raw, messages=messages)
