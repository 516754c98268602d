"""Chat-completion HTTP client implementing the generation contract."""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable

import httpx

from .base import GENERATIVE_KINDS, GenerationError, GeneratorOutput, PromptContext, extract_expressions
from .templates import messages_for


class TransportError(GenerationError):
    """The endpoint stayed unreachable or kept failing after all attempts."""


class AuthError(GenerationError):
    """Missing key or a 401/403 response; never retried."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.8
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 1.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.attempts < 1:
            raise ValueError("attempts must be at least 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")


_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class LLMGenerator:
    """POSTs rendered prompts to ``{base_url}/chat/completions``.

    ``transport`` and ``sleep`` are injectable so tests can replay recorded
    responses without network access or real delays.
    """

    def __init__(
        self,
        config: EndpointConfig = EndpointConfig(),
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        api_key: str | None = None,
    ):
        self.config = config
        self._api_key = api_key
        self._client = httpx.Client(transport=transport, timeout=config.timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._usage_lock = threading.Lock()
        self.usage = {"prompt_tokens": 0, "completion_tokens": 0, "requests": 0}

    def close(self) -> None:
        self._client.close()

    def get_state(self) -> dict:
        return {"usage": dict(self.usage)}

    def set_state(self, state: dict) -> None:
        self.usage = dict(state.get("usage", self.usage))

    def _key(self) -> str:
        key = self._api_key or os.environ.get(self.config.api_key_env, "")
        if not key:
            raise AuthError(f"no API key: set the {self.config.api_key_env} environment variable")
        return key

    def complete(self, messages: list[dict]) -> tuple[str, dict]:
        """One chat completion with bounded retries; returns (content, usage)."""
        headers = {"Authorization": f"Bearer {self._key()}"}
        body = {"model": self.config.model, "messages": messages, "temperature": self.config.temperature}
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last = ""
        with self._slots:
            for attempt in range(self.config.attempts):
                if attempt:
                    self._sleep(self.config.backoff * 2 ** (attempt - 1))
                try:
                    resp = self._client.post(url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    continue
                if resp.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
                if resp.status_code in _RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    raise GenerationError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    data = resp.json()
                    content = data["choices"][0]["message"]["content"] or ""
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise GenerationError(f"malformed completion response: {exc}") from None
                usage = data.get("usage") or {}
                u = {"prompt_tokens": int(usage.get("prompt_tokens", 0)),
                     "completion_tokens": int(usage.get("completion_tokens", 0))}
                with self._usage_lock:
                    self.usage["prompt_tokens"] += u["prompt_tokens"]
                    self.usage["completion_tokens"] += u["completion_tokens"]
                    self.usage["requests"] += 1
                return content, u
        raise TransportError(f"request failed after {self.config.attempts} attempts ({last})")

    def propose(self, ctx: PromptContext) -> GeneratorOutput:
        content, usage = self.complete(messages_for(ctx))
        kept, dropped = extract_expressions(content, ctx.variable_names, limit=ctx.samples_per_prompt)
        diag = "" if kept else f"no parseable expression ({dropped} dropped)"
        return GeneratorOutput(raw_text=content, extracted=tuple(kept), usage=usage, dropped=dropped,
                               diagnostic=diag)

    def explain(self, ctx: PromptContext) -> str:
        if ctx.kind in GENERATIVE_KINDS:
            raise ValueError(f"{ctx.kind} contexts go through propose()")
        content, _ = self.complete(messages_for(ctx))
        if ctx.kind == "improvement_analysis":
            return _insight_field(content)
        return content.strip()


_JSON_OBJ = re.compile(r"\{.*\}", re.DOTALL)


def _insight_field(text: str) -> str:
    """The "insight" value of the trailing JSON object, else the text without its thinking block."""
    body = re.sub(r"<thinking>.*?</thinking>", "", text, flags=re.DOTALL)
    m = _JSON_OBJ.search(body)
    if m:
        try:
            value = json.loads(m.group(0)).get("insight")
            if isinstance(value, str) and value.strip():
                return value.strip()
        except (ValueError, AttributeError):
            pass
    return body.strip()
