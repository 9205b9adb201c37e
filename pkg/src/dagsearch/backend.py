"""LLM completion backends: production HTTP chat plus deterministic doubles.

The scripted and replay backends make every end-to-end test reproducible
bit-for-bit; the HTTP backend speaks the OpenAI-compatible chat wire format
with retries and backoff.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import requests

from .register import Tokenizer, token_length

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "DAGSEARCH_LLM_ENDPOINT"
MODEL_ENV = "DAGSEARCH_LLM_MODEL"
API_KEY_ENV = "DAGSEARCH_LLM_API_KEY"


class BackendError(Exception):
    pass


class TransportError(BackendError):
    pass


class BackendExhausted(BackendError):
    pass


class OverBudget(BackendError):
    pass


class ReplayDivergence(BackendError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    """One completion call: the full context plus decoding parameters.

    ``system`` optionally names a prefix of ``context`` (the stage prompt) so
    chat backends can send a proper system/user message pair.
    """

    context: str
    system: str | None = None
    max_output_tokens: int = 1024
    temperature: float = 0.0
    stop: tuple[str, ...] = ()


class Backend:
    """Completion interface; per-run calls are sequential."""

    def complete(self, request: CompletionRequest) -> str:
        raise NotImplementedError


@dataclass
class ScriptedBackend(Backend):
    """Returns canned responses in order and fails loudly when exhausted."""

    responses: Sequence[str]
    served: int = 0

    def complete(self, request: CompletionRequest) -> str:
        if self.served >= len(self.responses):
            raise BackendExhausted(
                f"scripted backend exhausted after {self.served} responses"
            )
        response = self.responses[self.served]
        self.served += 1
        return response


@dataclass
class ReplayBackend(Backend):
    """Re-serves recorded model outputs for the replay harness.

    In strict mode the re-rendered context at each step must equal the
    recorded one; any drift raises ReplayDivergence instead of continuing.
    """

    steps: Sequence[tuple[str, str]]  # (recorded context, recorded model output)
    strict: bool = False
    served: int = 0

    def complete(self, request: CompletionRequest) -> str:
        if self.served >= len(self.steps):
            raise BackendExhausted(f"replay exhausted after {self.served} recorded steps")
        recorded_context, recorded_output = self.steps[self.served]
        if self.strict and request.context != recorded_context:
            diff_at = next(
                (
                    i
                    for i, (a, b) in enumerate(zip(recorded_context, request.context))
                    if a != b
                ),
                min(len(recorded_context), len(request.context)),
            )
            raise ReplayDivergence(
                f"context diverges from the recording at step {self.served + 1}, "
                f"character {diff_at}"
            )
        self.served += 1
        return recorded_output


@dataclass
class HttpChatBackend(Backend):
    """OpenAI-compatible chat-completions client.

    Endpoint, model, and key default to the DAGSEARCH_LLM_* environment
    variables (OPENAI_API_KEY is honored as a key fallback). Transient
    transport failures are retried with exponential backoff.
    """

    endpoint: str = ""
    model: str = ""
    api_key: str | None = None
    timeout: float = 120.0
    max_retries: int = 3
    backoff: float = 0.5
    max_context_tokens: int | None = None
    tokenizer: Tokenizer | None = None
    extra_headers: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.endpoint = self.endpoint or os.environ.get(ENDPOINT_ENV, "")
        self.model = self.model or os.environ.get(MODEL_ENV, "")
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY")
        if not self.endpoint:
            raise ValueError(f"no chat endpoint configured (set {ENDPOINT_ENV})")

    def _messages(self, request: CompletionRequest) -> list[dict]:
        if request.system and request.context.startswith(request.system):
            user = request.context[len(request.system):].lstrip("\n")
            return [
                {"role": "system", "content": request.system},
                {"role": "user", "content": user},
            ]
        return [{"role": "user", "content": request.context}]

    def complete(self, request: CompletionRequest) -> str:
        if self.max_context_tokens is not None:
            count = token_length(request.context, self.tokenizer)
            if count > self.max_context_tokens:
                raise OverBudget(
                    f"context is {count} tokens, over the {self.max_context_tokens}-token cap"
                )
        payload = {
            "model": self.model,
            "messages": self._messages(request),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.stop:
            payload["stop"] = list(request.stop)
        headers = {"Content-Type": "application/json", **self.extra_headers}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                if response.status_code == 429 or response.status_code >= 500:
                    raise TransportError(f"chat endpoint answered HTTP {response.status_code}")
                response.raise_for_status()
                body = response.json()
                return body["choices"][0]["message"]["content"]
            except (requests.RequestException, TransportError, KeyError, json.JSONDecodeError) as exc:
                last_error = exc
                logger.warning(
                    "completion attempt %d/%d failed: %s",
                    attempt + 1,
                    self.max_retries + 1,
                    exc,
                )
                if attempt < self.max_retries:
                    time.sleep(self.backoff * (2**attempt))
        raise TransportError(
            f"chat completion failed after {self.max_retries + 1} attempts: {last_error}"
        )
