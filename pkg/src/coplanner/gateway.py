"""Text-generation/embedding gateway: prompt templates, answer extraction, and
an HTTP client for OpenAI-compatible endpoints."""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
import requests

HINT_TEMPLATE = (
    "Problem: {query}\n"
    "Thoughts: {thoughts}\n"
    "Refer to the given meta-strategy: {strategy}\n"
    "\n"
    "Prepare one potential succeeding hint for the input based on the above strategy. "
    "The hint should be brief and begin with 'Hint: '. "
    "Do not include the thought process or the result within the hint. "
    "For example, the hint for Enumeration can be \"Hint: enumerate the options to find "
    "the correct answer. Let's start with Option (A)\"."
)

REASONING_TEMPLATE = (
    "Problem: {query}\n"
    "Thoughts: {thoughts}\n"
    "Hint: {suggestion}\n"
    "\n"
    "Let's follow a systematic approach by considering the hint. "
    "The previous thoughts are outlined above for reference."
)

ASPECT_PROMPTS: dict[str, str] = {
    "rationality": (
        "Evaluate whether the current hint is a reasonable instruction to solve the problem. "
        "1 is unreasonable, 3 is reasonable, and 2 is unsure. "
        'Return "The score is x", where x is an integer from 1 to 3.'
    ),
    "relevancy": (
        "Evaluate whether the current hint is relevant to the input problem. "
        "1 is irrelevant, 3 is relevant, and 2 is unsure. "
        'Return "The score is x", where x is an integer from 1 to 3.'
    ),
    "clarity": (
        "Evaluate whether the current hint is easy to understand and follow. "
        "1 is difficult to understand and follow, 3 is easy to understand and follow, and 2 is unsure. "
        'Return "The score is x", where x is an integer from 1 to 3.'
    ),
    "correctness": (
        "Evaluate whether the answer of the current reasoning hint is correct. "
        "1 is incorrect, 3 is correct, and 2 is unsure. "
        'Return "The score is x", where x is an integer from 1 to 3.'
    ),
    "consistency": (
        "Evaluate whether the current response is consistent with the input query and the given instruction hint. "
        "1 is inconsistent, 3 is consistent, and 2 is unsure. "
        'Return "The score is x", where x is an integer from 1 to 3.'
    ),
}

HINT_ASPECTS = ("rationality", "relevancy", "clarity")
REASONING_ASPECTS = ("correctness", "consistency")

_SCORE_RE = re.compile(r"The score is ([123])")


class GatewayError(Exception):
    """Base class for backend failures."""


class TransportError(GatewayError):
    """Network-level failure after exhausting retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class BackendError(GatewayError):
    """Non-2xx HTTP response from the backend."""

    def __init__(self, status: int, body: str):
        super().__init__(f"backend returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 512
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


class Backend(Protocol):
    def generate(self, req: GenerationRequest) -> str: ...

    def embed(self, text: str) -> np.ndarray: ...

    @property
    def embedding_dim(self) -> int: ...


def render_hint_prompt(query: str, thoughts: str, strategy_instruction: str) -> str:
    return HINT_TEMPLATE.format(
        query=query, thoughts=thoughts, strategy=strategy_instruction
    )


def render_reasoning_prompt(query: str, thoughts: str, hint: str) -> str:
    return REASONING_TEMPLATE.format(query=query, thoughts=thoughts, suggestion=hint)


def render_aspect_prompt(aspect: str, query: str, hint: str, thought: str = "") -> str:
    """Self-evaluation prompt for one scoring aspect (hint search baseline)."""
    context = f"Problem: {query}\nHint: {hint}\n"
    if thought:
        context += f"Response: {thought}\n"
    return context + "\n" + ASPECT_PROMPTS[aspect]


def parse_score(completion: str) -> Optional[int]:
    """Parse 'The score is x' with x in {1,2,3}; None when absent."""
    m = _SCORE_RE.search(completion)
    return int(m.group(1)) if m else None


def _normalize_label(value: str) -> str:
    return value.strip().strip("()[]{}.,:;'\"` ").upper()


def extract_answer(completion: str, valid_labels: set[str]) -> Optional[str]:
    """Pull the answer letter from the last well-formed JSON object in the text.

    The object must contain a string field named "answer" (case-insensitive).
    The value is trimmed, upcased, and stripped of surrounding punctuation; it is
    returned only if it is one of the valid labels.
    """
    decoder = json.JSONDecoder()
    found: Optional[str] = None
    idx = 0
    while True:
        start = completion.find("{", idx)
        if start < 0:
            break
        try:
            obj, end = decoder.raw_decode(completion, start)
        except json.JSONDecodeError:
            idx = start + 1
            continue
        if isinstance(obj, dict):
            for key, val in obj.items():
                if isinstance(key, str) and key.lower() == "answer" and isinstance(val, str):
                    found = val
        idx = start + 1  # keep scanning inside, so nested objects count too
    if found is None:
        return None
    label = _normalize_label(found)
    valid = {l.upper() for l in valid_labels}
    return label if label in valid else None


class HttpBackend:
    """Client for an OpenAI-compatible chat-completions + embeddings server.

    Transport errors are retried up to 3 times with exponential backoff;
    non-2xx responses raise immediately (never retried, to keep generation
    accounting deterministic).
    """

    RETRIES = 3

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: str = "default",
        embedding_model: str = "default",
        embedding_dim: Optional[int] = None,
        timeout: float = 120.0,
        backoff: float = 1.0,
    ):
        self.base_url = (base_url or os.environ.get("COPLANNER_BASE_URL", "")).rstrip("/")
        if not self.base_url:
            raise ValueError("base URL required (COPLANNER_BASE_URL or config)")
        self.api_key = api_key or os.environ.get("COPLANNER_API_KEY", "")
        self.model = model
        self.embedding_model = embedding_model
        self._dim = embedding_dim
        self.timeout = timeout
        self.backoff = backoff
        self._session = requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, route: str, payload: dict) -> dict:
        url = f"{self.base_url}{route}"
        last_exc: Optional[Exception] = None
        for attempt in range(1, self.RETRIES + 1):
            try:
                resp = self._session.post(
                    url, json=payload, headers=self._headers(), timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < self.RETRIES:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
                continue
            if not 200 <= resp.status_code < 300:
                raise BackendError(resp.status_code, resp.text)
            return resp.json()
        raise TransportError(str(last_exc), attempts=self.RETRIES)

    def generate(self, req: GenerationRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        data = self._post("/v1/chat/completions", payload)
        return data["choices"][0]["message"]["content"]

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be nonempty")
        data = self._post(
            "/v1/embeddings", {"model": self.embedding_model, "input": text}
        )
        vec = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        if self._dim is None:
            self._dim = vec.shape[0]
        elif vec.shape[0] != self._dim:
            raise BackendError(200, f"embedding dim changed: {vec.shape[0]} != {self._dim}")
        return vec

    @property
    def embedding_dim(self) -> int:
        if self._dim is None:
            self._dim = self.embed("dimension probe").shape[0]
        return self._dim
