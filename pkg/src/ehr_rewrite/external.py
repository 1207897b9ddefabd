"""Optional bridge to an external text generator standing in for the surrogate policy.

Wire contract (JSON over HTTP POST)::

    request:  {"prompt": str, "n": int, "want_logprobs": bool}
    response: {"texts": [str, ...], "logprobs": [float, ...]}   # logprobs optional

The endpoint and bearer token come from configuration or the environment
(``EHR_REWRITE_GENERATOR_URL`` / ``EHR_REWRITE_GENERATOR_TOKEN``).
"""
from __future__ import annotations

import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EndpointUnavailable, MalformedResponse

URL_ENV = "EHR_REWRITE_GENERATOR_URL"
TOKEN_ENV = "EHR_REWRITE_GENERATOR_TOKEN"


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    token: Optional[str] = None
    timeout: float = 30.0

    @classmethod
    def from_env(cls, timeout: float = 30.0) -> "EndpointConfig":
        url = os.environ.get(URL_ENV)
        if not url:
            raise EndpointUnavailable(f"{URL_ENV} is not set")
        return cls(url, os.environ.get(TOKEN_ENV), timeout)


def external_generate(endpoint: EndpointConfig, prompt_text: str, n: int) -> list[tuple[str, Optional[float]]]:
    body = json.dumps({"prompt": prompt_text, "n": n, "want_logprobs": True}).encode()
    headers = {"Content-Type": "application/json"}
    if endpoint.token:
        headers["Authorization"] = f"Bearer {endpoint.token}"
    request = urllib.request.Request(endpoint.url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(request, timeout=endpoint.timeout) as resp:
            raw = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise EndpointUnavailable(f"{endpoint.url}: {exc}") from exc
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedResponse(f"response is not JSON: {exc.msg}") from None
    texts = payload.get("texts") if isinstance(payload, dict) else None
    if not isinstance(texts, list) or len(texts) != n or not all(isinstance(t, str) for t in texts):
        raise MalformedResponse(f"expected {n} texts in the response")
    logprobs = payload.get("logprobs")
    if logprobs is None:
        return [(t, None) for t in texts]
    if not isinstance(logprobs, list) or len(logprobs) != n:
        raise MalformedResponse("logprobs must align with texts")
    try:
        return [(t, None if lp is None else float(lp)) for t, lp in zip(texts, logprobs)]
    except (TypeError, ValueError):
        raise MalformedResponse("logprobs must be numbers") from None


def delta_weights(logprobs: Sequence[Optional[float]]) -> np.ndarray:
    """Ensemble weights: softmax of sequence log-probs, uniform if any is missing."""
    n = len(logprobs)
    if n == 0:
        return np.zeros(0)
    if any(lp is None for lp in logprobs):
        return np.full(n, 1.0 / n)
    a = np.asarray(logprobs, dtype=float)
    e = np.exp(a - a.max())
    return e / e.sum()
