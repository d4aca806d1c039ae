"""Decision providers: heuristic, scripted mock, fatigue-parametric, remote HTTP.

All providers expose ``query(system, user) -> str`` and count their calls in
``.calls`` so per-step query budgets can be audited.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import httpx
import numpy as np

from .errors import DomainError, ProtocolError, TransportError, UsageError


class Provider:
    """Base: counts queries, delegates response text to `_respond`."""

    def __init__(self):
        self.calls = 0

    def query(self, system: str, user: str) -> str:
        self.calls += 1
        return self._respond(system, user)

    def _respond(self, system: str, user: str) -> str:
        raise NotImplementedError


def _prompt_key(user: str) -> int:
    return int.from_bytes(hashlib.sha256(user.encode()).digest()[:8], "big")


class HeuristicProvider(Provider):
    """Answers Yes with fixed probability p, addressed by (prompt, draw index).

    The draw for a prompt's k-th query depends only on (seed, prompt hash, k),
    so interleaving queries for different prompts cannot change any answer.
    """

    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        if not (0.0 <= p <= 1.0):
            raise DomainError("heuristic probability must be in [0, 1]")
        self.p = p
        self.seed = seed
        self._counts: Dict[int, int] = {}

    def _respond(self, system: str, user: str) -> str:
        key = _prompt_key(user)
        k = self._counts.get(key, 0)
        self._counts[key] = k + 1
        gen = np.random.Generator(
            np.random.Philox(key=[self.seed, key], counter=[0, 0, 0, k])
        )
        yes = gen.random() < self.p
        return "Yes. Fixed-rate choice." if yes else "No. Fixed-rate choice."


class MockTableProvider(Provider):
    """Scripted responses from a JSON array of
    ``{"prompt_contains": str, "answers": [str, ...]}`` entries.

    The first entry whose marker substring occurs in the user prompt supplies
    the response; its answers are consumed in order and cycle when exhausted.
    """

    def __init__(self, entries: List[dict]):
        super().__init__()
        self.entries = []
        for i, e in enumerate(entries):
            if "prompt_contains" not in e or "answers" not in e or not e["answers"]:
                raise UsageError(f"mock entry {i} needs prompt_contains and answers")
            self.entries.append((e["prompt_contains"], list(e["answers"])))
        self._cursor = [0] * len(self.entries)

    @classmethod
    def from_file(cls, path: str) -> "MockTableProvider":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise UsageError("mock provider file must hold a JSON array")
        return cls(data)

    def _respond(self, system: str, user: str) -> str:
        for i, (marker, answers) in enumerate(self.entries):
            if marker in user:
                text = answers[self._cursor[i] % len(answers)]
                self._cursor[i] += 1
                return text
        raise UsageError("no mock entry matches the prompt")


class FatigueProvider(Provider):
    """Parametric responder whose isolation rate declines with pandemic age.

    Isolation probability is base_isolate - fatigue_rate * duration_months
    (clamped to [0,1]); work probability is fixed. Answers track the target
    probability deterministically: the k-th answer for a prompt is Yes exactly
    when saying Yes keeps the running Yes-fraction at or below the target.
    """

    def __init__(self, base_isolate: float = 0.8, fatigue_rate: float = 0.05,
                 work_p: float = 0.6):
        super().__init__()
        self.base_isolate = base_isolate
        self.fatigue_rate = fatigue_rate
        self.work_p = work_p
        self._yes: Dict[int, int] = {}
        self._total: Dict[int, int] = {}

    def _target(self, user: str) -> float:
        if "isolate at home" in user:
            months = 0
            marker = " It has been "
            if marker in user:
                tail = user.split(marker, 1)[1]
                months = int(tail.split(" ", 1)[0])
            return float(np.clip(self.base_isolate - self.fatigue_rate * months, 0, 1))
        return self.work_p

    def _respond(self, system: str, user: str) -> str:
        key = _prompt_key(user)
        p = self._target(user)
        yes, total = self._yes.get(key, 0), self._total.get(key, 0)
        answer = (yes + 1) <= p * (total + 1) + 1e-12
        self._yes[key] = yes + int(answer)
        self._total[key] = total + 1
        return "Yes. Proportional responder." if answer else "No. Proportional responder."


class RemoteProvider(Provider):
    """HTTP client for a decision service.

    POSTs ``{"system": ..., "user": ...}`` and expects 200 with
    ``{"text": ...}``. Transport failures and 5xx responses are retried with
    exponential backoff; other non-2xx statuses fail immediately.
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        api_key: Optional[str] = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff_base: float = 0.25,
        client: Optional[httpx.Client] = None,
    ):
        super().__init__()
        self.endpoint = endpoint or os.environ.get("DECISION_ENDPOINT")
        if not self.endpoint:
            raise UsageError("remote provider needs an endpoint"
                             " (arg or DECISION_ENDPOINT)")
        self.api_key = api_key or os.environ.get("DECISION_API_KEY")
        self.timeout = timeout
        self.retries = retries
        self.backoff_base = backoff_base
        self._client = client or httpx.Client(timeout=timeout)

    def _respond(self, system: str, user: str) -> str:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"system": system, "user": user}
        last_exc: Optional[Exception] = None
        last_status: Optional[int] = None
        for attempt in range(self.retries + 1):
            if attempt > 0:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._client.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except httpx.HTTPError as exc:
                last_exc, last_status = exc, None
                continue
            if 200 <= resp.status_code < 300:
                try:
                    return resp.json()["text"]
                except (KeyError, ValueError) as exc:
                    raise ProtocolError(
                        "response body is not JSON with a 'text' field",
                        status=resp.status_code,
                    ) from exc
            if resp.status_code >= 500:
                last_exc, last_status = None, resp.status_code
                continue
            raise ProtocolError(
                f"decision service returned {resp.status_code}",
                status=resp.status_code,
            )
        if last_status is not None:
            raise ProtocolError(
                f"decision service returned {last_status} after"
                f" {self.retries} retries",
                status=last_status,
            )
        raise TransportError(
            f"decision service unreachable after {self.retries} retries: {last_exc}"
        )


def make_provider(spec: str, seed: int = 0, heuristic_p: float = 0.5) -> Provider:
    """Build a provider from a CLI-style spec.

    Specs: heuristic | mock:<path> | remote |
    fatigue[:base_isolate,fatigue_rate,work_p].
    """
    if spec == "heuristic":
        return HeuristicProvider(heuristic_p, seed=seed)
    if spec.startswith("mock:"):
        return MockTableProvider.from_file(spec[len("mock:"):])
    if spec == "remote":
        return RemoteProvider()
    if spec == "fatigue":
        return FatigueProvider()
    if spec.startswith("fatigue:"):
        parts = spec[len("fatigue:"):].split(",")
        if len(parts) != 3:
            raise UsageError(
                "fatigue spec takes base_isolate,fatigue_rate,work_p"
            )
        return FatigueProvider(float(parts[0]), float(parts[1]), float(parts[2]))
    raise UsageError(f"unknown provider spec {spec!r}")
