"""Single-token MCQA prompting and first-token confidence.

The prompt asks the model for just the option letter. The probability the
model assigns to each label as its first generated token is read from a
backend, and the per-option probabilities are renormalised to sum to one.
The renormalised probability of the chosen label is the confidence score.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx

from ._io import read_jsonl
from .corpus import DEFAULT_TOKENIZER, Tokenizer
from .retrieval import Passage

logger = logging.getLogger(__name__)

EPSILON = 1e-10
DEFAULT_BUDGET = 2048
LABELS = ("A", "B", "C", "D", "E")
INSTRUCTION = "Answer with only the letter of the correct option."


class InferenceError(Exception):
    pass


class UnanswerableError(InferenceError):
    """The question and options alone do not fit the token budget."""


class BackendTransportError(InferenceError):
    pass


class BackendContractError(InferenceError):
    pass


@dataclass(frozen=True)
class MCQuestion:
    qid: str
    stem: str
    options: dict[str, str]
    gold: str | None = None
    category: str | None = None

    def __post_init__(self):
        labels = list(self.options)
        if not 2 <= len(labels) <= len(LABELS):
            raise ValueError(f"{self.qid}: need 2-5 options, got {len(labels)}")
        if labels != list(LABELS[: len(labels)]):
            raise ValueError(f"{self.qid}: option labels must run A.. consecutively, got {labels}")
        if self.gold is not None and self.gold not in self.options:
            raise ValueError(f"{self.qid}: gold label {self.gold!r} is not an option")

    @property
    def labels(self) -> list[str]:
        return list(self.options)


@dataclass(frozen=True)
class Prompt:
    text: str
    included_passages: tuple[Passage, ...]
    token_estimate: int
    budget: int

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RawOptionProbs:
    probs: dict[str, float]
    source: str


@dataclass(frozen=True)
class ConfidenceResult:
    normalized: dict[str, float]
    chosen: str
    confidence: float

    def to_json(self) -> dict:
        return {"normalized": self.normalized, "chosen": self.chosen, "confidence": self.confidence}

    @classmethod
    def from_json(cls, obj: dict) -> "ConfidenceResult":
        return cls({k: float(v) for k, v in obj["normalized"].items()}, obj["chosen"], float(obj["confidence"]))


# -- prompt assembly --------------------------------------------------------


def _question_block(q: MCQuestion) -> str:
    lines = [f"Question: {q.stem}"]
    lines += [f"{label}. {text}" for label, text in q.options.items()]
    lines.append("Answer:")
    return "\n".join(lines)


def _render_default(q: MCQuestion, passages: Sequence[Passage]) -> str:
    parts = [INSTRUCTION]
    if passages:
        ctx = "\n".join(f"[{i}] {p.text}" for i, p in enumerate(passages, 1))
        parts.append(f"Context:\n{ctx}")
    parts.append(_question_block(q))
    return "\n\n".join(parts)


TEMPLATES = {"default": _render_default}


def assemble_prompt(
    q: MCQuestion,
    passages: Sequence[Passage],
    budget: int = DEFAULT_BUDGET,
    template_id: str = "default",
    tokenizer: Tokenizer | None = None,
) -> Prompt:
    """Build the prompt, adding passages best-first while they fit ``budget``.

    A passage that would overflow is skipped; lower-ranked ones are still tried.
    """
    tok = tokenizer or DEFAULT_TOKENIZER
    try:
        render = TEMPLATES[template_id]
    except KeyError:
        raise ValueError(f"unknown template {template_id!r}") from None

    text = render(q, ())
    cost = tok.count(text)
    if cost > budget:
        raise UnanswerableError(f"{q.qid}: question needs {cost} tokens, budget is {budget}")

    ranked = sorted(passages, key=lambda p: (-p.score, p.seed_chunk_id))
    included: list[Passage] = []
    for p in ranked:
        trial = render(q, included + [p])
        trial_cost = tok.count(trial)
        if trial_cost <= budget:
            included.append(p)
            text, cost = trial, trial_cost
    return Prompt(text=text, included_passages=tuple(included), token_estimate=cost, budget=budget)


# -- backends ---------------------------------------------------------------


class Backend(Protocol):
    name: str

    def option_probs(
        self, prompt: Prompt, labels: Sequence[str], qid: str | None = None, config: dict | None = None
    ) -> dict[str, float]: ...


def first_token_probs(
    prompt: Prompt,
    labels: Sequence[str],
    backend: Backend,
    qid: str | None = None,
    config: dict | None = None,
) -> RawOptionProbs:
    """Per-label first-token probabilities, floored at :data:`EPSILON`."""
    reported = backend.option_probs(prompt, labels, qid=qid, config=config)
    probs = {}
    for label in labels:
        p = float(reported.get(label, 0.0))
        if not 0.0 <= p <= 1.0 or math.isnan(p):
            raise BackendContractError(f"{backend.name}: probability for {label!r} out of range: {p}")
        probs[label] = max(p, EPSILON)
    return RawOptionProbs(probs=probs, source=backend.name)


def normalize_confidence(raw: RawOptionProbs) -> ConfidenceResult:
    total = math.fsum(raw.probs.values())
    normalized = {label: p / total for label, p in raw.probs.items()}
    chosen = min(normalized, key=lambda label: (-normalized[label], label))
    return ConfidenceResult(normalized=normalized, chosen=chosen, confidence=normalized[chosen])


def _config_key(config: Mapping | None) -> tuple | None:
    if config is None:
        return None
    return int(config["k"]), int(config["window"]), str(config["provider"])


@dataclass
class ScriptedBackend:
    """Deterministic backend that replays probabilities from a fixture.

    Fixture records (JSONL) are matched in priority order:

    1. ``{"qid", "config": {"k", "window", "provider"}, "probs"}``
    2. ``{"qid", "match": str, "probs"}`` -- first record whose ``match``
       string occurs in the prompt text
    3. ``{"prompt_sha256", "probs"}``
    4. ``{"qid", "probs"}``
    5. ``{"default": true, "probs"}``
    """

    records: list[dict] = field(default_factory=list)
    name: str = "scripted"
    calls: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()
        self._exact: dict[tuple, dict] = {}
        self._match: dict[str, list[tuple[str, dict]]] = {}
        self._digest: dict[str, dict] = {}
        self._qid: dict[str, dict] = {}
        self._default: dict | None = None
        for rec in self.records:
            probs = {k: float(v) for k, v in rec["probs"].items()}
            if rec.get("default"):
                self._default = probs
            elif "prompt_sha256" in rec:
                self._digest[rec["prompt_sha256"]] = probs
            elif rec.get("config") is not None:
                self._exact[(rec["qid"], _config_key(rec["config"]))] = probs
            elif "match" in rec:
                self._match.setdefault(rec["qid"], []).append((rec["match"], probs))
            else:
                self._qid[rec["qid"]] = probs

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(records=[rec for _, rec in read_jsonl(path)])

    def option_probs(self, prompt, labels, qid=None, config=None):
        with self._lock:
            self.calls += 1
        if qid is not None:
            hit = self._exact.get((qid, _config_key(config)))
            if hit is not None:
                return hit
            for needle, probs in self._match.get(qid, ()):
                if needle in prompt.text:
                    return probs
        hit = self._digest.get(prompt.digest)
        if hit is not None:
            return hit
        if qid is not None and qid in self._qid:
            return self._qid[qid]
        if self._default is not None:
            return self._default
        raise BackendContractError(f"scripted backend has no record for qid={qid!r} config={config}")


class HttpBackend:
    """Completion-endpoint client reading first-position top log-probabilities.

    Sends ``{"model", "prompt", "max_tokens": 1, "logprobs": N, "temperature": 0}``
    and reads ``choices[0].logprobs.top_logprobs[0]``. Token variants that
    strip to the same label (``"A"``, ``" A"``) are summed.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str | None = None,
        logprobs: int = 20,
        timeout: float = 60.0,
        retries: int = 2,
        max_in_flight: int = 4,
        client: httpx.Client | None = None,
    ):
        self.url = base_url.rstrip("/") + "/completions"
        self.model = model
        self.name = f"http:{model}"
        self.logprobs = logprobs
        self.retries = retries
        headers = {}
        if api_key_env and os.environ.get(api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[api_key_env]}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def request_body(self, prompt: Prompt) -> dict:
        return {
            "model": self.model,
            "prompt": prompt.text,
            "max_tokens": 1,
            "logprobs": self.logprobs,
            "temperature": 0,
        }

    def _post(self, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(min(2.0**attempt * 0.25, 4.0))
            try:
                with self._slots:
                    resp = self._client.post(self.url, json=body)
            except httpx.HTTPError as exc:
                last = BackendTransportError(f"{self.name}: {exc}")
                continue
            if resp.status_code >= 500:
                last = BackendTransportError(f"{self.name}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendTransportError(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendContractError(f"{self.name}: response is not JSON") from exc
        raise last  # type: ignore[misc]

    def option_probs(self, prompt, labels, qid=None, config=None):
        return parse_top_logprobs(self._post(self.request_body(prompt)), labels)


def parse_top_logprobs(payload: dict, labels: Sequence[str]) -> dict[str, float]:
    """Extract per-label probabilities from a completion response."""
    path = "choices"
    try:
        node = payload["choices"][0]
        path += "[0].logprobs"
        node = node["logprobs"]
        path += ".top_logprobs"
        top = node["top_logprobs"][0]
    except (KeyError, IndexError, TypeError):
        raise BackendContractError(f"response missing field {path!r}") from None
    if not isinstance(top, dict):
        raise BackendContractError("field 'choices[0].logprobs.top_logprobs[0]' is not a map")
    wanted = set(labels)
    probs: dict[str, float] = {}
    for token, logprob in top.items():
        label = token.strip()
        if label in wanted:
            probs[label] = probs.get(label, 0.0) + math.exp(float(logprob))
    return {label: min(p, 1.0) for label, p in probs.items()}


def load_backend(spec: str) -> Backend:
    """Build a backend from ``scripted:<fixture.jsonl>`` or ``http:<json config>``."""
    kind, _, arg = spec.partition(":")
    if kind == "scripted":
        return ScriptedBackend.from_file(arg)
    if kind == "http":
        cfg = json.loads(Path(arg).read_text()) if Path(arg).is_file() else json.loads(arg)
        return HttpBackend(**cfg)
    raise ValueError(f"unknown backend spec {spec!r}")
