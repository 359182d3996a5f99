"""Confidence-guided search over (chunk number, window size) per question.

Two policies share one visiting order (provider, then chunk number, then
window size):

* threshold -- stop at the first configuration whose confidence is at
  least ``theta``; if none qualifies, fall back to the best one seen.
* best probability -- visit everything and keep the most confident answer.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .corpus import Corpus, Tokenizer
from .embedding import EmbeddingProvider, ProviderId
from .inference import (
    DEFAULT_BUDGET,
    Backend,
    ConfidenceResult,
    MCQuestion,
    Prompt,
    assemble_prompt,
    first_token_probs,
    normalize_confidence,
)
from .retrieval import RetrievalConfig, passages_for_hits, retrieve
from .vindex import ScoredHit, VectorIndex

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_NUMBERS = (5, 10, 15, 20, 25, 30, 35)
DEFAULT_WINDOW_SIZES = (0, 1)


class SweepError(Exception):
    def __init__(self, qid: str, config: RetrievalConfig | None, cause: Exception):
        self.qid = qid
        self.config = config
        where = f"config {config.key()}" if config is not None else "no-context prompt"
        super().__init__(f"question {qid!r} failed at {where}: {cause}")


@dataclass(frozen=True)
class SweepGrid:
    chunk_numbers: tuple[int, ...] = DEFAULT_CHUNK_NUMBERS
    window_sizes: tuple[int, ...] = DEFAULT_WINDOW_SIZES
    providers: tuple[ProviderId, ...] = ()

    def __post_init__(self):
        for name in ("chunk_numbers", "window_sizes", "providers"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        for name in ("chunk_numbers", "window_sizes"):
            vals = list(getattr(self, name))
            if vals != sorted(set(vals)):
                raise ValueError(f"{name} must be strictly ascending")
        if self.chunk_numbers[0] < 1 or self.window_sizes[0] < 0:
            raise ValueError("chunk numbers must be >= 1 and window sizes >= 0")

    def __len__(self) -> int:
        return len(self.providers) * len(self.chunk_numbers) * len(self.window_sizes)

    def to_json(self) -> dict:
        return {
            "chunk_numbers": list(self.chunk_numbers),
            "window_sizes": list(self.window_sizes),
            "providers": [p.name for p in self.providers],
        }


def iterate_grid(grid: SweepGrid) -> list[RetrievalConfig]:
    return [
        RetrievalConfig(k=k, window=w, provider=p)
        for p in grid.providers
        for k in grid.chunk_numbers
        for w in grid.window_sizes
    ]


@dataclass(frozen=True)
class SweepMethod:
    name: str
    theta: float | None = None

    def __post_init__(self):
        if self.name == "threshold":
            if self.theta is None or not 0.0 < self.theta <= 1.0:
                raise ValueError("threshold method needs 0 < theta <= 1")
        elif self.name == "best_probability":
            if self.theta is not None:
                raise ValueError("best_probability takes no theta")
        else:
            raise ValueError(f"unknown sweep method {self.name!r}")

    @classmethod
    def threshold(cls, theta: float) -> "SweepMethod":
        return cls("threshold", float(theta))

    @classmethod
    def best_probability(cls) -> "SweepMethod":
        return cls("best_probability")

    def to_json(self) -> dict:
        return {"name": self.name, "theta": self.theta}


@dataclass(frozen=True)
class SweepRecord:
    config: RetrievalConfig
    result: ConfidenceResult
    passages_digest: str

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "result": self.result.to_json(),
            "passages_digest": self.passages_digest,
        }


@dataclass(frozen=True)
class SweepResult:
    qid: str
    method: SweepMethod
    records: tuple[SweepRecord, ...]
    final: ConfidenceResult
    winning_config: RetrievalConfig
    exhausted: bool

    def to_json(self) -> dict:
        return {
            "qid": self.qid,
            "method": self.method.to_json(),
            "records": [r.to_json() for r in self.records],
            "final": self.final.to_json(),
            "winning_config": self.winning_config.to_json(),
            "exhausted": self.exhausted,
        }

    @classmethod
    def from_json(cls, obj: dict, providers: dict[str, ProviderId]) -> "SweepResult":
        def cfg(c: dict) -> RetrievalConfig:
            return RetrievalConfig(int(c["k"]), int(c["window"]), providers[c["provider"]])

        m = obj["method"]
        return cls(
            qid=obj["qid"],
            method=SweepMethod(m["name"], m.get("theta")),
            records=tuple(
                SweepRecord(cfg(r["config"]), ConfidenceResult.from_json(r["result"]), r["passages_digest"])
                for r in obj["records"]
            ),
            final=ConfidenceResult.from_json(obj["final"]),
            winning_config=cfg(obj["winning_config"]),
            exhausted=bool(obj["exhausted"]),
        )

    def restrict(self, keep) -> "SweepResult":
        """Best-probability view over the records satisfying ``keep(config)``."""
        recs = tuple(r for r in self.records if keep(r.config))
        if not recs:
            raise ValueError(f"{self.qid}: no records left after restriction")
        best = best_record(recs)
        return SweepResult(self.qid, SweepMethod.best_probability(), recs, best.result, best.config, True)


def passages_digest(prompt: Prompt) -> str:
    h = hashlib.sha256()
    for p in prompt.included_passages:
        h.update(json.dumps([p.doc_id, list(p.sentence_range), p.text], ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class SweepDeps:
    """Read-only resources shared by every sweep."""

    corpus: Corpus
    indexes: dict[str, VectorIndex]
    embedders: dict[str, EmbeddingProvider]
    backend: Backend
    budget: int = DEFAULT_BUDGET
    template_id: str = "default"
    tokenizer: Tokenizer | None = None

    def __post_init__(self):
        missing = set(self.indexes) ^ set(self.embedders)
        if missing:
            raise ValueError(f"indexes and embedders disagree on providers: {sorted(missing)}")

    def answer(self, q: MCQuestion, prompt: Prompt, config: RetrievalConfig | None) -> ConfidenceResult:
        raw = first_token_probs(
            prompt, q.labels, self.backend, qid=q.qid, config=config.to_json() if config else None
        )
        return normalize_confidence(raw)

    def no_context(self, q: MCQuestion) -> ConfidenceResult:
        """Answer with an empty-context prompt (the no-retrieval baseline)."""
        prompt = assemble_prompt(q, (), self.budget, self.template_id, self.tokenizer)
        try:
            return self.answer(q, prompt, None)
        except Exception as exc:
            raise SweepError(q.qid, None, exc) from exc


class QuestionSession:
    """Evaluates configurations for one question, reusing one search per provider.

    Top-k lists are prefixes of a single top-(max k) search, so each
    provider's index is queried once at the largest chunk number of the grid.
    """

    def __init__(self, q: MCQuestion, deps: SweepDeps, max_k: int):
        self.q = q
        self.deps = deps
        self.max_k = max_k
        self._hits: dict[str, list[ScoredHit]] = {}

    def hits(self, cfg: RetrievalConfig) -> list[ScoredHit]:
        name = cfg.provider.name
        if name not in self._hits:
            probe = RetrievalConfig(max(self.max_k, cfg.k), 0, cfg.provider)
            self._hits[name] = retrieve(
                self.q.stem, probe, self.deps.indexes[name], self.deps.embedders[name]
            )
        return self._hits[name][: cfg.k]

    def evaluate(self, cfg: RetrievalConfig) -> SweepRecord:
        d = self.deps
        try:
            passages = passages_for_hits(self.hits(cfg), cfg.window, d.corpus)
            prompt = assemble_prompt(self.q, passages, d.budget, d.template_id, d.tokenizer)
            result = d.answer(self.q, prompt, cfg)
        except Exception as exc:
            raise SweepError(self.q.qid, cfg, exc) from exc
        return SweepRecord(cfg, result, passages_digest(prompt))


def best_record(records: Iterable[SweepRecord]) -> SweepRecord:
    """Highest confidence; the earliest record wins ties."""
    best: SweepRecord | None = None
    for rec in records:
        if best is None or rec.result.confidence > best.result.confidence:
            best = rec
    if best is None:
        raise ValueError("no records")
    return best


def _visit(q: MCQuestion, grid: SweepGrid, deps: SweepDeps) -> Iterator[SweepRecord]:
    session = QuestionSession(q, deps, max(grid.chunk_numbers))
    for cfg in iterate_grid(grid):
        yield session.evaluate(cfg)


def threshold_sweep(q: MCQuestion, grid: SweepGrid, theta: float, deps: SweepDeps) -> SweepResult:
    method = SweepMethod.threshold(theta)
    records: list[SweepRecord] = []
    for rec in _visit(q, grid, deps):
        records.append(rec)
        if rec.result.confidence >= theta:
            return SweepResult(q.qid, method, tuple(records), rec.result, rec.config, False)
    best = best_record(records)
    return SweepResult(q.qid, method, tuple(records), best.result, best.config, True)


def best_probability_sweep(q: MCQuestion, grid: SweepGrid, deps: SweepDeps) -> SweepResult:
    records = tuple(_visit(q, grid, deps))
    best = best_record(records)
    return SweepResult(q.qid, SweepMethod.best_probability(), records, best.result, best.config, True)


def run_sweep(q: MCQuestion, grid: SweepGrid, method: SweepMethod, deps: SweepDeps) -> SweepResult:
    if method.name == "threshold":
        return threshold_sweep(q, grid, method.theta, deps)
    return best_probability_sweep(q, grid, deps)


def replay_method(records: Sequence[SweepRecord], method: SweepMethod) -> SweepRecord:
    """Apply a policy post hoc to a full, iteration-ordered record list."""
    if method.name == "threshold":
        for rec in records:
            if rec.result.confidence >= method.theta:
                return rec
    return best_record(records)


def combine_records(results: Sequence[SweepResult]) -> SweepRecord:
    if not results:
        raise ValueError("combine needs at least one sweep result")
    qids = {r.qid for r in results}
    if len(qids) != 1:
        raise ValueError(f"cannot combine results for different questions: {sorted(qids)}")
    return best_record(rec for res in results for rec in res.records)


def combine(results: Sequence[SweepResult]) -> ConfidenceResult:
    """Most confident answer across every record of every input sweep."""
    return combine_records(results).result
