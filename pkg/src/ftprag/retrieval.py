"""Question -> ranked context passages.

A retrieved chunk is widened by ``window`` whole source sentences on each
side, then passages that overlap or touch in the same document are merged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .corpus import Corpus
from .embedding import EmbeddingProvider, ProviderId, embed_batch
from .vindex import ScoredHit, VectorIndex


@dataclass(frozen=True)
class RetrievalConfig:
    k: int
    window: int
    provider: ProviderId

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.window < 0:
            raise ValueError("window must be >= 0")

    def key(self) -> tuple[int, int, str]:
        return self.k, self.window, self.provider.name

    def to_json(self) -> dict:
        return {"k": self.k, "window": self.window, "provider": self.provider.name}


@dataclass(frozen=True)
class Passage:
    doc_id: str
    sentence_range: tuple[int, int]
    text: str
    score: float
    seed_chunk_id: int


def retrieve(
    question_text: str,
    cfg: RetrievalConfig,
    index: VectorIndex,
    embedder: EmbeddingProvider,
) -> list[ScoredHit]:
    if index.provider != cfg.provider or embedder.provider_id != cfg.provider:
        raise ValueError(
            f"provider mismatch: config {cfg.provider}, index {index.provider}, "
            f"embedder {embedder.provider_id}"
        )
    query = embed_batch([question_text], embedder)[0]
    return index.search(query, cfg.k)


def expand_window(hit: ScoredHit, window: int, corpus: Corpus) -> Passage:
    if window < 0:
        raise ValueError("window must be >= 0")
    chunk = corpus.chunk(hit.chunk_id)
    doc = corpus.document(chunk.doc_id)
    first = max(0, chunk.sentence_range[0] - window)
    last = min(len(doc.sentences) - 1, chunk.sentence_range[1] + window)
    return Passage(
        doc_id=doc.doc_id,
        sentence_range=(first, last),
        text=doc.span_text(first, last),
        score=hit.score,
        seed_chunk_id=hit.chunk_id,
    )


def _order(p: Passage) -> tuple[float, int]:
    return -p.score, p.seed_chunk_id


def merge_passages(passages: Iterable[Passage], corpus: Corpus) -> list[Passage]:
    """Union overlapping or adjacent sentence ranges per document.

    The merged passage keeps the best member's score and seed chunk.
    """
    by_doc: dict[str, list[Passage]] = {}
    for p in passages:
        by_doc.setdefault(p.doc_id, []).append(p)

    merged: list[Passage] = []
    for doc_id, group in by_doc.items():
        group.sort(key=lambda p: p.sentence_range)
        first, last = group[0].sentence_range
        best = group[0]
        for p in group[1:]:
            lo, hi = p.sentence_range
            if lo <= last + 1:
                last = max(last, hi)
                if _order(p) < _order(best):
                    best = p
                continue
            merged.append(_span_passage(corpus, doc_id, first, last, best))
            first, last, best = lo, hi, p
        merged.append(_span_passage(corpus, doc_id, first, last, best))
    merged.sort(key=_order)
    return merged


def _span_passage(corpus: Corpus, doc_id: str, first: int, last: int, best: Passage) -> Passage:
    return Passage(
        doc_id=doc_id,
        sentence_range=(first, last),
        text=corpus.document(doc_id).span_text(first, last),
        score=best.score,
        seed_chunk_id=best.seed_chunk_id,
    )


def passages_for_hits(hits: Iterable[ScoredHit], window: int, corpus: Corpus) -> list[Passage]:
    return merge_passages((expand_window(h, window, corpus) for h in hits), corpus)
