"""Document ingestion, sentence splitting and token-bounded chunking.

Chunks keep their provenance (document id plus sentence range, and a
character sub-span for hard-split sentences) so retrieval can go back to
the source text and widen the context around a hit.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Protocol

from ._io import atomic_write as _atomic_write
from ._io import read_jsonl

logger = logging.getLogger(__name__)

DEFAULT_MAX_CHUNK_TOKENS = 64

# terminator run followed by whitespace, or a blank-line paragraph break
_BOUNDARY = re.compile(r"[.?!;]+(?=\s)|\n[^\S\n]*\n")
_WORD = re.compile(r"\S+")


class CorpusError(Exception):
    """Base class for corpus construction and persistence errors."""


class DuplicateDocumentError(CorpusError):
    pass


class SealedCorpusError(CorpusError):
    pass


class ChunkingError(CorpusError):
    pass


@dataclass(frozen=True)
class SentenceSpan:
    start: int
    end: int
    index: int


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    sentences: tuple[SentenceSpan, ...] = ()

    def span_text(self, first: int, last: int) -> str:
        """Source text covering sentences ``first..last`` inclusive."""
        return self.text[self.sentences[first].start : self.sentences[last].end].strip()


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    doc_id: str
    sentence_range: tuple[int, int]
    text: str
    token_count: int
    sub_span: tuple[int, int] | None = None

    def to_json(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "sentence_range": list(self.sentence_range),
            "sub_span": list(self.sub_span) if self.sub_span is not None else None,
            "text": self.text,
            "token_count": self.token_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Chunk":
        sub = obj.get("sub_span")
        return cls(
            chunk_id=int(obj["chunk_id"]),
            doc_id=obj["doc_id"],
            sentence_range=(int(obj["sentence_range"][0]), int(obj["sentence_range"][1])),
            text=obj["text"],
            token_count=int(obj["token_count"]),
            sub_span=(int(sub[0]), int(sub[1])) if sub is not None else None,
        )


class Tokenizer(Protocol):
    name: str

    def count(self, text: str) -> int: ...


class WordHeuristicTokenizer:
    """Approximates model tokens as ``ceil(words * 4 / 3)``."""

    name = "words-4/3"

    def count(self, text: str) -> int:
        words = len(text.split())
        return (4 * words + 2) // 3


class HFTokenizer:
    """Exact token counts from a Hugging Face tokenizer (loaded lazily)."""

    def __init__(self, model_name: str):
        self.name = f"hf:{model_name}"
        self._model_name = model_name
        self._tok = None

    def count(self, text: str) -> int:
        if self._tok is None:
            from transformers import AutoTokenizer

            self._tok = AutoTokenizer.from_pretrained(self._model_name)
        return len(self._tok.encode(text, add_special_tokens=False))


DEFAULT_TOKENIZER = WordHeuristicTokenizer()


def get_tokenizer(name: str | None) -> Tokenizer:
    if name in (None, "", DEFAULT_TOKENIZER.name):
        return DEFAULT_TOKENIZER
    if name.startswith("hf:"):
        return HFTokenizer(name[3:])
    raise ValueError(f"unknown tokenizer {name!r}")


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    return (tokenizer or DEFAULT_TOKENIZER).count(text)


def split_sentences(text: str) -> list[SentenceSpan]:
    """Split ``text`` into trimmed, ordered sentence spans.

    A boundary follows a run of ``. ? ! ;`` when the next character is
    whitespace, and every blank line is a paragraph break. Periods inside
    tokens such as ``38.331`` or ``v5.1`` are therefore never boundaries.
    """
    cuts = [0]
    for m in _BOUNDARY.finditer(text):
        cuts.append(m.end())
    cuts.append(len(text))

    spans: list[SentenceSpan] = []
    for lo, hi in zip(cuts, cuts[1:]):
        seg = text[lo:hi]
        stripped = seg.strip()
        if not stripped:
            continue
        start = lo + (len(seg) - len(seg.lstrip()))
        spans.append(SentenceSpan(start, start + len(stripped), len(spans)))
    return spans


def ingest_document(doc_id: str, text: str) -> Document:
    if not doc_id:
        raise CorpusError("doc_id must be non-empty")
    return Document(doc_id=doc_id, text=text, sentences=tuple(split_sentences(text)))


def _hard_split(
    doc: Document, sentence: SentenceSpan, max_tokens: int, tokenizer: Tokenizer
) -> Iterator[tuple[int, int]]:
    words = [(m.start(), m.end()) for m in _WORD.finditer(doc.text, sentence.start, sentence.end)]
    i = 0
    while i < len(words):
        start = words[i][0]
        if tokenizer.count(doc.text[start : words[i][1]]) > max_tokens:
            raise ChunkingError(
                f"{doc.doc_id}: word at offset {start} alone exceeds {max_tokens} tokens"
            )
        j = i
        while j + 1 < len(words) and tokenizer.count(doc.text[start : words[j + 1][1]]) <= max_tokens:
            j += 1
        yield start, words[j][1]
        i = j + 1


def build_chunks(
    doc: Document,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    tokenizer: Tokenizer | None = None,
    first_id: int = 0,
) -> list[Chunk]:
    """Greedily pack consecutive sentences into chunks of at most ``max_chunk_tokens``.

    A sentence that does not fit on its own is hard-split at word
    boundaries; the resulting chunks record the character ``sub_span``.
    """
    if max_chunk_tokens < 1:
        raise ValueError("max_chunk_tokens must be >= 1")
    tok = tokenizer or DEFAULT_TOKENIZER
    chunks: list[Chunk] = []

    def emit(first: int, last: int, sub: tuple[int, int] | None = None) -> None:
        text = doc.text[sub[0] : sub[1]] if sub else doc.span_text(first, last)
        chunks.append(
            Chunk(
                chunk_id=first_id + len(chunks),
                doc_id=doc.doc_id,
                sentence_range=(first, last),
                text=text,
                token_count=tok.count(text),
                sub_span=sub,
            )
        )

    open_first: int | None = None
    sents = doc.sentences
    for s in sents:
        if open_first is not None:
            if tok.count(doc.span_text(open_first, s.index)) <= max_chunk_tokens:
                continue
            emit(open_first, s.index - 1)
            open_first = None
        if tok.count(doc.span_text(s.index, s.index)) <= max_chunk_tokens:
            open_first = s.index
            continue
        for lo, hi in _hard_split(doc, s, max_chunk_tokens, tok):
            emit(s.index, s.index, (lo, hi))
    if open_first is not None:
        emit(open_first, sents[-1].index)
    return chunks


@dataclass
class Corpus:
    """Documents plus their chunks. Single writer until :meth:`seal`."""

    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS
    tokenizer: Tokenizer = field(default=DEFAULT_TOKENIZER)
    documents: dict[str, Document] = field(default_factory=dict)
    chunks: list[Chunk] = field(default_factory=list)
    sealed: bool = False

    def add_document(self, doc_id: str, text: str) -> Document:
        if self.sealed:
            raise SealedCorpusError("corpus is sealed")
        if doc_id in self.documents:
            raise DuplicateDocumentError(f"duplicate doc_id {doc_id!r}")
        doc = ingest_document(doc_id, text)
        self.documents[doc_id] = doc
        self.chunks.extend(build_chunks(doc, self.max_chunk_tokens, self.tokenizer, len(self.chunks)))
        return doc

    def seal(self) -> "Corpus":
        self.sealed = True
        return self

    def chunk(self, chunk_id: int) -> Chunk:
        if not 0 <= chunk_id < len(self.chunks):
            raise KeyError(f"unknown chunk_id {chunk_id}")
        return self.chunks[chunk_id]

    def document(self, doc_id: str) -> Document:
        return self.documents[doc_id]

    def __len__(self) -> int:
        return len(self.chunks)

    # -- persistence -------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "max_chunk_tokens": self.max_chunk_tokens,
            "tokenizer": self.tokenizer.name,
            "document_count": len(self.documents),
            "chunk_count": len(self.chunks),
        }

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(
            out / "documents.jsonl",
            "".join(json.dumps({"doc_id": d.doc_id, "text": d.text}, ensure_ascii=False) + "\n"
                    for d in self.documents.values()),
        )
        _atomic_write(
            out / "chunks.jsonl",
            "".join(json.dumps(c.to_json(), ensure_ascii=False) + "\n" for c in self.chunks),
        )
        _atomic_write(out / "manifest.json", json.dumps(self.manifest(), indent=2) + "\n")

    @classmethod
    def load(cls, in_dir: str | Path) -> "Corpus":
        src = Path(in_dir)
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
        corpus = cls(
            max_chunk_tokens=int(manifest["max_chunk_tokens"]),
            tokenizer=get_tokenizer(manifest.get("tokenizer")),
        )
        for _, obj in read_jsonl(src / "documents.jsonl"):
            doc = ingest_document(obj["doc_id"], obj["text"])
            corpus.documents[doc.doc_id] = doc
        corpus.chunks = [Chunk.from_json(o) for _, o in read_jsonl(src / "chunks.jsonl")]
        if len(corpus.documents) != manifest["document_count"]:
            raise CorpusError("document count disagrees with manifest")
        if any(c.chunk_id != i for i, c in enumerate(corpus.chunks)):
            raise CorpusError("chunk ids are not dense 0..N-1")
        return corpus.seal()


def build_corpus(
    docs: Iterable[tuple[str, str]],
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    tokenizer: Tokenizer | None = None,
) -> Corpus:
    corpus = Corpus(max_chunk_tokens=max_chunk_tokens, tokenizer=tokenizer or DEFAULT_TOKENIZER)
    for doc_id, text in docs:
        corpus.add_document(doc_id, text)
    return corpus.seal()


def read_documents(path: str | Path) -> list[tuple[str, str]]:
    """Read ``(doc_id, text)`` pairs from a directory of .txt files or a JSONL file."""
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.is_file() and f.suffix == ".txt")
        return [(f.stem, f.read_text(encoding="utf-8")) for f in files]
    docs = []
    for lineno, obj in read_jsonl(p):
        if "doc_id" not in obj or "text" not in obj:
            raise CorpusError(f"{p}:{lineno}: expected fields doc_id and text")
        docs.append((str(obj["doc_id"]), obj["text"]))
    return docs
