"""Synthetic corpora, questions and backends for end-to-end checks.

``CalibratedOracleBackend`` draws a confidence ``c`` per (question,
configuration) and picks the gold label with probability ``c``, so the
confidence is calibrated by construction.

``make_planted_fixture`` writes a small corpus whose sentences carry
per-question marker tokens, plus a scripted-backend fixture keyed on the
presence of those markers in the prompt.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .inference import LABELS

_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def _seed_from(*parts) -> int:
    h = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class CalibratedOracleBackend:
    name = "calibrated-oracle"

    def __init__(self, gold: dict[str, str], seed: int = 0, floor_margin: float = 0.05):
        self.gold = gold
        self.seed = seed
        self.floor_margin = floor_margin
        self.calls = 0

    def option_probs(self, prompt, labels, qid=None, config=None):
        self.calls += 1
        key = None if config is None else (config["k"], config["window"], config["provider"])
        rng = np.random.default_rng(_seed_from(self.seed, qid, key))
        n = len(labels)
        c = float(rng.uniform(1.0 / n + self.floor_margin, 1.0))
        gold = self.gold[qid]
        if rng.random() < c:
            chosen = gold
        else:
            others = [label for label in labels if label != gold]
            chosen = others[int(rng.integers(len(others)))]
        rest = (1.0 - c) / (n - 1)
        return {label: (c if label == chosen else rest) for label in labels}


def pseudo_words(rng: np.random.Generator, n: int, taken: set[str] | None = None) -> list[str]:
    taken = set() if taken is None else taken
    out = []
    while len(out) < n:
        w = "".join(_SYLLABLES[i] for i in rng.integers(len(_SYLLABLES), size=int(rng.integers(3, 5))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def random_corpus(seed: int, n_docs: int = 4, sentences_per_doc: int = 6, words_per_sentence: int = 8):
    """Documents of pseudo-word sentences, as ``(doc_id, text)`` pairs."""
    rng = np.random.default_rng(seed)
    vocab = pseudo_words(rng, 200)
    docs = []
    for d in range(n_docs):
        sents = [
            " ".join(vocab[i] for i in rng.integers(len(vocab), size=words_per_sentence)).capitalize() + "."
            for _ in range(sentences_per_doc)
        ]
        docs.append((f"doc{d:03d}", " ".join(sents)))
    return docs


def calibrated_dataset(seed: int, n_questions: int, n_options: int = 4) -> list[dict]:
    rng = np.random.default_rng(seed)
    vocab = pseudo_words(rng, 300)
    rows = []
    for i in range(n_questions):
        labels = LABELS[:n_options]
        rows.append({
            "qid": f"c{i:05d}",
            "question": " ".join(vocab[j] for j in rng.integers(len(vocab), size=6)) + "?",
            "options": {label: vocab[int(rng.integers(len(vocab)))] for label in labels},
            "answer": labels[int(rng.integers(n_options))],
        })
    return rows


# -- planted-gold fixture ---------------------------------------------------


@dataclass
class PlantedFixture:
    documents: list[tuple[str, str]]
    questions: list[dict]
    backend_records: list[dict]

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "documents.jsonl", "w", encoding="utf-8") as fh:
            for doc_id, text in self.documents:
                fh.write(json.dumps({"doc_id": doc_id, "text": text}) + "\n")
        with open(out / "questions.jsonl", "w", encoding="utf-8") as fh:
            for q in self.questions:
                fh.write(json.dumps(q) + "\n")
        with open(out / "backend.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.backend_records:
                fh.write(json.dumps(rec) + "\n")


def _sentence(rng: np.random.Generator, filler: list[str], planted: list[str], length: int) -> str:
    words = [filler[i] for i in rng.integers(len(filler), size=length - len(planted))]
    for w in planted:
        words.insert(int(rng.integers(len(words) + 1)), w)
    return " ".join(words).capitalize() + "."


def make_planted_fixture(seed: int = 7, n_questions: int = 24, n_docs: int = 8) -> PlantedFixture:
    """Build a corpus where each question's answer hinges on one marker sentence.

    Question kinds cycle through: marker inside the topical sentence, marker
    in the following sentence (needs a window), topical sentence drowned
    among look-alike decoys (needs a larger k), a trap sentence carrying a
    wrong-answer marker, and no marker at all.
    """
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    filler = pseudo_words(rng, 120, taken)
    doc_sents: list[list[str]] = [
        [_sentence(rng, filler, [], 9) for _ in range(30)] for _ in range(n_docs)
    ]
    kinds = ["inline", "window", "deep", "trap", "none", "inline_trap"]
    questions, records = [], []
    for i in range(n_questions):
        kind = kinds[i % len(kinds)]
        topic = pseudo_words(rng, 3, taken)
        gold_marker, trap_marker = f"kx{i:02d}gold", f"kx{i:02d}trap"
        labels = list(LABELS[:4])
        gold = labels[int(rng.integers(4))]
        wrong = [lab for lab in labels if lab != gold]
        trap_label = wrong[int(rng.integers(3))]
        nocontext_label = labels[int(rng.integers(4))]

        def place(sentence: str) -> None:
            d = int(rng.integers(n_docs))
            pos = int(rng.integers(1, len(doc_sents[d]) - 1))
            doc_sents[d][pos] = sentence

        def place_pair(first: str, second: str) -> None:
            d = int(rng.integers(n_docs))
            pos = int(rng.integers(1, len(doc_sents[d]) - 2))
            doc_sents[d][pos] = first
            doc_sents[d][pos + 1] = second

        if kind in ("inline", "inline_trap"):
            place(_sentence(rng, filler, topic + [gold_marker], 10))
        elif kind == "window":
            place_pair(_sentence(rng, filler, topic, 10), _sentence(rng, filler, [gold_marker], 9))
        elif kind == "deep":
            place(_sentence(rng, filler, topic[:1] + [gold_marker], 10))
            for _ in range(int(rng.integers(6, 14))):
                place(_sentence(rng, filler, topic[:2], 9))
        if kind in ("trap", "inline_trap"):
            place(_sentence(rng, filler, topic + [trap_marker], 10))

        stem = f"Which value is configured for {' '.join(topic)}?"
        options = {lab: " ".join(pseudo_words(rng, 2, taken)) for lab in labels}
        questions.append({"qid": f"q{i:02d}", "question": stem, "options": options, "answer": gold})

        def probs(top: str, conf: float) -> dict[str, float]:
            rest = round((1.0 - conf) / 3, 4)
            return {lab: (conf if lab == top else rest) for lab in labels}

        gold_rec = {"qid": f"q{i:02d}", "match": gold_marker,
                    "probs": probs(gold, round(float(rng.uniform(0.45, 0.95)), 2))}
        trap_rec = {"qid": f"q{i:02d}", "match": trap_marker,
                    "probs": probs(trap_label, round(float(rng.uniform(0.4, 0.9)), 2))}
        first, second = (gold_rec, trap_rec) if rng.random() < 0.5 else (trap_rec, gold_rec)
        records += [first, second]
        records.append({"qid": f"q{i:02d}",
                        "probs": probs(nocontext_label, round(float(rng.uniform(0.3, 0.6)), 2))})

    documents = [(f"spec{d:02d}", " ".join(s)) for d, s in enumerate(doc_sents)]
    return PlantedFixture(documents, questions, records)
