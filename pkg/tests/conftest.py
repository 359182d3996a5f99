import math

import numpy as np
import pytest

from ftprag.embedding import ProviderId


def naive_topk(ids, vectors, query, k):
    """Double-loop inner products, correctly rounded, ranked by (-score, id)."""
    q = [float(x) for x in np.asarray(query, dtype=np.float32)]
    scored = []
    for cid, row in zip(ids, vectors):
        s = math.fsum(float(a) * b for a, b in zip(row, q))
        scored.append((-s, int(cid)))
    scored.sort()
    return [(cid, -neg) for neg, cid in scored[:k]]


def random_unit(rng, n, dim):
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v.astype(np.float32)


@pytest.fixture
def provider64():
    return ProviderId("test-d64", 64)


FIVE = {label: f"option {label.lower()}" for label in "ABCDE"}


def conf_probs(c, labels="ABCDE", top="A"):
    """Raw probabilities whose normalized maximum is ``c`` at ``top``."""
    rest = (1.0 - c) / (len(labels) - 1)
    return {label: (c if label == top else rest) for label in labels}


def tiny_deps(backend, providers=(("local", 32, 0),), budget=2048):
    from ftprag.corpus import build_corpus
    from ftprag.embedding import LocalEmbedder, embed_batch
    from ftprag.optimizer import SweepDeps
    from ftprag.synthetic import random_corpus
    from ftprag.vindex import build_index

    corpus = build_corpus(random_corpus(3, n_docs=3, sentences_per_doc=8), 16)
    indexes, embedders = {}, {}
    for name, dim, seed in providers:
        emb = LocalEmbedder(dim, seed, name=name)
        vecs = embed_batch([c.text for c in corpus.chunks], emb)
        indexes[name] = build_index([c.chunk_id for c in corpus.chunks], vecs, emb.provider_id)
        embedders[name] = emb
    return SweepDeps(corpus, indexes, embedders, backend, budget)


ROOT = __import__("pathlib").Path(__file__).resolve().parent
PLANTED = ROOT / "fixtures" / "planted"
GOLDEN = ROOT / "golden"
PLANTED_SPECS = ["local:dim=32,seed=1", "local:dim=32,seed=2"]


def planted_setup():
    """Library-level equivalent of the golden CLI run over the planted fixture."""
    from ftprag.cli import make_provider
    from ftprag.corpus import build_corpus, read_documents
    from ftprag.embedding import embed_batch
    from ftprag.evalharness import load_dataset
    from ftprag.inference import ScriptedBackend
    from ftprag.optimizer import SweepDeps, SweepGrid
    from ftprag.vindex import build_index

    corpus = build_corpus(read_documents(PLANTED / "documents.jsonl"), 16)
    embedders = [make_provider(s) for s in PLANTED_SPECS]
    indexes = {}
    for emb in embedders:
        vecs = embed_batch([c.text for c in corpus.chunks], emb)
        indexes[emb.provider_id.name] = build_index([c.chunk_id for c in corpus.chunks], vecs, emb.provider_id)
    backend = ScriptedBackend.from_file(PLANTED / "backend.jsonl")
    deps = SweepDeps(corpus, indexes, {e.provider_id.name: e for e in embedders}, backend)
    grid = SweepGrid(providers=tuple(e.provider_id for e in embedders))
    meta = {"seed": 0, "provider_specs": PLANTED_SPECS, "budget": 2048}
    return load_dataset(PLANTED / "questions.jsonl"), deps, grid, meta


def calibrated_setup(n_questions, seed=0, chunk_numbers=(5, 10, 15, 20, 25, 30, 35)):
    from ftprag.evalharness import _parse_question
    from ftprag.optimizer import SweepGrid
    from ftprag.synthetic import CalibratedOracleBackend, calibrated_dataset

    rows = calibrated_dataset(seed, n_questions)
    dataset = [_parse_question(r, r["qid"]) for r in rows]
    backend = CalibratedOracleBackend({q.qid: q.gold for q in dataset}, seed=seed)
    deps = tiny_deps(backend)
    grid = SweepGrid(tuple(chunk_numbers), (0, 1), (deps.embedders["local"].provider_id,))
    return dataset, deps, grid


_ACCEPTANCE: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py::" not in report.nodeid:
        return
    from test_acceptance import CRITERIA

    name = report.nodeid.split("::")[-1]
    if name in CRITERIA:
        _ACCEPTANCE.append((CRITERIA[name], "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict}  {label}")
