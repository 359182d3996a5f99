"""Command-line entry point.

Configuration precedence is command-line flag, then the ``--config`` JSON
file, then built-in defaults (64-token chunks, a 2048-token prompt budget,
chunk numbers 5..35 step 5, windows 0 and 1).

Provider specs::

    local                       384-dim hashed bag-of-words, seed from --seed
    local:dim=64,seed=3         explicit dimension / seed
    http:<config.json>          remote embeddings endpoint (HttpEmbedder kwargs)

Backend specs::

    scripted:<fixture.jsonl>
    http:<config.json>          completion endpoint (HttpBackend kwargs)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .corpus import DEFAULT_MAX_CHUNK_TOKENS, Corpus, build_corpus, get_tokenizer, read_documents
from .embedding import EmbeddingProvider, HttpEmbedder, LocalEmbedder, embed_batch
from .evalharness import (
    DEFAULT_BINS,
    build_report,
    confidence_histogram,
    emit_report,
    histogram_records,
    load_dataset,
    parallel_map,
    require_gold,
    run_full_sweeps,
    run_no_context,
    threshold_report_from_sweeps,
    write_sweeps,
)
from .inference import DEFAULT_BUDGET, MCQuestion, load_backend
from .optimizer import (
    DEFAULT_CHUNK_NUMBERS,
    DEFAULT_WINDOW_SIZES,
    SweepDeps,
    SweepGrid,
    SweepMethod,
    run_sweep,
)
from ._io import atomic_write
from .vindex import VectorIndex, build_index

logger = logging.getLogger("ftprag")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    corpus: str | None = None
    index: list[str] = field(default_factory=list)
    providers: list[str] = field(default_factory=lambda: ["local"])
    backend: str | None = None
    chunk_numbers: list[int] = field(default_factory=lambda: list(DEFAULT_CHUNK_NUMBERS))
    window_sizes: list[int] = field(default_factory=lambda: list(DEFAULT_WINDOW_SIZES))
    theta: float = 0.5
    budget: int = DEFAULT_BUDGET
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS
    method: str = "best_probability"
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if self.budget <= self.max_chunk_tokens:
            raise UsageError("budget must exceed max_chunk_tokens")
        if not self.chunk_numbers or not self.window_sizes:
            raise UsageError("grid must be non-empty")

    def sweep_method(self) -> SweepMethod:
        if self.method == "threshold":
            return SweepMethod.threshold(self.theta)
        return SweepMethod(self.method)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        known = {f.name for f in fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            setattr(cfg, key, value)
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    cfg.validate()
    return cfg


def make_provider(spec: str, default_seed: int = 0) -> EmbeddingProvider:
    kind, _, arg = spec.partition(":")
    if kind == "local":
        opts = {"dim": 384, "seed": default_seed}
        for item in filter(None, arg.split(",")):
            key, _, value = item.partition("=")
            if key not in opts:
                raise UsageError(f"unknown local provider option {key!r}")
            opts[key] = int(value)
        return LocalEmbedder(dim=opts["dim"], seed=opts["seed"])
    if kind == "http":
        path = Path(arg)
        kwargs = json.loads(path.read_text()) if path.is_file() else json.loads(arg)
        return HttpEmbedder(**kwargs)
    raise UsageError(f"unknown provider spec {spec!r}")


def load_deps(cfg: RunConfig) -> tuple[SweepDeps, SweepGrid]:
    if not cfg.corpus:
        raise UsageError("--corpus is required")
    if not cfg.backend:
        raise UsageError("--backend is required")
    if len(cfg.index) != len(cfg.providers):
        raise UsageError("give one --index per --provider, in the same order")
    corpus = Corpus.load(cfg.corpus)
    embedders, indexes = {}, {}
    for spec, path in zip(cfg.providers, cfg.index):
        emb = make_provider(spec, cfg.seed)
        idx = VectorIndex.load(path, expected_dim=emb.provider_id.dim)
        if idx.provider != emb.provider_id:
            raise UsageError(f"{path} was built with {idx.provider.name}, not {emb.provider_id.name}")
        embedders[emb.provider_id.name] = emb
        indexes[emb.provider_id.name] = idx
    deps = SweepDeps(
        corpus=corpus,
        indexes=indexes,
        embedders=embedders,
        backend=load_backend(cfg.backend),
        budget=cfg.budget,
        tokenizer=corpus.tokenizer,
    )
    grid = SweepGrid(
        tuple(cfg.chunk_numbers),
        tuple(cfg.window_sizes),
        tuple(e.provider_id for e in embedders.values()),
    )
    return deps, grid


def _meta(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "provider_specs": list(cfg.providers), "budget": cfg.budget}


# -- commands ---------------------------------------------------------------


def cmd_ingest(args) -> int:
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise UsageError(f"{out} already holds a corpus; pass --force to overwrite")
    docs = read_documents(args.input)
    if not docs:
        raise UsageError(f"no documents found in {args.input}")
    max_tokens = args.max_chunk_tokens or DEFAULT_MAX_CHUNK_TOKENS
    corpus = build_corpus(docs, max_tokens, get_tokenizer(args.tokenizer))
    corpus.save(out)
    print(f"ingested {len(corpus.documents)} documents into {len(corpus)} chunks -> {out}")
    return 0


def cmd_build_index(args) -> int:
    corpus = Corpus.load(args.corpus)
    providers = args.providers or ["local"]
    out = Path(args.out)
    if len(providers) > 1:
        out.mkdir(parents=True, exist_ok=True)
    for spec in providers:
        emb = make_provider(spec, args.seed or 0)
        vecs = embed_batch([c.text for c in corpus.chunks], emb)
        index = build_index([c.chunk_id for c in corpus.chunks], vecs, emb.provider_id)
        path = out if len(providers) == 1 else out / f"{emb.provider_id.name}.idx"
        index.save(path)
        print(f"{emb.provider_id.name}: {len(index)} vectors (dim {index.dim}) -> {path}")
    return 0


def _parse_options(items: list[str]) -> dict[str, str]:
    options = {}
    for item in items:
        label, sep, text = item.partition("=")
        if not sep:
            raise UsageError(f"option {item!r} must look like LABEL=text")
        options[label.strip()] = text.strip()
    return options


def cmd_ask(args) -> int:
    cfg = resolve_config(args)
    deps, grid = load_deps(cfg)
    try:
        q = MCQuestion(qid=args.qid, stem=args.question, options=_parse_options(args.options))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = run_sweep(q, grid, cfg.sweep_method(), deps)
    payload = {
        "qid": q.qid,
        "chosen": result.final.chosen,
        "confidence": result.final.confidence,
        "winning_config": result.winning_config.to_json(),
        "visits": len(result.records),
        "exhausted": result.exhausted,
        "method": result.method.to_json(),
    }
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        wc = result.winning_config
        print(f"answer: {payload['chosen']}  confidence: {payload['confidence']:.4f}")
        print(f"config: k={wc.k} window={wc.window} provider={wc.provider.name}")
        print(f"visited {payload['visits']} configurations"
              + ("" if result.exhausted else " (early exit)"))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    deps, grid = load_deps(cfg)
    dataset = load_dataset(args.dataset)
    if args.full:
        sweeps = run_full_sweeps(dataset, grid, deps, cfg.jobs)
    else:
        method = cfg.sweep_method()
        sweeps = parallel_map(lambda q: run_sweep(q, grid, method, deps), dataset, cfg.jobs)
    write_sweeps(sweeps, args.out)
    print(f"wrote {len(sweeps)} sweep results -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    deps, grid = load_deps(cfg)
    dataset = load_dataset(args.dataset)
    require_gold(dataset)
    method = cfg.sweep_method()
    sweeps = run_full_sweeps(dataset, grid, deps, cfg.jobs)
    if args.sweeps_out:
        write_sweeps(sweeps, args.sweeps_out)
    no_rag = run_no_context(dataset, deps, cfg.jobs)
    meta = {"method": method.to_json(), "grid": grid.to_json(), **_meta(cfg)}
    report = build_report(dataset, sweeps, no_rag, grid, method, meta)
    emit_report(report, args.format, args.out)
    print(f"report ({args.format}) -> {args.out}")
    if args.thetas:
        reports = [threshold_report_from_sweeps(dataset, sweeps, t).to_json() for t in args.thetas]
        target = args.threshold_out or str(Path(args.out).with_suffix(".thresholds.json"))
        atomic_write(target, json.dumps(reports, indent=2, sort_keys=True) + "\n")
        for r in reports:
            print(f"theta={r['theta']:.2f}: answered {r['answered_count']}/{r['n_questions']}")
    return 0


def cmd_histogram(args) -> int:
    cfg = resolve_config(args)
    deps, grid = load_deps(cfg)
    dataset = load_dataset(args.dataset)
    sweeps = run_full_sweeps(dataset, grid, deps, cfg.jobs)
    key = None
    if args.at:
        k, w, *prov = args.at.split(",")
        key = (int(k), int(w), prov[0] if prov else grid.providers[0].name)
    hist = confidence_histogram(histogram_records(dataset, sweeps, key), args.bins)
    atomic_write(args.out, hist.to_csv())
    print(f"histogram ({args.bins} bins) -> {args.out}")
    return 0


# -- parser -----------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file describing a RunConfig")
    p.add_argument("--corpus")
    p.add_argument("--index", action="append", help="index file (repeat, one per --provider)")
    p.add_argument("--provider", dest="providers", action="append")
    p.add_argument("--backend", help="scripted:<fixture.jsonl> or http:<config.json>")
    p.add_argument("--chunk-numbers", type=int, nargs="+")
    p.add_argument("--window-sizes", type=int, nargs="+")
    p.add_argument("--method", choices=["threshold", "best_probability"])
    p.add_argument("--theta", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftprag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="chunk a document collection into a sealed corpus")
    p.add_argument("--input", required=True, help="directory of .txt files or a JSONL file")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--max-chunk-tokens", type=int)
    p.add_argument("--tokenizer", help="words-4/3 (default) or hf:<model>")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-index", help="embed chunks and write one index per provider")
    p.add_argument("--corpus", required=True)
    p.add_argument("--provider", dest="providers", action="append")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("ask", help="answer one question")
    _add_run_flags(p)
    p.add_argument("--question", required=True)
    p.add_argument("--options", nargs="+", required=True, metavar="LABEL=TEXT")
    p.add_argument("--qid", default="ask")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("sweep", help="run sweeps over a dataset and write sweep JSONL")
    _add_run_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--full", action="store_true",
                   help="visit every configuration regardless of method")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="accuracy table, combined rows and baseline")
    _add_run_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--sweeps-out")
    p.add_argument("--thetas", type=float, nargs="+", help="also write threshold coverage reports")
    p.add_argument("--threshold-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("histogram", help="correct-vs-wrong confidence histogram CSV")
    _add_run_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--at", help="restrict to one configuration: k,window[,provider]")
    p.set_defaults(func=cmd_histogram)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
