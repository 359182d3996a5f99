"""Dataset loading, sweeps over a dataset, and the evaluation reports.

Reports mirror the usual presentation of this kind of experiment:

* a chunk-number x window accuracy table, per embedding provider,
* "combined" rows that pick, per question, the most confident answer
  over a set of configurations (per window, across windows, across providers),
* a no-retrieval baseline,
* threshold coverage (how many questions clear a confidence bar, and how
  accurate those answers are),
* correct-vs-wrong confidence histograms.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from ._io import JsonlError, atomic_write, read_jsonl
from .embedding import ProviderId
from .inference import ConfidenceResult, MCQuestion
from .optimizer import (
    SweepDeps,
    SweepGrid,
    SweepMethod,
    SweepResult,
    best_probability_sweep,
    combine,
    iterate_grid,
    replay_method,
)

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20

T = TypeVar("T")
R = TypeVar("R")


class DatasetError(Exception):
    pass


def _parse_question(obj: dict, where: str) -> MCQuestion:
    for key in ("qid", "question", "options"):
        if key not in obj:
            raise DatasetError(f"{where}: missing required field {key!r}")
    options = obj["options"]
    if not isinstance(options, dict):
        raise DatasetError(f"{where}: 'options' must be an object of label -> text")
    answer = obj.get("answer")
    if answer is not None and answer not in options:
        raise DatasetError(f"{where}: answer {answer!r} is not one of {sorted(options)}")
    try:
        return MCQuestion(
            qid=str(obj["qid"]),
            stem=obj["question"],
            options={str(k): str(v) for k, v in options.items()},
            gold=answer,
            category=obj.get("category"),
        )
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def load_dataset(path: str | Path) -> list[MCQuestion]:
    """Read a JSONL dataset; every malformed line is reported with its number."""
    questions: list[MCQuestion] = []
    problems: list[str] = []
    seen: set[str] = set()
    try:
        for lineno, obj in read_jsonl(path):
            where = f"{path}:{lineno}"
            try:
                q = _parse_question(obj, where)
            except DatasetError as exc:
                problems.append(str(exc))
                continue
            if q.qid in seen:
                problems.append(f"{where}: duplicate qid {q.qid!r}")
                continue
            seen.add(q.qid)
            questions.append(q)
    except JsonlError as exc:
        raise DatasetError(str(exc)) from None
    if problems:
        raise DatasetError("\n".join(problems))
    if not questions:
        raise DatasetError(f"{path}: empty dataset")
    return questions


def require_gold(dataset: Sequence[MCQuestion]) -> None:
    missing = [q.qid for q in dataset if q.gold is None]
    if missing:
        raise DatasetError(f"questions without a gold label: {', '.join(missing)}")


# -- running ----------------------------------------------------------------


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Order-preserving map; the first failure propagates."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_full_sweeps(
    dataset: Sequence[MCQuestion], grid: SweepGrid, deps: SweepDeps, jobs: int = 1
) -> list[SweepResult]:
    """Visit every configuration for every question; output follows dataset order."""
    return parallel_map(lambda q: best_probability_sweep(q, grid, deps), dataset, jobs)


def run_no_context(dataset: Sequence[MCQuestion], deps: SweepDeps, jobs: int = 1) -> list[ConfidenceResult]:
    return parallel_map(deps.no_context, dataset, jobs)


def write_sweeps(sweeps: Iterable[SweepResult], path: str | Path) -> None:
    atomic_write(path, "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in sweeps))


def read_sweeps(path: str | Path, providers: Iterable[ProviderId]) -> list[SweepResult]:
    by_name = {p.name: p for p in providers}
    return [SweepResult.from_json(obj, by_name) for _, obj in read_jsonl(path)]


# -- accuracy report --------------------------------------------------------


@dataclass
class EvalReport:
    per_config_accuracy: dict[tuple[int, int, str], float]
    combined_per_window: dict[int, float]
    combined_all_windows: float
    combined_all_providers: float
    no_rag_accuracy: float
    n_questions: int
    method_accuracy: float | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "meta": self.meta,
            "n_questions": self.n_questions,
            "per_config_accuracy": [
                {"k": k, "window": w, "provider": p, "accuracy": acc}
                for (k, w, p), acc in self.per_config_accuracy.items()
            ],
            "combined_per_window": {str(w): acc for w, acc in self.combined_per_window.items()},
            "combined_all_windows": self.combined_all_windows,
            "combined_all_providers": self.combined_all_providers,
            "no_rag_accuracy": self.no_rag_accuracy,
            "method_accuracy": self.method_accuracy,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            per_config_accuracy={
                (int(c["k"]), int(c["window"]), c["provider"]): float(c["accuracy"])
                for c in obj["per_config_accuracy"]
            },
            combined_per_window={int(w): float(a) for w, a in obj["combined_per_window"].items()},
            combined_all_windows=float(obj["combined_all_windows"]),
            combined_all_providers=float(obj["combined_all_providers"]),
            no_rag_accuracy=float(obj["no_rag_accuracy"]),
            n_questions=int(obj["n_questions"]),
            method_accuracy=obj.get("method_accuracy"),
            meta=obj.get("meta", {}),
        )


def _accuracy(flags: Sequence[bool]) -> float:
    return sum(flags) / len(flags)


def build_report(
    dataset: Sequence[MCQuestion],
    sweeps: Sequence[SweepResult],
    no_rag: Sequence[ConfidenceResult],
    grid: SweepGrid,
    method: SweepMethod | None = None,
    meta: dict | None = None,
) -> EvalReport:
    """Aggregate full sweeps into an :class:`EvalReport`.

    The per-window and across-window rows use the first provider of the grid;
    the across-provider row uses every record.
    """
    require_gold(dataset)
    if len(sweeps) != len(dataset) or len(no_rag) != len(dataset):
        raise ValueError("dataset, sweeps and baseline answers must align")
    gold = [q.gold for q in dataset]
    for q, s in zip(dataset, sweeps):
        if q.qid != s.qid:
            raise ValueError(f"sweep for {s.qid!r} is not aligned with question {q.qid!r}")

    configs = iterate_grid(grid)
    per_config: dict[tuple[int, int, str], float] = {}
    for pos, cfg in enumerate(configs):
        flags = []
        for g, s in zip(gold, sweeps):
            rec = s.records[pos]
            if rec.config != cfg:
                raise ValueError(f"{s.qid}: record {pos} is {rec.config.key()}, expected {cfg.key()}")
            flags.append(rec.result.chosen == g)
        per_config[cfg.key()] = _accuracy(flags)

    primary = grid.providers[0].name
    per_window = {}
    for w in grid.window_sizes:
        per_window[w] = _accuracy([
            combine([s.restrict(lambda c, w=w: c.provider.name == primary and c.window == w)]).chosen == g
            for g, s in zip(gold, sweeps)
        ])
    all_windows = _accuracy([
        combine([s.restrict(lambda c: c.provider.name == primary)]).chosen == g
        for g, s in zip(gold, sweeps)
    ])
    all_providers = _accuracy([combine([s]).chosen == g for g, s in zip(gold, sweeps)])
    method_acc = None
    if method is not None:
        method_acc = _accuracy([replay_method(s.records, method).result.chosen == g for g, s in zip(gold, sweeps)])

    return EvalReport(
        per_config_accuracy=per_config,
        combined_per_window=per_window,
        combined_all_windows=all_windows,
        combined_all_providers=all_providers,
        no_rag_accuracy=_accuracy([r.chosen == g for g, r in zip(gold, no_rag)]),
        n_questions=len(dataset),
        method_accuracy=method_acc,
        meta=dict(meta or {}),
    )


def evaluate(
    dataset: Sequence[MCQuestion],
    grid: SweepGrid,
    method: SweepMethod,
    deps: SweepDeps,
    jobs: int = 1,
    meta: dict | None = None,
    sweeps_out: str | Path | None = None,
) -> EvalReport:
    """Sweep the whole grid for every question and build the accuracy report.

    Every configuration is visited so the table is complete; the answer the
    chosen ``method`` would give is replayed from the ordered records.
    """
    require_gold(dataset)
    sweeps = run_full_sweeps(dataset, grid, deps, jobs)
    if sweeps_out is not None:
        write_sweeps(sweeps, sweeps_out)
    no_rag = run_no_context(dataset, deps, jobs)
    header = {"method": method.to_json(), "grid": grid.to_json(), **(meta or {})}
    return build_report(dataset, sweeps, no_rag, grid, method, header)


# -- threshold coverage -----------------------------------------------------


@dataclass
class ThresholdReport:
    theta: float
    n_questions: int
    answered_count: int
    answered_accuracy: float | None
    overall_accuracy: float
    per_config_answered: dict[tuple[int, int, str], tuple[int, float | None]]

    def to_json(self) -> dict:
        return {
            "theta": self.theta,
            "n_questions": self.n_questions,
            "answered_count": self.answered_count,
            "answered_accuracy": self.answered_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "per_config_answered": [
                {"k": k, "window": w, "provider": p, "count": n, "accuracy": acc}
                for (k, w, p), (n, acc) in self.per_config_answered.items()
            ],
        }


def threshold_report_from_sweeps(
    dataset: Sequence[MCQuestion], sweeps: Sequence[SweepResult], theta: float
) -> ThresholdReport:
    """Coverage at ``theta`` from full, iteration-ordered sweeps.

    A question counts as answered when the threshold policy would exit
    early, i.e. some configuration reaches ``theta``. Per-configuration
    entries count questions whose confidence at that configuration alone
    reaches ``theta``.
    """
    require_gold(dataset)
    method = SweepMethod.threshold(theta)
    answered = []
    finals = []
    per_cfg: dict[tuple[int, int, str], list[bool]] = {}
    for q, s in zip(dataset, sweeps):
        rec = replay_method(s.records, method)
        finals.append(rec.result.chosen == q.gold)
        if rec.result.confidence >= theta:
            answered.append(rec.result.chosen == q.gold)
        for r in s.records:
            bucket = per_cfg.setdefault(r.config.key(), [])
            if r.result.confidence >= theta:
                bucket.append(r.result.chosen == q.gold)
    return ThresholdReport(
        theta=theta,
        n_questions=len(dataset),
        answered_count=len(answered),
        answered_accuracy=_accuracy(answered) if answered else None,
        overall_accuracy=_accuracy(finals),
        per_config_answered={k: (len(v), _accuracy(v) if v else None) for k, v in per_cfg.items()},
    )


def threshold_report(
    dataset: Sequence[MCQuestion], grid: SweepGrid, theta: float, deps: SweepDeps, jobs: int = 1
) -> ThresholdReport:
    require_gold(dataset)
    return threshold_report_from_sweeps(dataset, run_full_sweeps(dataset, grid, deps, jobs), theta)


# -- histograms -------------------------------------------------------------


@dataclass
class Histogram:
    bin_edges: list[float]
    correct_density: list[float]
    wrong_density: list[float]
    correct_counts: list[int]
    wrong_counts: list[int]

    def bin_accuracy(self) -> list[float | None]:
        """Fraction correct per bin (``None`` for empty bins)."""
        return [
            c / (c + w) if c + w else None for c, w in zip(self.correct_counts, self.wrong_counts)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["bin_edge_low", "bin_edge_high", "correct_density", "wrong_density"])
        for i in range(len(self.correct_density)):
            out.writerow([
                f"{self.bin_edges[i]:.6f}", f"{self.bin_edges[i + 1]:.6f}",
                f"{self.correct_density[i]:.6f}", f"{self.wrong_density[i]:.6f}",
            ])
        return buf.getvalue()


def confidence_histogram(records: Iterable[tuple[float, bool]], n_bins: int = DEFAULT_BINS) -> Histogram:
    """Uniform bins over [0, 1]; 1.0 lands in the last bin."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    correct = np.zeros(n_bins, dtype=np.int64)
    wrong = np.zeros(n_bins, dtype=np.int64)
    for conf, ok in records:
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence {conf} outside [0, 1]")
        b = min(int(conf * n_bins), n_bins - 1)
        (correct if ok else wrong)[b] += 1

    def density(counts: np.ndarray) -> list[float]:
        total = counts.sum()
        return (counts / total).tolist() if total else [0.0] * n_bins

    return Histogram(
        bin_edges=[i / n_bins for i in range(n_bins + 1)],
        correct_density=density(correct),
        wrong_density=density(wrong),
        correct_counts=correct.tolist(),
        wrong_counts=wrong.tolist(),
    )


def histogram_records(
    dataset: Sequence[MCQuestion], sweeps: Sequence[SweepResult], config_key: tuple | None = None
) -> list[tuple[float, bool]]:
    """(confidence, correct) pairs from every record, or only one configuration."""
    out = []
    for q, s in zip(dataset, sweeps):
        for r in s.records:
            if config_key is None or r.config.key() == tuple(config_key):
                out.append((r.result.confidence, r.result.chosen == q.gold))
    return out


# -- serialisation ----------------------------------------------------------


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def report_csv(report: EvalReport) -> str:
    """Chunk numbers down, (provider, window) across, then the combined and baseline rows."""
    ks = sorted({k for k, _, _ in report.per_config_accuracy})
    windows = sorted({w for _, w, _ in report.per_config_accuracy})
    providers = list(dict.fromkeys(p for _, _, p in report.per_config_accuracy))
    multi = len(providers) > 1
    cols = [(p, w) for p in providers for w in windows]

    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["chunk_number"] + [f"{p}/window_{w}" if multi else f"window_{w}" for p, w in cols])
    for k in ks:
        out.writerow([k] + [_fmt(report.per_config_accuracy.get((k, w, p))) for p, w in cols])
    out.writerow(["combined"] + [_fmt(report.combined_per_window.get(w)) for w in windows])
    out.writerow(["combined_window", _fmt(report.combined_all_windows)])
    out.writerow(["combined_providers", _fmt(report.combined_all_providers)])
    out.writerow(["without_rag", _fmt(report.no_rag_accuracy)])
    return buf.getvalue()


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"


def emit_report(report: EvalReport, fmt: str, path: str | Path) -> None:
    if fmt == "json":
        text = report_json(report)
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    atomic_write(path, text)
