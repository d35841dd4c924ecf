"""Retrieval metrics, answer accuracy, benchmark sweeps and aspect-degradation detection."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .prompts import NOT_ANSWERABLE

logger = logging.getLogger(__name__)

KS = (1, 3, 5)


@dataclass
class EvalRecord:
    qid: str
    doc_id: str
    question: str
    gt_answer: str
    evidence_pages: list[str]
    answerable: bool = True

    def __post_init__(self):
        self.answerable = self.gt_answer != NOT_ANSWERABLE


def load_dataset(path) -> list[EvalRecord]:
    """JSONL rows ``{"qid", "doc_id", "question", "answer", "evidence_pages", "answerable"}``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                out.append(
                    EvalRecord(
                        qid=str(row["qid"]),
                        doc_id=str(row["doc_id"]),
                        question=row["question"],
                        gt_answer=row["answer"],
                        evidence_pages=[str(p) for p in row.get("evidence_pages", [])],
                    )
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
    return out


def recall_at_k(pred: Sequence[str], gt: Iterable[str], k: int) -> float:
    gt = set(gt)
    if k < 1 or not gt:
        raise ValueError("recall needs k >= 1 and a non-empty ground truth")
    return len(set(pred[:k]) & gt) / len(gt)


def precision_at_k(pred: Sequence[str], gt: Iterable[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return len(set(pred[:k]) & set(gt)) / k


def dcg(rels: Sequence[float]) -> float:
    return sum((2.0 ** r - 1.0) / math.log2(i + 1) for i, r in enumerate(rels, start=1))


def ndcg_at_k(
    pred: Sequence[str],
    gt: Iterable[str],
    k: int,
    graded: Optional[Mapping[str, float]] = None,
) -> float:
    """NDCG with binary relevance against the evidence set.

    With ``graded`` (page id -> relevance), the relevance of relevant pages is
    taken from that mapping instead of 1.
    """
    gt = set(gt)
    if k < 1 or not gt:
        raise ValueError("ndcg needs k >= 1 and a non-empty ground truth")

    def rel(p: str) -> float:
        if p not in gt:
            return 0.0
        return float(graded.get(p, 0.0)) if graded is not None else 1.0

    actual = dcg([rel(p) for p in pred[:k]])
    ideal = dcg(sorted((rel(p) for p in gt), reverse=True)[:k])
    return actual / ideal if ideal > 0 else 0.0


def first_relevant_rank(pred: Sequence[str], gt: Iterable[str]) -> Optional[int]:
    gt = set(gt)
    for i, p in enumerate(pred, start=1):
        if p in gt:
            return i
    return None


def mrr(first_ranks: Sequence[Optional[int]]) -> float:
    """Mean reciprocal rank; a query whose relevant pages were never retrieved contributes 0."""
    if not first_ranks:
        raise ValueError("mrr needs at least one query")
    return sum(1.0 / r if r else 0.0 for r in first_ranks) / len(first_ranks)


def retrieval_metrics(
    pred: Sequence[str],
    gt: Iterable[str],
    ks: Sequence[int] = KS,
    graded: Optional[Mapping[str, float]] = None,
) -> dict[str, float]:
    gt = set(gt)
    out: dict[str, float] = {}
    for k in ks:
        out[f"recall@{k}"] = recall_at_k(pred, gt, k)
        out[f"precision@{k}"] = precision_at_k(pred, gt, k)
        out[f"ndcg@{k}"] = ndcg_at_k(pred, gt, k, graded)
    out["mrr"] = mrr([first_relevant_rank(pred, gt)])
    return out


def detect_issue(record: EvalRecord, atomic_subqueries: Sequence[str], retriever_fn: Callable[[str], Sequence[str]], k: int = 5) -> bool:
    """True if some atomic subquery alone retrieves the evidence strictly better (Recall@k) than the full question."""
    if not record.evidence_pages:
        return False
    base = recall_at_k(list(retriever_fn(record.question)), record.evidence_pages, k)
    return any(recall_at_k(list(retriever_fn(s)), record.evidence_pages, k) > base for s in atomic_subqueries)


@dataclass
class QueryRow:
    qid: str
    metrics: dict[str, float]
    answer: Optional[str] = None
    correct: Optional[int] = None
    rounds: Optional[int] = None
    judge_calls: Optional[int] = None
    ranking: list[str] = field(default_factory=list)
    issue: Optional[bool] = None


@dataclass
class MetricsReport:
    config: dict
    counts: dict[str, int]
    aggregates: dict[str, float]
    rows: list[QueryRow]
    failures: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "counts": self.counts,
            "aggregates": self.aggregates,
            "failures": self.failures,
            "per_query": [asdict(r) for r in self.rows],
        }


def aggregate(rows: Sequence[QueryRow]) -> dict[str, float]:
    """Unweighted means over queries, reduced in qid order."""
    rows = sorted(rows, key=lambda r: r.qid)
    agg: dict[str, float] = {}
    keys = sorted({k for r in rows for k in r.metrics})
    for key in keys:
        vals = [r.metrics[key] for r in rows if key in r.metrics]
        if vals:
            agg[key] = math.fsum(vals) / len(vals)
    graded = [r.correct for r in rows if r.correct is not None]
    if graded:
        agg["accuracy"] = sum(graded) / len(graded)
    issues = [r.issue for r in rows if r.issue is not None]
    if issues:
        agg["issue_rate"] = sum(issues) / len(issues)
    return agg


def run_benchmark(
    dataset: Sequence[EvalRecord],
    engine,
    grader: Optional[Callable[[str, str, str], int]] = None,
    config: Optional[dict] = None,
    ks: Sequence[int] = KS,
    answer: bool = True,
    issues: bool = False,
    graded_ndcg: bool = False,
) -> MetricsReport:
    """Retrieve (and optionally answer and grade) every record; aggregate per-query values.

    ``engine`` needs ``retrieve(question, doc_id=...)`` returning an object
    with ``page_ids`` and ``judge_calls`` and, when answering,
    ``answer(run) -> (answer, trace)``.  Per-query failures are recorded and
    left out of the aggregates.

    ``issues`` also runs :func:`detect_issue` with the engine's pure-LI
    baseline; ``graded_ndcg`` uses the normalised LI score of each evidence
    page as its relevance instead of 1.
    """
    rows: list[QueryRow] = []
    failures: dict[str, str] = {}
    skipped = 0
    for rec in sorted(dataset, key=lambda r: r.qid):
        try:
            result = engine.retrieve(rec.question, doc_id=rec.doc_id)
            ranking = result.page_ids
            metrics = {}
            if rec.evidence_pages:
                graded = getattr(result.result, "li_norm", None) if graded_ndcg else None
                metrics = retrieval_metrics(ranking, rec.evidence_pages, ks, graded)
            else:
                skipped += 1
                logger.info("%s: no evidence pages, retrieval metrics skipped", rec.qid)
            row = QueryRow(rec.qid, metrics, ranking=ranking, judge_calls=result.judge_calls)
            if issues and rec.evidence_pages and getattr(result, "atoms", None):
                base = lambda q, doc=rec.doc_id: engine.retrieve(q, doc_id=doc, baseline=True).page_ids
                row.issue = detect_issue(rec, result.atoms, base)
            if answer:
                text, trace = engine.answer(result)
                row.answer, row.rounds = text, trace.rounds_used
                if grader is not None:
                    row.correct = int(grader(rec.question, text, rec.gt_answer))
            rows.append(row)
        except Exception as exc:
            logger.warning("%s failed: %r", rec.qid, exc)
            failures[rec.qid] = repr(exc)
    counts = {
        "queries": len(dataset),
        "evaluated": len(rows),
        "failed": len(failures),
        "no_evidence": skipped,
    }
    return MetricsReport(config or {}, counts, aggregate(rows), rows, failures)


def write_report(report: MetricsReport, out_dir) -> dict[str, Path]:
    """Write ``report.json``, ``per_query.jsonl`` and ``summary.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "jsonl": out / "per_query.jsonl", "csv": out / "summary.csv"}
    paths["json"].write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(paths["jsonl"], "w", encoding="utf-8") as fh:
        for r in report.rows:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in sorted(report.aggregates.items()):
            w.writerow([k, f"{v:.6f}"])
        for k, v in sorted(report.counts.items()):
            w.writerow([f"count:{k}", v])
    return paths
