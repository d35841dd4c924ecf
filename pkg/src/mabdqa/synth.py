"""Synthetic corpora with planted evidence and inflated distractor pages.

Each corpus carries one multi-aspect query.  Informative aspects appear on the
evidence pages; the distractor aspect is repeated many times on distractor
pages, so under plain late interaction (a sum over query tokens) those pages
collect a high score without holding the evidence.  An oracle judge rates
pages from the planted truth, which lets bandit retrieval and the pure-LI
baseline be compared head to head.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli
from scipy.stats import binomtest

from .bandit import RetrievalParams, pure_li_ranking, run_retrieval
from .embedding import ContractError, EmbeddingIndex, PageRecord
from .hypergraph import assemble_hypergraph, build_page_graph, build_subquery_set
from .metrics import KS, retrieval_metrics

ASPECT_NAMES = [
    "online revenue",
    "fiscal 2015",
    "guide book",
    "market share",
    "board members",
    "net income",
    "campus map",
    "survey results",
]


@dataclass
class SyntheticCorpusSpec:
    num_pages: int = 100
    dim: int = 32
    num_aspects: int = 3
    distractor_aspects: int = 1
    vectors_per_page: int = 12
    noise_sigma: float = 0.15
    judge_flip_prob: float = 0.05
    seed: int = 42
    evidence_pages: int = 3
    distractor_pages: int = 8
    query_tokens_per_aspect: int = 2
    distractor_query_tokens: int = 4

    def validate(self) -> None:
        if not 0 <= self.distractor_aspects < self.num_aspects:
            raise ContractError("need 0 <= distractor_aspects < num_aspects")
        if self.num_aspects > len(ASPECT_NAMES):
            raise ContractError(f"at most {len(ASPECT_NAMES)} aspects are supported")
        if self.num_pages < self.num_aspects:
            raise ContractError("num_pages must be >= num_aspects")
        if self.evidence_pages < 1 or self.evidence_pages + self.distractor_pages > self.num_pages:
            raise ContractError("evidence_pages + distractor_pages must fit in num_pages")
        if not 0.0 <= self.judge_flip_prob < 1.0:
            raise ContractError("judge_flip_prob must lie in [0, 1)")
        if self.dim < 1 or self.vectors_per_page < 1 or self.noise_sigma < 0:
            raise ContractError("dim and vectors_per_page must be >= 1, noise_sigma >= 0")


def load_spec(path) -> SyntheticCorpusSpec:
    """Read a TOML file whose keys mirror :class:`SyntheticCorpusSpec` fields."""
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    known = {f.name for f in fields(SyntheticCorpusSpec)}
    unknown = set(doc) - known
    if unknown:
        raise ContractError(f"unknown spec keys: {sorted(unknown)}")
    spec = SyntheticCorpusSpec(**doc)
    spec.validate()
    return spec


@dataclass
class SyntheticQuery:
    qid: str
    question: str
    atoms: list[str]


@dataclass
class SyntheticTruth:
    evidence: dict[str, list[str]]
    page_aspects: dict[str, list[int]]
    is_distractor: list[bool]
    aspect_names: list[str]


class SyntheticEmbedder:
    """Looks up the planted query-token embeddings for known texts."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = table

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ContractError("embed() needs a non-empty batch")
        try:
            return [self.table[t] for t in texts]
        except KeyError as exc:
            raise ContractError(f"text {exc} is not part of this synthetic corpus") from None


@dataclass
class SyntheticCorpus:
    index: EmbeddingIndex
    queries: list[SyntheticQuery]
    truth: SyntheticTruth
    embedder: SyntheticEmbedder
    spec: SyntheticCorpusSpec


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n == 0, 1.0, n)


def generate_corpus(spec: SyntheticCorpusSpec) -> SyntheticCorpus:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    concepts = _unit(rng.standard_normal((spec.num_aspects, d)))
    n_inf = spec.num_aspects - spec.distractor_aspects
    informative = list(range(n_inf))
    distractors = list(range(n_inf, spec.num_aspects))
    names = ASPECT_NAMES[: spec.num_aspects]

    def near(c: np.ndarray, n: int, sigma: float) -> np.ndarray:
        return _unit(c[None, :] + sigma * rng.standard_normal((n, d)) / math.sqrt(d))

    def blend(c: np.ndarray, weight: float, n: int) -> np.ndarray:
        # vectors whose cosine with c is about `weight`
        out = []
        for _ in range(n):
            r = rng.standard_normal(d)
            r -= (r @ c) * c
            r = r / np.linalg.norm(r)
            out.append(weight * c + math.sqrt(max(0.0, 1 - weight ** 2)) * r)
        return _unit(np.asarray(out) + spec.noise_sigma * rng.standard_normal((n, d)) / math.sqrt(d))

    def background(n: int) -> np.ndarray:
        return _unit(rng.standard_normal((n, d)))

    # query tokens
    token_table: dict[str, np.ndarray] = {}
    per_aspect = []
    for a in range(spec.num_aspects):
        n_tok = spec.distractor_query_tokens if a in distractors else spec.query_tokens_per_aspect
        tok = near(concepts[a], n_tok, spec.noise_sigma)
        per_aspect.append(tok)
        token_table[names[a]] = tok.astype(np.float32)
    question = "What do the pages say about " + ", ".join(names) + "?"
    token_table[question] = np.concatenate(per_aspect).astype(np.float32)

    v = spec.vectors_per_page
    kinds = (
        ["evidence"] * spec.evidence_pages
        + ["distractor"] * spec.distractor_pages
        + ["background"] * (spec.num_pages - spec.evidence_pages - spec.distractor_pages)
    )
    order = rng.permutation(len(kinds))
    index = EmbeddingIndex(d)
    page_aspects: dict[str, list[int]] = {}
    evidence: list[str] = []
    for n, k in enumerate(order):
        kind = kinds[k]
        pid = f"p{n + 1:03d}"
        if kind == "evidence":
            rows = [near(concepts[a], 2, spec.noise_sigma) for a in informative]
            rows += [blend(concepts[a], rng.uniform(0.2, 0.5), 1) for a in distractors]
            aspects = list(informative)
            evidence.append(pid)
        elif kind == "distractor":
            rows = [near(concepts[a], max(1, v // 2), spec.noise_sigma) for a in distractors]
            rows += [blend(concepts[a], rng.uniform(0.1, 0.7), 1) for a in informative]
            aspects = list(distractors)
        else:
            a = int(rng.integers(spec.num_aspects))
            rows = [blend(concepts[a], rng.uniform(0.3, 0.7), 1)]
            aspects = []
        mat = np.concatenate(rows)
        if mat.shape[0] < v:
            mat = np.concatenate([mat, background(v - mat.shape[0])])
        index.add(PageRecord("synthetic", pid, n + 1, mat.astype(np.float32)))
        page_aspects[pid] = aspects

    qid = f"q{spec.seed}"
    truth = SyntheticTruth(
        evidence={qid: evidence},
        page_aspects=page_aspects,
        is_distractor=[a in distractors for a in range(spec.num_aspects)],
        aspect_names=names,
    )
    return SyntheticCorpus(index, [SyntheticQuery(qid, question, list(names))], truth, SyntheticEmbedder(token_table), spec)


def oracle_judge(page_id: str, truth: SyntheticTruth, flip_prob: float, rng: np.random.Generator, qid: Optional[str] = None) -> int:
    """Evidence pages rate 4-5, others 1-2; the bucket is swapped with probability ``flip_prob``."""
    if page_id not in truth.page_aspects:
        raise ContractError(f"unknown page {page_id!r}")
    qid = qid if qid is not None else next(iter(truth.evidence))
    relevant = page_id in truth.evidence[qid]
    if rng.random() < flip_prob:
        relevant = not relevant
    return int(rng.integers(4, 6)) if relevant else int(rng.integers(1, 3))


def distractor_outranks_evidence(corpus: SyntheticCorpus) -> bool:
    """Whether, under raw LI with the full question, some distractor page beats some evidence page."""
    q = corpus.queries[0]
    scores = corpus.index.late_interaction_all(corpus.embedder.embed([q.question])[0])
    ids = corpus.index.page_ids
    ev = set(corpus.truth.evidence[q.qid])
    distractor_ids = {p for p, a in corpus.truth.page_aspects.items() if any(corpus.truth.is_distractor[i] for i in a)}
    worst_ev = min(scores[i] for i, p in enumerate(ids) if p in ev)
    return any(scores[i] > worst_ev for i, p in enumerate(ids) if p in distractor_ids)


@dataclass
class TrialResult:
    trial: int
    seed: int
    metrics: dict[str, dict[str, float]]
    judge_calls: int
    budget: int
    distractor_arm_mean: Optional[float]
    evidence_arm_mean: Optional[float]
    ranking: dict[str, list[str]] = field(default_factory=dict)
    trace_judged: int = 0  # iterations in the trace that evaluated a page


@dataclass
class ComparisonReport:
    config: dict
    methods: list[str]
    trials: list[TrialResult]
    means: dict[str, dict[str, float]]
    differences: dict[str, float]
    sign_test: dict[str, dict[str, float]]
    arm_means: dict[str, float]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "methods": self.methods,
            "means": self.means,
            "differences": self.differences,
            "sign_test": self.sign_test,
            "arm_means": self.arm_means,
            "trials": [asdict(t) for t in self.trials],
        }


def _sign_test(diffs: Sequence[float]) -> dict[str, float]:
    pos = sum(1 for x in diffs if x > 0)
    neg = sum(1 for x in diffs if x < 0)
    n = pos + neg
    p = binomtest(pos, n, 0.5).pvalue if n else 1.0
    return {"wins": pos, "losses": neg, "ties": len(diffs) - n, "p_value": float(p)}


def run_trial(
    spec: SyntheticCorpusSpec,
    params: RetrievalParams,
    theta_g: float = 0.8,
    theta_h: int = 10,
    methods: Sequence[str] = ("mab", "pure_li"),
    trial: int = 0,
) -> TrialResult:
    corpus = generate_corpus(spec)
    q = corpus.queries[0]
    evidence = corpus.truth.evidence[q.qid]
    subs = build_subquery_set(q.question, q.atoms, corpus.embedder)
    k_out = max(params.output_k, max(KS))
    out: dict[str, dict[str, float]] = {}
    rankings: dict[str, list[str]] = {}
    judge_calls, trace_judged, d_mean, e_mean = 0, 0, None, None
    if "pure_li" in methods:
        ranking = [p for p, _ in pure_li_ranking(corpus.index, subs[-1].embedding, k_out)]
        out["pure_li"] = retrieval_metrics(ranking, evidence)
        rankings["pure_li"] = ranking
    if "mab" in methods:
        graph = build_page_graph(corpus.index, theta_g)
        hg = assemble_hypergraph(corpus.index, theta_g, subs, theta_h, page_graph=graph)
        judge_rng = np.random.default_rng([spec.seed, 7919])
        calls = [0]

        def judge(page, _priori):
            calls[0] += 1
            return oracle_judge(page.page_id, corpus.truth, spec.judge_flip_prob, judge_rng, q.qid)

        p = RetrievalParams(**{**asdict(params), "output_k": k_out, "seed": params.seed + trial})
        res = run_retrieval(hg, corpus.index, q.question, subs, p, judge)
        ranking = res.page_ids
        out["mab"] = retrieval_metrics(ranking, evidence)
        rankings["mab"] = ranking
        judge_calls = calls[0]
        trace_judged = sum(1 for r in res.state.trace if r["page"] is not None)
        atoms = len(q.atoms)
        flags = corpus.truth.is_distractor
        means = [a / (a + b) for a, b in res.arms[:atoms]]
        d = [m for m, f in zip(means, flags) if f]
        e = [m for m, f in zip(means, flags) if not f]
        d_mean = float(np.mean(d)) if d else None
        e_mean = float(np.mean(e)) if e else None
    return TrialResult(trial, spec.seed, out, judge_calls, params.budget, d_mean, e_mean, rankings, trace_judged)


def compare_methods(
    spec: SyntheticCorpusSpec,
    trials: int = 50,
    params: Optional[RetrievalParams] = None,
    theta_g: float = 0.8,
    theta_h: int = 10,
    methods: Sequence[str] = ("mab", "pure_li"),
) -> ComparisonReport:
    """Run both methods on ``trials`` corpora seeded ``spec.seed + t``."""
    if trials < 1:
        raise ContractError("trials must be >= 1")
    params = params or RetrievalParams()
    methods = list(methods)
    results = []
    for t in range(trials):
        s = SyntheticCorpusSpec(**{**asdict(spec), "seed": spec.seed + t})
        results.append(run_trial(s, params, theta_g, theta_h, methods, trial=t))
    keys = sorted(results[0].metrics[methods[0]])
    means = {m: {k: float(np.mean([r.metrics[m][k] for r in results])) for k in keys} for m in methods}
    diffs: dict[str, float] = {}
    tests: dict[str, dict[str, float]] = {}
    if len(methods) == 2:
        a, b = methods
        for k in keys:
            per_trial = [r.metrics[a][k] - r.metrics[b][k] for r in results]
            diffs[k] = float(np.mean(per_trial))
            tests[k] = _sign_test(per_trial)
    d = [r.distractor_arm_mean for r in results if r.distractor_arm_mean is not None]
    e = [r.evidence_arm_mean for r in results if r.evidence_arm_mean is not None]
    arm_means = {}
    if d and e:
        arm_means = {"distractor": float(np.mean(d)), "evidence": float(np.mean(e))}
    config = {"spec": asdict(spec), "params": asdict(params), "theta_g": theta_g, "theta_h": theta_h, "trials": trials}
    return ComparisonReport(config, methods, results, means, diffs, tests, arm_means)


def write_comparison(report: ComparisonReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "comparison.json", "csv": out / "comparison.csv"}
    paths["json"].write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + [f"mean_{m}" for m in report.methods] + ["mean_diff", "wins", "losses", "ties", "p_value"])
        for k in sorted(report.means[report.methods[0]]):
            st = report.sign_test.get(k, {})
            w.writerow(
                [k]
                + [f"{report.means[m][k]:.6f}" for m in report.methods]
                + [f"{report.differences.get(k, 0.0):.6f}"]
                + [st.get("wins", ""), st.get("losses", ""), st.get("ties", ""), f"{st.get('p_value', float('nan')):.6g}"]
            )
    return paths
