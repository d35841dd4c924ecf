"""End-to-end wiring: decomposition, hypergraph, bandit retrieval and answering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .bandit import RetrievalParams, RetrievalResult, RetrievalState, pure_li_ranking, run_retrieval
from .embedding import EmbeddingIndex, PageRecord
from .gateway import judge_page
from .hypergraph import (
    PageGraph,
    QueryAwareHypergraph,
    Subquery,
    assemble_hypergraph,
    build_page_graph,
    build_subquery_set,
    decompose_query,
)
from .reasoner import ReasonerParams, ReasoningTrace, answer

logger = logging.getLogger(__name__)


@dataclass
class QueryRun:
    question: str
    index: EmbeddingIndex
    result: RetrievalResult
    atoms: list[str] = field(default_factory=list)
    subqueries: list[Subquery] = field(default_factory=list)
    hypergraph: Optional[QueryAwareHypergraph] = None
    baseline: bool = False

    @property
    def page_ids(self) -> list[str]:
        return self.result.page_ids

    @property
    def ranking(self) -> list[tuple[str, float]]:
        return self.result.ranking

    @property
    def judge_calls(self) -> int:
        return self.result.judge_calls

    @property
    def trace(self) -> list[dict]:
        return self.result.state.trace


class Engine:
    """Runs retrieval and answering for questions against one embedding index.

    ``gateway`` supplies chat replies (decomposition, judging, answering) and,
    unless ``embedder`` is given, query embeddings.  The query-agnostic page
    graph is built lazily once and reused.
    """

    def __init__(
        self,
        index: EmbeddingIndex,
        gateway,
        retrieval: Optional[RetrievalParams] = None,
        reasoner: Optional[ReasonerParams] = None,
        theta_g: float = 0.8,
        theta_h: int = 10,
        page_graph: Optional[PageGraph] = None,
        embedder=None,
        judge: Optional[Callable[[str, PageRecord, str], int]] = None,
    ):
        self.index = index
        self.gateway = gateway
        self.embedder = embedder or gateway
        self.retrieval = retrieval or RetrievalParams()
        self.reasoner = reasoner or ReasonerParams()
        self.theta_g = theta_g
        self.theta_h = theta_h
        self._graph = page_graph
        self._judge = judge

    @property
    def page_graph(self) -> PageGraph:
        if self._graph is None:
            self._graph = build_page_graph(self.index, self.theta_g)
        return self._graph

    def _view(self, doc_id: Optional[str]) -> tuple[EmbeddingIndex, PageGraph]:
        if doc_id is None:
            return self.index, self.page_graph
        sub = self.index.subset(doc_id)
        if not len(sub):
            raise KeyError(f"no pages for doc_id {doc_id!r}")
        return sub, self.page_graph.restrict(sub.page_ids)

    def retrieve(
        self,
        question: str,
        doc_id: Optional[str] = None,
        atoms: Optional[Sequence[str]] = None,
        baseline: bool = False,
    ) -> QueryRun:
        index, graph = self._view(doc_id)
        k = self.retrieval.output_k
        if baseline:
            q_emb = self.embedder.embed([question])[0]
            ranking = pure_li_ranking(index, q_emb, k)
            result = RetrievalResult(ranking, RetrievalState(), [], {})
            return QueryRun(question, index, result, baseline=True)
        atoms = list(atoms) if atoms is not None else decompose_query(question, self.gateway)
        subs = build_subquery_set(question, atoms, self.embedder)
        hg = assemble_hypergraph(index, self.theta_g, subs, self.theta_h, page_graph=graph)
        judge = self._judge or (lambda q, page, priori: judge_page(self.gateway, q, page, priori))
        result = run_retrieval(hg, index, question, subs, self.retrieval, lambda page, priori: judge(question, page, priori))
        return QueryRun(question, index, result, atoms, subs, hg)

    def answer(self, run: QueryRun) -> tuple[str, ReasoningTrace]:
        if run.hypergraph is None:
            raise ValueError("answering needs a bandit retrieval run, not a baseline run")
        return answer(
            run.question,
            run.page_ids,
            run.hypergraph,
            run.index,
            self.gateway,
            self.reasoner,
            run.result.state.composite,
        )
