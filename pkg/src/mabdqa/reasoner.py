"""Reflective answering over the retrieved pages.

Pipeline: answer from the top pages, ask whether the answer addresses the
question, and if not, pull a query-focused neighbourhood out of the hypergraph,
summarise it, rewrite the question and refine the answer.  Repeats up to
``max_rounds`` times.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .embedding import EmbeddingIndex
from .gateway import GatewayError
from .hypergraph import QueryAwareHypergraph
from .prompts import (
    ANSWER,
    ANSWER_REFLECTION,
    HYPERGRAPH_SUMMARY,
    NOT_ANSWERABLE,
    QUESTION_REFLECTION,
    REFINE,
)

logger = logging.getLogger(__name__)


@dataclass
class ReasonerParams:
    max_rounds: int = 2
    answer_pages: int = 4
    subgraph_cap: int = 12


@dataclass
class QueryFocusedSubgraph:
    members: list[str]
    edges: list[tuple[str, str, float]]
    hyperedges: list[int]  # 1-based subquery indices touching the members


@dataclass
class ReasoningTrace:
    stages: list[dict] = field(default_factory=list)
    final_answer: str = ""
    rounds_used: int = 0
    degraded: bool = False

    def add(self, stage: str, prompt_id: str, payload, output: str) -> None:
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]
        self.stages.append({"stage": stage, "prompt": prompt_id, "input_digest": digest, "output": output})

    def to_json(self) -> dict:
        return {
            "stages": self.stages,
            "final_answer": self.final_answer,
            "rounds_used": self.rounds_used,
            "degraded": self.degraded,
        }


def build_query_focused_subgraph(
    hypergraph: QueryAwareHypergraph,
    top_pages: Sequence[str],
    composite_scores: Mapping[str, float],
    cap: int = 12,
) -> QueryFocusedSubgraph:
    """Seeds first, then their graph neighbours and hyperedge co-members by descending score."""
    if not top_pages:
        raise ValueError("top_pages must be non-empty")
    seeds = list(dict.fromkeys(top_pages))[:cap]
    seed_set = set(seeds)
    expansion: set[str] = set()
    for s in seeds:
        expansion |= hypergraph.neighbors(s)
    expansion -= seed_set
    order = {p: i for i, p in enumerate(hypergraph.nodes)}
    ranked = sorted(expansion, key=lambda p: (-composite_scores.get(p, 0.0), order.get(p, len(order))))
    members = seeds + ranked[: max(0, cap - len(seeds))]
    mset = set(members)
    edges = [(a, b, s) for (a, b), s in sorted(hypergraph.graph.edges.items()) if a in mset and b in mset]
    touched = [
        hypergraph.subqueries[j].index
        for j, he in enumerate(hypergraph.hyperedges)
        if he.members & mset
    ]
    return QueryFocusedSubgraph(members, edges, touched)


def subgraph_digest(sub: QueryFocusedSubgraph, hypergraph: QueryAwareHypergraph) -> str:
    """Plain-text rendering of the subgraph for the summary prompt."""
    mset = set(sub.members)
    parts = ["pages " + ", ".join(sub.members)]
    for j, he in enumerate(hypergraph.hyperedges):
        sq = hypergraph.subqueries[j]
        inside = [p for p in sub.members if p in he.members]
        if inside:
            parts.append(f'"{sq.text}" -> {", ".join(inside)}')
    if sub.edges:
        parts.append("linked pages " + "; ".join(f"{a}-{b}" for a, b, _ in sub.edges if a in mset))
    return "; ".join(parts)


def is_not_answerable(text: str) -> bool:
    return text.strip().strip("\"'.").strip().casefold() == NOT_ANSWERABLE.casefold()


def parse_reflection(reply: str) -> bool:
    """True when the reply's first token is "yes"; anything else counts as "no"."""
    m = re.match(r"\W*(\w+)", reply or "")
    return bool(m) and m.group(1).lower() == "yes"


def parse_refined(reply: str) -> str:
    marker = "improved answer:"
    low = reply.lower()
    cut = low.rfind(marker)
    return (reply[cut + len(marker):] if cut >= 0 else reply).strip()


def answer(
    question: str,
    ranking: Sequence[str],
    hypergraph: QueryAwareHypergraph,
    index: EmbeddingIndex,
    gateway,
    params: Optional[ReasonerParams] = None,
    composite_scores: Optional[Mapping[str, float]] = None,
) -> tuple[str, ReasoningTrace]:
    if not ranking:
        raise ValueError("ranking must be non-empty")
    params = params or ReasonerParams()
    scores = composite_scores or {}
    trace = ReasoningTrace()
    top = list(ranking[: params.answer_pages])
    pages = [index.get(p) for p in top]

    def finish(text: str) -> tuple[str, ReasoningTrace]:
        trace.final_answer = NOT_ANSWERABLE if is_not_answerable(text) else text
        return trace.final_answer, trace

    fields = {"num_images": len(pages), "question": question}
    try:
        current = gateway.chat(ANSWER, fields, pages=pages).strip()
    except GatewayError as exc:
        logger.warning("initial answer failed: %s", exc)
        trace.degraded = True
        return finish(NOT_ANSWERABLE)
    trace.add("initial_answer", ANSWER, {**fields, "pages": top}, current)
    if is_not_answerable(current):
        return finish(current)

    asked = question
    try:
        while True:
            fields = {"question": asked, "answer": current}
            reply = gateway.chat(ANSWER_REFLECTION, fields)
            trace.add("answer_reflection", ANSWER_REFLECTION, fields, reply)
            if parse_reflection(reply) or trace.rounds_used >= params.max_rounds:
                break
            trace.rounds_used += 1
            sub = build_query_focused_subgraph(hypergraph, top, scores, params.subgraph_cap)
            fields = {"question": asked, "hypergraph": subgraph_digest(sub, hypergraph)}
            summary = gateway.chat(HYPERGRAPH_SUMMARY, fields).strip()
            trace.add("hypergraph_summary", HYPERGRAPH_SUMMARY, {**fields, "members": sub.members}, summary)
            fields = {"num_images": len(pages), "question": asked}
            rewritten = gateway.chat(QUESTION_REFLECTION, fields, pages=pages).strip()
            trace.add("question_reflection", QUESTION_REFLECTION, fields, rewritten)
            asked = rewritten or asked
            fields = {"question": asked, "initial_answer": current, "summary": summary}
            reply = gateway.chat(REFINE, fields)
            refined = parse_refined(reply)
            trace.add("refined_answer", REFINE, fields, refined)
            if refined:
                current = refined
            if is_not_answerable(current):
                break
    except GatewayError as exc:
        logger.warning("reasoning degraded after %d rounds: %s", trace.rounds_used, exc)
        trace.degraded = True
    return finish(current)
