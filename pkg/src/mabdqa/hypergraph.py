"""Query-aware page hypergraph construction.

The page graph links pages whose pooled embeddings are similar; it does not
depend on the query and is cached per corpus.  For each query, the question is
split into atomic subqueries plus one global subquery (the full question); each
subquery's top-ranked pages, filtered against the global ranking, form one
hyperedge.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .embedding import ContractError, EmbeddingIndex, _similarity_of_units, as_multivector
from .prompts import DECOMPOSE

logger = logging.getLogger(__name__)

MAX_SUBQUERIES = 8


@dataclass
class PageGraph:
    """Undirected similarity graph over page ids (no self loops)."""

    theta_g: float
    nodes: list[str] = field(default_factory=list)
    edges: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        self._adj: dict[str, set[str]] = {n: set() for n in self.nodes}
        edges, self.edges = dict(self.edges), {}
        for (a, b), sim in edges.items():
            self.add_edge(a, b, sim)

    @staticmethod
    def _key(a: str, b: str) -> tuple[str, str]:
        return (a, b) if a <= b else (b, a)

    def add_edge(self, a: str, b: str, sim: float) -> None:
        if a == b:
            raise ContractError("self loops are not allowed")
        self.edges[self._key(a, b)] = float(sim)
        self._adj.setdefault(a, set()).add(b)
        self._adj.setdefault(b, set()).add(a)

    def has_edge(self, a: str, b: str) -> bool:
        return self._key(a, b) in self.edges

    def similarity(self, a: str, b: str) -> Optional[float]:
        return self.edges.get(self._key(a, b))

    def neighbors(self, page_id: str) -> set[str]:
        return set(self._adj.get(page_id, ()))

    def restrict(self, page_ids: Sequence[str]) -> "PageGraph":
        """Induced subgraph on ``page_ids`` (edges are pairwise, so this is exact)."""
        keep = set(page_ids)
        return PageGraph(
            self.theta_g,
            [p for p in page_ids],
            {k: v for k, v in self.edges.items() if k[0] in keep and k[1] in keep},
        )

    def to_json(self) -> dict:
        rows = [[a, b, sim] for (a, b), sim in sorted(self.edges.items())]
        return {"theta_g": self.theta_g, "edges": rows}

    @classmethod
    def from_json(cls, doc: dict, nodes: Sequence[str]) -> "PageGraph":
        edges = {}
        for a, b, sim in doc["edges"]:
            edges[cls._key(a, b)] = float(sim)
        return cls(float(doc["theta_g"]), list(nodes), edges)


def save_page_graph(graph: PageGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_json(), fh, indent=None)
        fh.write("\n")


def load_page_graph(path, index: EmbeddingIndex) -> PageGraph:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return PageGraph.from_json(doc, index.page_ids)


def build_page_graph(index: EmbeddingIndex, theta_g: float) -> PageGraph:
    """Link every pair of distinct pages whose pooled cosine similarity is >= ``theta_g``."""
    if not -1.0 <= theta_g <= 1.0:
        raise ContractError(f"theta_g must lie in [-1, 1], got {theta_g}")
    ids = index.page_ids
    graph = PageGraph(float(theta_g), list(ids))
    if len(ids) < 2:
        return graph
    units = index.pooled_units()
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            sim = _similarity_of_units(units[i], units[j])
            if sim >= theta_g:
                graph.add_edge(ids[i], ids[j], sim)
    return graph


@dataclass
class Subquery:
    index: int  # 1-based; the global subquery has index M+1
    text: str
    embedding: np.ndarray
    is_global: bool = False


@dataclass
class CandidateSet:
    subquery_index: int
    page_ids: list[str]
    scores: list[float]

    def rank(self, page_id: str) -> Optional[int]:
        """1-based position of ``page_id``, or None if absent."""
        try:
            return self.page_ids.index(page_id) + 1
        except ValueError:
            return None

    def __contains__(self, page_id: str) -> bool:
        return page_id in self.page_ids


@dataclass
class Hyperedge:
    subquery_index: int
    members: frozenset[str]


@dataclass
class QueryAwareHypergraph:
    nodes: list[str]
    subqueries: list[Subquery]
    candidates: list[CandidateSet]
    hyperedges: list[Hyperedge]
    graph: PageGraph

    def __post_init__(self):
        self._memberships: dict[str, list[int]] = {n: [] for n in self.nodes}
        for pos, he in enumerate(self.hyperedges):
            for p in he.members:
                self._memberships.setdefault(p, []).append(pos)

    @property
    def num_arms(self) -> int:
        return len(self.hyperedges)

    def arms_of(self, page_id: str) -> list[int]:
        """Zero-based positions of the hyperedges containing ``page_id``."""
        return self._memberships.get(page_id, [])

    def degree(self, page_id: str) -> int:
        return len(self.arms_of(page_id))

    def hyperedge_neighbors(self, page_id: str) -> set[str]:
        out: set[str] = set()
        for pos in self.arms_of(page_id):
            out |= self.hyperedges[pos].members
        out.discard(page_id)
        return out

    def neighbors(self, page_id: str) -> set[str]:
        """Pages sharing a hyperedge with ``page_id`` or adjacent in the page graph."""
        return self.hyperedge_neighbors(page_id) | self.graph.neighbors(page_id)

    def to_json(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "hyperedges": [
                {
                    "subquery": sq.index,
                    "text": sq.text,
                    "is_global": sq.is_global,
                    "candidates": list(cs.page_ids),
                    "members": [p for p in cs.page_ids if p in he.members],
                }
                for sq, cs, he in zip(self.subqueries, self.candidates, self.hyperedges)
            ],
            "edges": self.graph.to_json()["edges"],
        }


def parse_subquery_reply(reply: str) -> list[str]:
    """Split a comma-separated phrase list, dropping blanks and case-insensitive duplicates."""
    out: list[str] = []
    seen: set[str] = set()
    for raw in (reply or "").split(","):
        phrase = raw.strip().strip("\"'").strip()
        if not phrase:
            continue
        key = phrase.casefold()
        if key in seen:
            continue
        seen.add(key)
        out.append(phrase)
    return out[:MAX_SUBQUERIES]


def decompose_query(question: str, gateway) -> list[str]:
    """Ask the chat model for the query's key phrases.

    Gateway errors propagate (they are retriable).  A blank reply, or one
    without any comma, falls back to the whole question as the only atom.
    """
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    reply = gateway.chat(DECOMPOSE, {}, user_text=question)
    atoms = parse_subquery_reply(reply)
    if not atoms or "," not in reply:
        return [question]
    return atoms


def build_subquery_set(question: str, atoms: Sequence[str], embedder) -> list[Subquery]:
    """Atomic subqueries 1..M plus the global subquery M+1 embedded from the full question."""
    if not atoms:
        raise ContractError("atoms must be non-empty")
    texts = list(atoms) + [question]
    embeddings = embedder.embed(texts)
    subs = [Subquery(j + 1, t, as_multivector(e)) for j, (t, e) in enumerate(zip(texts[:-1], embeddings))]
    subs.append(Subquery(len(texts), question, as_multivector(embeddings[-1]), is_global=True))
    return subs


def _rank_scores(scores: np.ndarray, ids: Sequence[str], theta_h: int) -> tuple[list[str], list[float]]:
    # stable descending sort: ties keep insertion order
    order = np.argsort(-scores, kind="stable")[:theta_h]
    return [ids[i] for i in order], [float(scores[i]) for i in order]


def rank_candidates(subquery: Subquery, index: EmbeddingIndex, theta_h: int) -> CandidateSet:
    """Top-``theta_h`` pages by raw late-interaction score for one subquery."""
    if theta_h < 1:
        raise ContractError(f"theta_h must be >= 1, got {theta_h}")
    scores = index.late_interaction_all(subquery.embedding)
    ids, vals = _rank_scores(scores, index.page_ids, theta_h)
    return CandidateSet(subquery.index, ids, vals)


def build_hyperedge(c_j: CandidateSet, c_b: CandidateSet) -> Hyperedge:
    """Keep pages of ``c_j`` that are outside ``c_b`` or rank at least as well under ``c_j``."""
    members = set()
    for pos, p in enumerate(c_j.page_ids, start=1):
        rank_b = c_b.rank(p)
        if rank_b is None or pos <= rank_b:
            members.add(p)
    return Hyperedge(c_j.subquery_index, frozenset(members))


def assemble_hypergraph(
    index: EmbeddingIndex,
    theta_g: float,
    subqueries: Sequence[Subquery],
    theta_h: int,
    page_graph: Optional[PageGraph] = None,
) -> QueryAwareHypergraph:
    """Build the query-aware hypergraph; pass ``page_graph`` to reuse a cached graph."""
    globals_ = [s for s in subqueries if s.is_global]
    if len(globals_) != 1:
        raise ContractError("exactly one global subquery is required")
    if page_graph is None:
        page_graph = build_page_graph(index, theta_g)
    candidates = [rank_candidates(s, index, theta_h) for s in subqueries]
    c_b = candidates[[s.is_global for s in subqueries].index(True)]
    hyperedges = [build_hyperedge(c, c_b) for c in candidates]
    return QueryAwareHypergraph(index.page_ids, list(subqueries), candidates, hyperedges, page_graph)
