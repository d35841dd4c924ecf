"""Thompson-sampling bandit retrieval over the query-aware hypergraph.

Every subquery is an arm with a Beta(alpha, beta) posterior over how useful its
pages are.  Each iteration draws one sample per arm, lets the winning arm steer
which page the relevance judge inspects next, and feeds the judge's reward back
into the arms whose hyperedges contain that page.  Pages are finally ranked by
a composite of late-interaction score, judge reward and hypergraph structure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .embedding import ContractError, EmbeddingIndex, PageRecord
from .hypergraph import QueryAwareHypergraph, Subquery

logger = logging.getLogger(__name__)

NEUTRAL_PRIOR = 0.5


@dataclass
class ArmState:
    alpha: float = 1.0
    beta: float = 1.0

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    def update(self, reward: float) -> None:
        self.alpha += reward
        self.beta += 1.0 - reward


@dataclass
class BanditState:
    arms: list[ArmState]
    rng: np.random.Generator

    @classmethod
    def create(cls, num_arms: int, seed: int) -> "BanditState":
        if num_arms < 1:
            raise ContractError("a bandit needs at least one arm")
        return cls([ArmState() for _ in range(num_arms)], np.random.default_rng(seed))

    def snapshot(self) -> list[list[float]]:
        return [[a.alpha, a.beta] for a in self.arms]


@dataclass
class RetrievalParams:
    alpha_mix: float = 0.8
    beta_mix: float = 0.1
    lambda_mix: float = 0.75
    budget: int = 20
    output_k: int = 10
    seed: int = 42
    # "global": LI of the full question (reduces exactly to the pure-LI baseline);
    # "max": max over all subqueries of their raw LI.
    li_mode: str = "global"

    def __post_init__(self):
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ContractError("alpha_mix must lie in [0, 1]")
        if self.beta_mix < 0.0:
            raise ContractError("beta_mix must be >= 0")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ContractError("lambda_mix must lie in [0, 1]")
        if self.budget < 0 or self.output_k < 1:
            raise ContractError("budget must be >= 0 and output_k >= 1")
        if self.li_mode not in ("global", "max"):
            raise ContractError(f"unknown li_mode {self.li_mode!r}")


def map_rating_to_reward(rating: int) -> float:
    """Linear map of a 1..5 relevance rating onto [0, 1]; out-of-range ratings are clamped."""
    r = int(rating)
    if not 1 <= r <= 5:
        logger.warning("judge rating %r outside 1..5, clamping", rating)
        r = min(5, max(1, r))
    return (r - 1) / 4.0


def draw_samples(bandit: BanditState) -> list[float]:
    """One Beta variate per arm, consumed from the rng in arm order."""
    return [float(bandit.rng.beta(a.alpha, a.beta)) for a in bandit.arms]


def sample_arms(bandit: BanditState) -> int:
    """Thompson sampling: 1-based index of the arm with the largest draw (lowest index on ties)."""
    draws = draw_samples(bandit)
    return int(np.argmax(draws)) + 1


def arm_mean(arm: ArmState) -> float:
    return arm.mean


def confidence_score(page_id: str, hypergraph: QueryAwareHypergraph, bandit: BanditState) -> float:
    """Average posterior mean of the arms whose hyperedges contain the page (0.5 if none)."""
    arms = hypergraph.arms_of(page_id)
    if not arms:
        return NEUTRAL_PRIOR
    return float(np.mean([bandit.arms[j].mean for j in arms]))


def composite_score(
    li_norm: float,
    vlm_reward: Optional[float],
    degree_norm: float,
    s_cb: float,
    params: RetrievalParams,
) -> float:
    s_eff = NEUTRAL_PRIOR if vlm_reward is None else vlm_reward
    a, b, lam = params.alpha_mix, params.beta_mix, params.lambda_mix
    return (1 - a) * li_norm + a * s_eff + b * ((1 - lam) * degree_norm + lam * s_cb)


def update_arms(page_id: str, reward: float, hypergraph: QueryAwareHypergraph, bandit: BanditState) -> list[int]:
    """Credit ``reward`` to every arm whose hyperedge holds the page; returns their positions."""
    if not 0.0 <= reward <= 1.0:
        raise ContractError(f"reward must lie in [0, 1], got {reward}")
    arms = hypergraph.arms_of(page_id)
    for j in arms:
        bandit.arms[j].update(reward)
    return arms


def normalize_scores(raw: np.ndarray) -> np.ndarray:
    """Divide by the best score so the top page gets 1.

    Left unscaled when no score is positive; dividing by a positive constant
    keeps the order, which the pure-LI reduction relies on.
    """
    if raw.size == 0:
        return raw.astype(np.float64)
    top = float(np.max(raw))
    return raw / top if top > 0 else raw.astype(np.float64)


def li_norm_scores(index: EmbeddingIndex, subqueries: Sequence[Subquery], mode: str = "global") -> np.ndarray:
    if mode == "global":
        q = next(s for s in subqueries if s.is_global)
        raw = index.late_interaction_all(q.embedding)
    else:
        raw = np.max(np.stack([index.late_interaction_all(s.embedding) for s in subqueries]), axis=0)
    return normalize_scores(raw)


def rank_by(scores: np.ndarray, ids: Sequence[str], k: Optional[int] = None) -> list[tuple[str, float]]:
    order = np.argsort(-np.asarray(scores), kind="stable")
    if k is not None:
        order = order[:k]
    return [(ids[i], float(scores[i])) for i in order]


def pure_li_ranking(index: EmbeddingIndex, question_embedding, k: int = 10) -> list[tuple[str, float]]:
    """Baseline: pages sorted by normalised late-interaction with the full question."""
    return rank_by(normalize_scores(index.late_interaction_all(question_embedding)), index.page_ids, k)


def priori_bucket(li_norm: float) -> str:
    """Verbal prior handed to the judge prompt."""
    if li_norm < 1 / 3:
        return "slightly"
    if li_norm < 2 / 3:
        return "moderately"
    return "very"


@dataclass
class RetrievalState:
    visited: set[str] = field(default_factory=set)
    vlm_reward: dict[str, float] = field(default_factory=dict)
    composite: dict[str, float] = field(default_factory=dict)
    current_page: Optional[str] = None
    evals_used: int = 0
    trace: list[dict] = field(default_factory=list)


@dataclass
class RetrievalResult:
    ranking: list[tuple[str, float]]
    state: RetrievalState
    arms: list[list[float]]
    li_norm: dict[str, float]

    @property
    def page_ids(self) -> list[str]:
        return [p for p, _ in self.ranking]

    @property
    def judge_calls(self) -> int:
        return self.state.evals_used


Judge = Callable[[PageRecord, str], int]


class _Scorer:
    """Vectorised composite scores for every page of the hypergraph."""

    def __init__(self, hg: QueryAwareHypergraph, li: np.ndarray, params: RetrievalParams):
        self.hg = hg
        self.ids = hg.nodes
        self.li = li
        self.params = params
        deg = np.array([hg.degree(p) for p in self.ids], dtype=np.float64)
        self.degree_norm = deg / max(1.0, float(deg.max(initial=0.0)))
        self.vlm = np.full(len(self.ids), np.nan)
        self.member = np.zeros((hg.num_arms, len(self.ids)), dtype=bool)
        for i, p in enumerate(self.ids):
            for j in hg.arms_of(p):
                self.member[j, i] = True
        self.arm_count = self.member.sum(axis=0)

    def s_cb(self, bandit: BanditState) -> np.ndarray:
        means = np.array([a.mean for a in bandit.arms])
        out = np.full(len(self.ids), NEUTRAL_PRIOR)
        linked = self.arm_count > 0
        if linked.any():
            sums = np.array(
                [float(np.sum(means[self.member[:, i]])) for i in np.flatnonzero(linked)]
            )
            out[linked] = sums / self.arm_count[linked]
        return out

    def scores(self, bandit: BanditState) -> np.ndarray:
        a, b, lam = self.params.alpha_mix, self.params.beta_mix, self.params.lambda_mix
        s_eff = np.where(np.isnan(self.vlm), NEUTRAL_PRIOR, self.vlm)
        return (1 - a) * self.li + a * s_eff + b * ((1 - lam) * self.degree_norm + lam * self.s_cb(bandit))


def _select_pool(
    hg: QueryAwareHypergraph, state: RetrievalState, winner_pos: int, all_ids: Sequence[str]
) -> list[str]:
    if state.current_page is not None:
        pool = hg.neighbors(state.current_page) - state.visited
    else:
        pool = {p for p in all_ids if p not in state.visited}
    guided = pool & hg.hyperedges[winner_pos].members
    return sorted(guided or pool, key=hg.nodes.index)


def run_retrieval(
    hypergraph: QueryAwareHypergraph,
    index: EmbeddingIndex,
    question: str,
    subqueries: Sequence[Subquery],
    params: RetrievalParams,
    judge: Judge,
) -> RetrievalResult:
    """Bandit-guided retrieval with at most ``params.budget`` judge evaluations.

    ``judge(page, priori)`` returns a 1..5 rating; failures count as rating 1.
    """
    if list(hypergraph.nodes) != index.page_ids:
        raise ContractError("hypergraph was not built over this index")
    ids = hypergraph.nodes
    pos = {p: i for i, p in enumerate(ids)}
    li = li_norm_scores(index, subqueries, params.li_mode)
    bandit = BanditState.create(hypergraph.num_arms, params.seed)
    scorer = _Scorer(hypergraph, li, params)
    state = RetrievalState()
    scores = scorer.scores(bandit)

    for t in range(1, params.budget + 1):
        draws = draw_samples(bandit)
        winner_pos = int(np.argmax(draws))
        pool = _select_pool(hypergraph, state, winner_pos, ids)
        if not pool and state.current_page is not None:
            state.current_page = None
            pool = _select_pool(hypergraph, state, winner_pos, ids)
        record = {"iter": t, "draws": draws, "winner": winner_pos + 1}
        if not pool:
            record.update(page=None, rating=None, arms=bandit.snapshot())
            state.trace.append(record)
            break
        chosen = max(pool, key=lambda p: (scores[pos[p]], -pos[p]))
        page = index.get(chosen)
        try:
            rating = int(judge(page, priori_bucket(float(li[pos[chosen]]))))
        except Exception as exc:  # degrade, never abort the run
            logger.warning("judge failed on page %s (%r); using rating 1", chosen, exc)
            rating = 1
        reward = map_rating_to_reward(rating)
        state.evals_used += 1
        state.visited.add(chosen)
        state.vlm_reward[chosen] = reward
        state.current_page = chosen
        scorer.vlm[pos[chosen]] = reward
        update_arms(chosen, reward, hypergraph, bandit)
        # Only the judged page and pages sharing an arm with it change; recomputing
        # everything yields the same numbers for the rest.
        scores = scorer.scores(bandit)
        record.update(page=chosen, rating=rating, arms=bandit.snapshot())
        state.trace.append(record)

    state.composite = {p: float(scores[i]) for i, p in enumerate(ids)}
    return RetrievalResult(
        ranking=rank_by(scores, ids, params.output_k),
        state=state,
        arms=bandit.snapshot(),
        li_norm={p: float(li[i]) for i, p in enumerate(ids)},
    )


def write_trace(trace: Sequence[dict], path) -> None:
    """One JSON object per iteration, newline-delimited."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
