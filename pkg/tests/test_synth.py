import json

import numpy as np
import pytest

from mabdqa.bandit import RetrievalParams, run_retrieval
from mabdqa.embedding import ContractError, dumps_index
from mabdqa.hypergraph import assemble_hypergraph, build_subquery_set
from mabdqa.synth import (
    SyntheticCorpusSpec,
    compare_methods,
    distractor_outranks_evidence,
    generate_corpus,
    load_spec,
    oracle_judge,
    write_comparison,
)


def test_spec_validation(tmp_path):
    with pytest.raises(ContractError):
        SyntheticCorpusSpec(num_aspects=2, distractor_aspects=2).validate()
    with pytest.raises(ContractError):
        SyntheticCorpusSpec(num_pages=2, num_aspects=3).validate()
    with pytest.raises(ContractError):
        SyntheticCorpusSpec(judge_flip_prob=1.0).validate()
    path = tmp_path / "s.toml"
    path.write_text("num_pages = 40\nseed = 7\n")
    assert load_spec(path) == SyntheticCorpusSpec(num_pages=40, seed=7)
    path.write_text("pages = 40\n")
    with pytest.raises(ContractError):
        load_spec(path)


def test_single_page_is_argmax():
    spec = SyntheticCorpusSpec(num_pages=1, num_aspects=1, distractor_aspects=0, noise_sigma=0.0, evidence_pages=1, distractor_pages=0)
    corpus = generate_corpus(spec)
    assert corpus.index.page_ids == corpus.truth.evidence[corpus.queries[0].qid]


def test_same_seed_same_corpus():
    a, b = generate_corpus(SyntheticCorpusSpec(seed=3)), generate_corpus(SyntheticCorpusSpec(seed=3))
    assert dumps_index(a.index) == dumps_index(b.index)
    assert a.queries == b.queries and a.truth == b.truth
    assert dumps_index(a.index) != dumps_index(generate_corpus(SyntheticCorpusSpec(seed=4)).index)


def test_evidence_pages_carry_informative_aspects():
    corpus = generate_corpus(SyntheticCorpusSpec(seed=1))
    t = corpus.truth
    informative = {i for i, d in enumerate(t.is_distractor) if not d}
    for pid in t.evidence[corpus.queries[0].qid]:
        assert set(t.page_aspects[pid]) >= informative


def test_degradation_is_common_under_raw_li():
    rate = np.mean([distractor_outranks_evidence(generate_corpus(SyntheticCorpusSpec(seed=s))) for s in range(50)])
    assert rate >= 0.3


def test_oracle_judge_buckets_and_flip_rate():
    corpus = generate_corpus(SyntheticCorpusSpec(seed=0))
    t = corpus.truth
    qid = corpus.queries[0].qid
    ev = t.evidence[qid][0]
    distractor = next(p for p, a in t.page_aspects.items() if any(t.is_distractor[i] for i in a) and p not in t.evidence[qid])
    rng = np.random.default_rng(0)
    assert {oracle_judge(ev, t, 0.0, rng) for _ in range(100)} == {4, 5}
    assert {oracle_judge(distractor, t, 0.0, rng) for _ in range(100)} == {1, 2}
    flips = np.mean([oracle_judge(distractor, t, 0.1, rng) >= 4 for _ in range(10000)])
    assert abs(flips - 0.1) <= 0.01
    with pytest.raises(ContractError):
        oracle_judge("nope", t, 0.0, rng)


def test_perfect_oracle_dominance():
    for seed in range(10):
        corpus = generate_corpus(SyntheticCorpusSpec(seed=seed, judge_flip_prob=0.0))
        q = corpus.queries[0]
        ev = set(corpus.truth.evidence[q.qid])
        subs = build_subquery_set(q.question, q.atoms, corpus.embedder)
        hg = assemble_hypergraph(corpus.index, 0.8, subs, 10)
        rng = np.random.default_rng(seed)
        judge = lambda page, _p: oracle_judge(page.page_id, corpus.truth, 0.0, rng)
        res = run_retrieval(hg, corpus.index, q.question, subs, RetrievalParams(budget=20, output_k=100), judge)
        order = res.page_ids
        seen_ev = [order.index(p) for p in res.state.visited if p in ev]
        seen_other = [order.index(p) for p in res.state.visited if p not in ev]
        if seen_ev and seen_other:
            assert max(seen_ev) < min(seen_other)


def test_reduction_gives_zero_difference():
    params = RetrievalParams(alpha_mix=0.0, beta_mix=0.0, budget=0)
    report = compare_methods(SyntheticCorpusSpec(), trials=5, params=params)
    assert all(v == 0.0 for v in report.differences.values())
    assert all(t.judge_calls == 0 for t in report.trials)


def test_two_aspect_arm_separation():
    spec = SyntheticCorpusSpec(num_aspects=2, evidence_pages=10, distractor_pages=10)
    report = compare_methods(spec, trials=50, methods=("mab",))
    assert report.arm_means["distractor"] < 0.35
    assert report.arm_means["evidence"] > 0.65


def test_uninformative_judge_shows_no_effect():
    report = compare_methods(SyntheticCorpusSpec(judge_flip_prob=0.5), trials=50)
    assert report.sign_test["recall@5"]["p_value"] >= 0.05


def test_comparison_report_is_reproducible(tmp_path):
    paths = [write_comparison(compare_methods(SyntheticCorpusSpec(), trials=2), tmp_path / str(i)) for i in range(2)]
    for key in ("json", "csv"):
        assert paths[0][key].read_bytes() == paths[1][key].read_bytes()
    doc = json.loads(paths[0]["json"].read_text())
    assert set(doc["means"]) == {"mab", "pure_li"}
    with pytest.raises(ContractError):
        compare_methods(SyntheticCorpusSpec(), trials=0)
