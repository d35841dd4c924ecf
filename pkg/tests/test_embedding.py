import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mabdqa.embedding import (
    ContractError,
    EmbeddingIndex,
    IndexFormatError,
    IndexIOError,
    IndexTruncatedError,
    PageRecord,
    attach_manifest,
    dumps_index,
    export_similarity_map,
    late_interaction,
    load_index,
    load_manifest,
    loads_index,
    normalized_li,
    page_similarity,
    parse_manifest,
    save_index,
)

from conftest import random_index


def brute_li(q, p):
    """Double loop over token/patch pairs, float64, fixed order."""
    q = np.asarray(q, dtype=np.float32).tolist()
    p = np.asarray(p, dtype=np.float32).tolist()
    total = 0.0
    for qk in q:
        best = None
        for pl in p:
            s = 0.0
            for a, b in zip(qk, pl):
                s += a * b
            best = s if best is None or s > best else best
        total += best
    return total


def page(vectors, pid="p", doc="d"):
    return PageRecord(doc, pid, 1, np.asarray(vectors, dtype=np.float32))


# ---------------------------------------------------------------- late interaction


def test_li_examples():
    assert late_interaction([[1, 0]], [[0.5, 0], [0, 1]]) == 0.5
    assert late_interaction([[1, 0], [0, 1]], [[1, 0], [0, 1]]) == 2.0
    assert normalized_li([[1, 0], [0, 1]], [[1, 0], [0, 1]]) == 1.0
    assert normalized_li([[0, 0]], [[3, 4], [1, 1]]) == 0.0


def test_li_matches_brute_force_bitwise():
    rng = np.random.default_rng(7)
    for _ in range(300):
        d = int(rng.integers(1, 17))
        q = rng.standard_normal((int(rng.integers(1, 9)), d)).astype(np.float32)
        p = rng.standard_normal((int(rng.integers(1, 33)), d)).astype(np.float32)
        assert late_interaction(q, p) == brute_li(q, p)
        assert normalized_li(q, p) == brute_li(q, p) / q.shape[0]


def test_batched_li_equals_per_page():
    rng = np.random.default_rng(3)
    index = random_index(rng, 25, 8, max_vectors=10)
    q = rng.standard_normal((5, 8)).astype(np.float32)
    batched = index.late_interaction_all(q)
    for i, rec in enumerate(index):
        assert batched[i] == late_interaction(q, rec.embedding)


def test_li_dimension_mismatch():
    with pytest.raises(ContractError):
        late_interaction([[1, 0]], [[1, 0, 0]])
    with pytest.raises(ContractError):
        late_interaction(np.zeros((0, 2)), [[1, 0]])


finite = st.floats(-10, 10, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 4).flatmap(
        lambda d: st.tuples(
            arrays(np.float32, st.tuples(st.integers(1, 5), st.just(d)), elements=finite),
            arrays(np.float32, st.tuples(st.integers(1, 6), st.just(d)), elements=finite),
            arrays(np.float32, st.tuples(st.just(1), st.just(d)), elements=finite),
        )
    )
)
def test_appending_a_page_vector_never_lowers_li(qpe):
    q, p, extra = qpe
    assert late_interaction(q, np.vstack([p, extra])) >= late_interaction(q, p)


def test_scaling_the_query_scales_li():
    rng = np.random.default_rng(11)
    for _ in range(50):
        q = rng.standard_normal((3, 4))
        p = rng.standard_normal((5, 4))
        # powers of two keep the float32 cast and every product exact
        assert late_interaction(4 * q, p) == pytest.approx(4 * late_interaction(q, p), rel=1e-6)


# ---------------------------------------------------------------- similarity


def test_page_similarity_examples():
    assert page_similarity(page([[1, 0], [1, 0]]), page([[0, 2]])) == 0.0
    assert page_similarity(page([[1, 2], [3, 1]]), page([[1, 2], [3, 1]])) == pytest.approx(1.0)
    assert page_similarity(page([[1, 0]]), page([[0, 1]])) == 0.0
    assert page_similarity(page([[0, 0]]), page([[1, 1]])) == 0.0
    with pytest.raises(ContractError):
        page_similarity(page([[1, 0]]), page([[1, 0, 0]]))


def test_page_similarity_symmetric_and_bounded():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = page(rng.standard_normal((int(rng.integers(1, 5)), 6)))
        b = page(rng.standard_normal((int(rng.integers(1, 5)), 6)))
        s = page_similarity(a, b)
        assert s == page_similarity(b, a)
        assert -1.0 <= s <= 1.0


# ---------------------------------------------------------------- heatmap


def test_similarity_map_examples():
    assert export_similarity_map([[1, 0]], [[0.5, 0], [0, 1]]) == [0.5, 0.0]
    assert export_similarity_map([[1, 0], [0, 1]], [[0.3, 0.4]]) == pytest.approx([0.4])
    assert export_similarity_map([[0, 0]], [[1, 2], [3, 4], [5, 6]]) == [0.0, 0.0, 0.0]


def test_similarity_map_oracle():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((4, 5)).astype(np.float32)
    p = rng.standard_normal((7, 5)).astype(np.float32)
    expected = [max(brute_li([qk], [pl]) for qk in q) for pl in p]
    assert export_similarity_map(q, p) == expected


# ---------------------------------------------------------------- binary index


def test_empty_index_round_trip(tmp_path):
    index = EmbeddingIndex(128)
    save_index(index, tmp_path / "e.bin")
    assert load_index(tmp_path / "e.bin") == index


def test_index_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    index = random_index(rng, 3, 16)
    index.add(PageRecord("doc-é", "p-ü", 9, rng.standard_normal((2, 16)).astype(np.float32)))
    save_index(index, tmp_path / "a.bin")
    back = load_index(tmp_path / "a.bin")
    assert back == index
    assert dumps_index(back) == (tmp_path / "a.bin").read_bytes()
    assert dumps_index(index) == dumps_index(index)


def test_index_header_layout():
    index = EmbeddingIndex(2, [page([[1.5, -2.0]], pid="x", doc="y")])
    raw = dumps_index(index)
    assert raw[:4] == b"MABQ"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 1)
    assert raw[-8:] == struct.pack("<2f", 1.5, -2.0)


def test_index_errors(tmp_path):
    raw = dumps_index(random_index(np.random.default_rng(1), 2, 4))
    with pytest.raises(IndexFormatError):
        loads_index(b"XXXX" + raw[4:])
    with pytest.raises(IndexFormatError):
        loads_index(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(IndexTruncatedError):
        loads_index(raw[:-3])
    with pytest.raises(IndexFormatError):
        loads_index(raw + b"\0")
    with pytest.raises(IndexIOError):
        load_index(tmp_path / "missing.bin")


def test_index_rejects_duplicates_and_dim_mismatch():
    index = EmbeddingIndex(2, [page([[1, 0]], pid="a")])
    with pytest.raises(ContractError):
        index.add(page([[1, 0]], pid="a"))
    with pytest.raises(ContractError):
        index.add(page([[1, 0, 0]], pid="b"))


# ---------------------------------------------------------------- manifest


def test_manifest_attach(manifest_path):
    pages = load_manifest(manifest_path)
    assert [p.page_id for p in pages][:2] == ["report-p1", "report-p2"]
    index = EmbeddingIndex(2, [PageRecord("report", "report-p2", 2, np.ones((1, 2), np.float32))])
    attach_manifest(index, pages)
    assert index.get("report-p2").text.startswith("Revenue in 2023")


@pytest.mark.parametrize(
    "doc",
    [
        [],
        {"documents": {}},
        {"documents": [{"pages": []}]},
        {"documents": [{"doc_id": "a", "pages": [{"page_id": "x"}]}]},
        {"documents": [{"doc_id": "a", "pages": [{"page_id": "x", "page_number": 1}, {"page_id": "x", "page_number": 2}]}]},
    ],
)
def test_malformed_manifest(doc):
    with pytest.raises(ContractError):
        parse_manifest(doc)
