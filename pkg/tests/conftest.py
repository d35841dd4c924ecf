import json

import numpy as np
import pytest

from mabdqa.embedding import EmbeddingIndex, PageRecord

REPORT_PAGES = [
    ("report-p1", "Annual report 2023 overview. Revenue grew strongly in Europe."),
    ("report-p2", "Revenue in 2023 was 12 million dollars. Europe contributed most revenue."),
    ("report-p3", "Employee headcount rose to 340 staff across three offices."),
    ("report-p4", "The board met four times. Dividends were unchanged."),
]


def random_index(rng, n_pages, dim, max_vectors=6, doc_id="d"):
    index = EmbeddingIndex(dim)
    for i in range(n_pages):
        n = int(rng.integers(1, max_vectors + 1))
        index.add(PageRecord(doc_id, f"p{i}", i + 1, rng.standard_normal((n, dim)).astype(np.float32)))
    return index


@pytest.fixture
def manifest_path(tmp_path):
    doc = {
        "documents": [
            {
                "doc_id": "report",
                "pages": [{"page_id": pid, "page_number": i, "text": t} for i, (pid, t) in enumerate(REPORT_PAGES, 1)],
            }
        ]
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path
