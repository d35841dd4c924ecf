"""Multi-vector page/query embeddings, late-interaction scoring and the binary index.

A multi-vector embedding is a float32 matrix of shape ``(count, dim)``: one row
per query token or page patch.  Scores are accumulated in float64 in a fixed
order (feature axis first, then query tokens) so that results are reproducible
and identical between the single-page and batched code paths.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

MAGIC = b"MABQ"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class IndexFileError(Exception):
    """Base class for binary index read/write failures."""


class IndexIOError(IndexFileError, OSError):
    """The index file could not be read or written."""


class IndexFormatError(IndexFileError):
    """Wrong magic bytes, unsupported version or malformed content."""


class IndexTruncatedError(IndexFileError):
    """The payload ended before all declared records were read."""


def as_multivector(x, dim: Optional[int] = None) -> np.ndarray:
    """Validate ``x`` as a multi-vector embedding and return it as float32.

    A 1-D input is treated as a single-row embedding.
    """
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"embedding must be a non-empty (count, dim) matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("embedding contains non-finite values")
    if dim is not None and arr.shape[1] != dim:
        raise ContractError(f"embedding dim {arr.shape[1]} != index dim {dim}")
    return arr


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")


def _dot_matrix(query: np.ndarray, page: np.ndarray) -> np.ndarray:
    """All token-patch dot products as float64, summed over features in index order.

    BLAS matmul is avoided on purpose: its summation order (and FMA use) is
    platform dependent, which would break bitwise reproducibility.
    """
    q = query.astype(np.float64)
    p = page.astype(np.float64)
    acc = np.zeros((q.shape[0], p.shape[0]), dtype=np.float64)
    for d in range(q.shape[1]):
        acc += np.multiply.outer(q[:, d], p[:, d])
    return acc


def _ordered_sum(values: Iterable[float]) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total


def late_interaction(query, page) -> float:
    """Late-interaction (MaxSim) score: sum over query vectors of the best page-vector dot."""
    query = as_multivector(query)
    page = as_multivector(page)
    _check_dims(query, page)
    return _ordered_sum(_dot_matrix(query, page).max(axis=1))


def normalized_li(query, page) -> float:
    """Late-interaction score divided by the number of query vectors."""
    query = as_multivector(query)
    return late_interaction(query, page) / query.shape[0]


def export_similarity_map(query, page) -> list[float]:
    """Per page vector, the maximum dot product over all query vectors (heatmap values)."""
    query = as_multivector(query)
    page = as_multivector(page)
    _check_dims(query, page)
    return [float(v) for v in _dot_matrix(query, page).max(axis=0)]


def pooled_unit(embedding) -> np.ndarray:
    """Mean-pool the rows and L2-normalise; a zero pooled vector stays zero."""
    emb = as_multivector(embedding).astype(np.float64)
    pooled = emb.mean(axis=0)
    norm = float(np.sqrt(np.dot(pooled, pooled)))
    if norm == 0.0:
        return np.zeros_like(pooled)
    return pooled / norm


def _similarity_of_units(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


@dataclass
class PageRecord:
    doc_id: str
    page_id: str
    page_number: int
    embedding: np.ndarray
    image_path: Optional[str] = None
    text: Optional[str] = None

    def __post_init__(self):
        self.embedding = as_multivector(self.embedding)
        if int(self.page_number) < 1:
            raise ContractError(f"page_number must be >= 1, got {self.page_number}")
        self.page_number = int(self.page_number)

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PageRecord):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.page_id == other.page_id
            and self.page_number == other.page_number
            and self.image_path == other.image_path
            and self.text == other.text
            and self.embedding.shape == other.embedding.shape
            and self.embedding.tobytes() == other.embedding.tobytes()
        )


def page_similarity(a: PageRecord, b: PageRecord) -> float:
    """Cosine of the mean-pooled page embeddings, in [-1, 1]."""
    if a.dim != b.dim:
        raise ContractError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return _similarity_of_units(pooled_unit(a.embedding), pooled_unit(b.embedding))


@dataclass
class EmbeddingIndex:
    """Ordered collection of pages sharing one embedding dimension.

    Iteration order is insertion order; every ranking tie in the package is
    broken by this order.
    """

    dim: int
    pages: list[PageRecord] = field(default_factory=list)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ContractError(f"dim must be >= 1, got {self.dim}")
        self.dim = int(self.dim)
        pages, self.pages = list(self.pages), []
        self._pos: dict[str, int] = {}
        for p in pages:
            self.add(p)

    def add(self, page: PageRecord) -> None:
        if page.dim != self.dim:
            raise ContractError(f"page {page.page_id!r} has dim {page.dim}, index dim is {self.dim}")
        if page.page_id in self._pos:
            raise ContractError(f"duplicate page_id {page.page_id!r}")
        self._pos[page.page_id] = len(self.pages)
        self.pages.append(page)

    def __len__(self) -> int:
        return len(self.pages)

    def __iter__(self) -> Iterator[PageRecord]:
        return iter(self.pages)

    def __contains__(self, page_id: str) -> bool:
        return page_id in self._pos

    def __eq__(self, other):
        if not isinstance(other, EmbeddingIndex):
            return NotImplemented
        return self.dim == other.dim and self.pages == other.pages

    @property
    def page_ids(self) -> list[str]:
        return [p.page_id for p in self.pages]

    def position(self, page_id: str) -> int:
        return self._pos[page_id]

    def get(self, page_id: str) -> PageRecord:
        return self.pages[self._pos[page_id]]

    def subset(self, doc_id: str) -> "EmbeddingIndex":
        """Pages of one document, in index order."""
        return EmbeddingIndex(self.dim, [p for p in self.pages if p.doc_id == doc_id])

    def late_interaction_all(self, query) -> np.ndarray:
        """Late-interaction score of ``query`` against every page, in index order.

        Bitwise identical to calling :func:`late_interaction` page by page.
        """
        query = as_multivector(query, self.dim)
        if not self.pages:
            return np.zeros(0, dtype=np.float64)
        stacked = np.concatenate([p.embedding for p in self.pages], axis=0)
        starts = np.cumsum([0] + [p.embedding.shape[0] for p in self.pages[:-1]])
        per_token = np.maximum.reduceat(_dot_matrix(query, stacked), starts, axis=1)
        out = np.empty(len(self.pages), dtype=np.float64)
        for i in range(len(self.pages)):
            out[i] = _ordered_sum(per_token[:, i])
        return out

    def pooled_units(self) -> np.ndarray:
        if not self.pages:
            return np.zeros((0, self.dim))
        return np.stack([pooled_unit(p.embedding) for p in self.pages])


def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(_U32.pack(len(raw)))
    buf.write(raw)


def dumps_index(index: EmbeddingIndex) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(FORMAT_VERSION))
    buf.write(_U32.pack(index.dim))
    buf.write(_U32.pack(len(index.pages)))
    for p in index.pages:
        _write_str(buf, p.page_id)
        _write_str(buf, p.doc_id)
        buf.write(_U32.pack(p.page_number))
        buf.write(_U32.pack(p.embedding.shape[0]))
        buf.write(np.ascontiguousarray(p.embedding, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise IndexTruncatedError(f"payload truncated at byte {self.off} (needed {n} more bytes)")
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"invalid UTF-8 string at byte {self.off}") from exc


def loads_index(data: bytes) -> EmbeddingIndex:
    if len(data) < 4 or data[:4] != MAGIC:
        raise IndexFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index format version {version}")
    dim = r.u32()
    count = r.u32()
    if dim < 1:
        raise IndexFormatError("index dim must be >= 1")
    index = EmbeddingIndex(dim)
    for _ in range(count):
        page_id = r.string()
        doc_id = r.string()
        page_number = r.u32()
        n_vec = r.u32()
        vectors = np.frombuffer(r.take(4 * n_vec * dim), dtype="<f4").astype(np.float32).reshape(n_vec, dim)
        try:
            index.add(PageRecord(doc_id, page_id, page_number, vectors))
        except ContractError as exc:
            raise IndexFormatError(str(exc)) from exc
    if r.off != len(data):
        raise IndexFormatError(f"{len(data) - r.off} trailing bytes after last page")
    return index


def save_index(index: EmbeddingIndex, path) -> None:
    data = dumps_index(index)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IndexIOError(f"cannot write index {path}: {exc}") from exc


def load_index(path) -> EmbeddingIndex:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IndexIOError(f"cannot read index {path}: {exc}") from exc
    return loads_index(data)


@dataclass
class ManifestPage:
    doc_id: str
    page_id: str
    page_number: int
    image_path: Optional[str] = None
    text: Optional[str] = None


def load_manifest(path) -> list[ManifestPage]:
    """Read a corpus manifest ``{"documents": [{"doc_id", "pages": [...]}]}``.

    Pages may carry an optional ``text`` field used by text-only corpora.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return parse_manifest(doc)


def parse_manifest(doc) -> list[ManifestPage]:
    if not isinstance(doc, dict) or not isinstance(doc.get("documents"), list):
        raise ContractError("manifest must be an object with a 'documents' list")
    out: list[ManifestPage] = []
    seen: set[str] = set()
    for d in doc["documents"]:
        if not isinstance(d, dict) or "doc_id" not in d or not isinstance(d.get("pages"), list):
            raise ContractError("each document needs 'doc_id' and a 'pages' list")
        for p in d["pages"]:
            if not isinstance(p, dict) or "page_id" not in p or "page_number" not in p:
                raise ContractError(f"page entry in {d['doc_id']!r} needs 'page_id' and 'page_number'")
            pid = str(p["page_id"])
            if pid in seen:
                raise ContractError(f"duplicate page_id {pid!r} in manifest")
            seen.add(pid)
            out.append(
                ManifestPage(
                    doc_id=str(d["doc_id"]),
                    page_id=pid,
                    page_number=int(p["page_number"]),
                    image_path=p.get("image_path"),
                    text=p.get("text"),
                )
            )
    return out


def attach_manifest(index: EmbeddingIndex, pages: Sequence[ManifestPage]) -> None:
    """Restore image paths and texts, which the binary format does not store."""
    for mp in pages:
        if mp.page_id in index:
            rec = index.get(mp.page_id)
            rec.image_path = mp.image_path
            rec.text = mp.text
