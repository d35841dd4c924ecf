"""The only place that talks to external models.

``OpenAIGateway`` speaks the OpenAI-compatible chat-completions and embeddings
wire format over HTTP.  ``MockGateway`` implements the same surface with pure,
seeded functions so that the rest of the package can run offline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import httpx
import numpy as np

from .embedding import ContractError, as_multivector
from .prompts import (
    ANSWER,
    ANSWER_REFLECTION,
    DECOMPOSE,
    GRADE,
    HYPERGRAPH_SUMMARY,
    JUDGE,
    NOT_ANSWERABLE,
    QUESTION_REFLECTION,
    REFINE,
    get_template,
    render,
)

logger = logging.getLogger(__name__)

ENV_API_BASE = "MABDQA_API_BASE"
ENV_API_KEY = "MABDQA_API_KEY"
ENV_CHAT_MODEL = "MABDQA_CHAT_MODEL"
ENV_EMBED_MODEL = "MABDQA_EMBED_MODEL"


class GatewayError(RuntimeError):
    """A model call failed (network, auth, timeout, or retries exhausted)."""


class GatewayConfigError(GatewayError):
    """The gateway is misconfigured; raised before any network I/O."""


class ReplyParseError(ValueError):
    """A model reply did not contain the expected payload."""


@dataclass
class GatewayConfig:
    api_base: str = "https://api.openai.com/v1"
    api_key: str = field(default="", repr=False)
    chat_model: str = "gpt-4o-mini"
    embed_model: str = "text-embedding-3-small"
    temperature: float = 0.0
    request_timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    parallelism_limit: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "GatewayConfig":
        cfg = cls(
            api_base=os.environ.get(ENV_API_BASE, cls.api_base),
            api_key=os.environ.get(ENV_API_KEY, ""),
            chat_model=os.environ.get(ENV_CHAT_MODEL, cls.chat_model),
            embed_model=os.environ.get(ENV_EMBED_MODEL, cls.embed_model),
        )
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg


@dataclass
class PageContent:
    """What a model needs to see of a page: an image, a text block, or both."""

    page_id: str
    image_path: Optional[str] = None
    text: Optional[str] = None


EmbedInput = Union[str, PageContent]


def as_page_content(page) -> PageContent:
    if isinstance(page, PageContent):
        return page
    return PageContent(page.page_id, getattr(page, "image_path", None), getattr(page, "text", None))


# --------------------------------------------------------------------------
# reply parsing


def parse_rating(reply: str) -> int:
    """Last standalone integer in 1..5 of the reply."""
    hits = [int(m) for m in re.findall(r"\b\d+\b", reply or "") if 1 <= int(m) <= 5]
    if not hits:
        raise ReplyParseError(f"no rating 1-5 in reply {reply!r}")
    return hits[-1]


def parse_grade(reply: str) -> int:
    """``binary_correctness`` from the first JSON object in the reply."""
    m = re.search(r"\{.*?\}", reply or "", re.DOTALL)
    if not m:
        raise ReplyParseError(f"no JSON object in reply {reply!r}")
    try:
        obj = json.loads(m.group(0))
        value = int(obj["binary_correctness"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ReplyParseError(f"malformed grade reply {reply!r}") from exc
    if value not in (0, 1):
        raise ReplyParseError(f"binary_correctness must be 0 or 1, got {value}")
    return value


def judge_page(gateway, question: str, page, priori_bucket: str) -> int:
    reply = gateway.chat(JUDGE, {"priori": priori_bucket, "query": question}, pages=[page])
    return parse_rating(reply)


def grade_answer(gateway, question: str, predicted: str, ground_truth: str) -> int:
    reply = gateway.chat(GRADE, {"question": question, "answer": predicted, "gt": ground_truth})
    return parse_grade(reply)


# --------------------------------------------------------------------------
# HTTP gateway


def _image_data_url(path: str) -> str:
    mime = mimetypes.guess_type(path)[0] or "image/png"
    data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return f"data:{mime};base64,{data}"


def _page_parts(pages: Sequence) -> list[dict]:
    parts = []
    for raw in pages:
        p = as_page_content(raw)
        if p.image_path:
            parts.append({"type": "image_url", "image_url": {"url": _image_data_url(p.image_path)}})
        else:
            parts.append({"type": "text", "text": f"[page {p.page_id}]\n{p.text or ''}"})
    return parts


class OpenAIGateway:
    """Chat and embedding client for an OpenAI-compatible endpoint."""

    def __init__(self, config: GatewayConfig, transport: Optional[httpx.BaseTransport] = None, sleep=time.sleep):
        if not config.api_key:
            raise GatewayConfigError(f"missing API key: set {ENV_API_KEY}")
        if not config.api_base:
            raise GatewayConfigError(f"missing API base URL: set {ENV_API_BASE}")
        self.config = config
        self._client = httpx.Client(
            base_url=config.api_base.rstrip("/"),
            headers={"Authorization": f"Bearer {config.api_key}"},
            timeout=config.request_timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(max(1, config.parallelism_limit))
        self._sleep = sleep
        self._lock = threading.Lock()
        self.telemetry = {"requests": 0, "retries": 0, "failures": 0}

    def close(self) -> None:
        self._client.close()

    def _count(self, key: str) -> None:
        with self._lock:
            self.telemetry[key] += 1

    def _post(self, path: str, payload: dict) -> dict:
        attempts = max(1, self.config.max_retries)
        last: Optional[Exception] = None
        with self._slots:
            for attempt in range(attempts):
                if attempt:
                    self._count("retries")
                    self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
                self._count("requests")
                try:
                    resp = self._client.post(path, json=payload)
                except httpx.TransportError as exc:  # includes timeouts
                    last = exc
                    logger.warning("%s attempt %d/%d failed: %r", path, attempt + 1, attempts, exc)
                    continue
                if resp.status_code in (401, 403):
                    self._count("failures")
                    raise GatewayError(f"authentication failed ({resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    logger.warning("%s attempt %d/%d got HTTP %d", path, attempt + 1, attempts, resp.status_code)
                    continue
                if resp.status_code >= 400:
                    self._count("failures")
                    raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    return resp.json()
                except ValueError as exc:
                    raise GatewayError("response is not JSON") from exc
        self._count("failures")
        raise GatewayError(f"{path} failed after {attempts} attempts: {last}")

    def chat(self, template_id: str, fields: dict, pages: Sequence = (), user_text: Optional[str] = None) -> str:
        prompt = render(template_id, fields)
        messages: list[dict[str, Any]] = []
        if user_text is not None:
            messages.append({"role": "system", "content": prompt})
            text = user_text
        else:
            text = prompt
        if pages:
            messages.append({"role": "user", "content": _page_parts(pages) + [{"type": "text", "text": text}]})
        else:
            messages.append({"role": "user", "content": text})
        body = {"model": self.config.chat_model, "messages": messages, "temperature": self.config.temperature}
        data = self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected chat response shape: {str(data)[:200]}") from exc

    def embed(self, items: Sequence[EmbedInput]) -> list[np.ndarray]:
        if not items:
            raise ContractError("embed() needs a non-empty batch")
        inputs = []
        for it in items:
            if isinstance(it, str):
                inputs.append(it)
            else:
                p = as_page_content(it)
                inputs.append(_image_data_url(p.image_path) if p.image_path else (p.text or p.page_id))
        data = self._post("/embeddings", {"model": self.config.embed_model, "input": inputs})
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            out = [as_multivector(r["embedding"]) for r in rows]
        except (KeyError, TypeError, ContractError) as exc:
            raise GatewayError(f"unexpected embedding response: {exc}") from exc
        if len(out) != len(items):
            raise GatewayError(f"asked for {len(items)} embeddings, got {len(out)}")
        if len({e.shape[1] for e in out}) != 1:
            raise GatewayError("embedding dimension drift within one batch")
        return out


# --------------------------------------------------------------------------
# offline mock

_STOPWORDS = frozenset(
    """a an the of in on at to for from by with and or is are was were be been what which who whom
    whose how when where why does do did this that these those it its as than then there their
    about into over under between during according per vs""".split()
)


def _tokens(text: str) -> list[str]:
    return re.findall(r"\w+", (text or "").lower())


def _hash_int(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def key_phrases(question: str) -> list[str]:
    """Runs of non-stopword tokens, in order; used by the mock decomposer."""
    phrases, cur = [], []
    for tok in re.findall(r"[\w'&.-]+", question):
        if tok.lower().strip(".") in _STOPWORDS:
            if cur:
                phrases.append(" ".join(cur))
                cur = []
        else:
            cur.append(tok.strip(".?"))
    if cur:
        phrases.append(" ".join(cur))
    return [p for p in phrases if p]


class MockEmbedder:
    """Deterministic multi-vector embedder: one seeded unit vector per word.

    Shared words give identical vectors, so late-interaction scores behave
    like lexical matching.  Pages without text embed their image path.
    """

    def __init__(self, dim: int = 32, seed: int = 0, max_tokens: int = 64):
        self.dim = dim
        self.seed = seed
        self.max_tokens = max_tokens

    def token_vector(self, token: str) -> np.ndarray:
        rng = np.random.default_rng(_hash_int("tok", self.seed, token))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed_one(self, item: EmbedInput) -> np.ndarray:
        if isinstance(item, str):
            text = item
        else:
            p = as_page_content(item)
            text = p.text if p.text else (p.image_path or p.page_id)
        toks = _tokens(text)[: self.max_tokens] or [f"<empty:{text}>"]
        return np.stack([self.token_vector(t) for t in toks])

    def embed(self, items: Sequence[EmbedInput]) -> list[np.ndarray]:
        if not items:
            raise ContractError("embed() needs a non-empty batch")
        return [self.embed_one(it) for it in items]


@dataclass
class MockRule:
    template: str
    reply: Optional[str] = None
    match: dict = field(default_factory=dict)
    contains: dict = field(default_factory=dict)
    page: Optional[str] = None
    error: Optional[str] = None

    def hits(self, template_id: str, fields: dict, page_ids: Sequence[str], user_text: Optional[str]) -> bool:
        if get_template(self.template).id != template_id:
            return False
        values = dict(fields)
        if user_text is not None:
            values["user_text"] = user_text
        for k, v in self.match.items():
            if str(values.get(k)) != str(v):
                return False
        for k, v in self.contains.items():
            if str(v).lower() not in str(values.get(k, "")).lower():
                return False
        if self.page is not None and self.page not in page_ids:
            return False
        return True


def load_mock_script(path) -> list[MockRule]:
    """Mock script file: a JSON array of rule objects."""
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise GatewayConfigError("mock script must be a JSON array of rules")
    return [MockRule(**row) for row in rows]


class MockGateway:
    """Offline gateway whose replies depend only on (template, fields, pages, seed).

    Scripted rules are tried in order; the first hit wins.  A rule with
    ``error`` set raises :class:`GatewayError` instead of replying.  Without a
    matching rule each template has a deterministic default behaviour.
    """

    def __init__(self, rules: Sequence[MockRule] = (), seed: int = 0, dim: int = 32, embedder=None):
        self.rules = [r if isinstance(r, MockRule) else MockRule(**r) for r in rules]
        self.seed = seed
        self.embedder = embedder or MockEmbedder(dim=dim, seed=seed)
        self.calls: list[tuple[str, str]] = []

    def chat(self, template_id: str, fields: dict, pages: Sequence = (), user_text: Optional[str] = None) -> str:
        tid = get_template(template_id).id
        prompt = render(tid, fields)
        contents = [as_page_content(p) for p in pages]
        page_ids = [p.page_id for p in contents]
        self.calls.append((tid, prompt))
        for rule in self.rules:
            if rule.hits(tid, fields, page_ids, user_text):
                if rule.error is not None:
                    raise GatewayError(rule.error)
                return rule.reply or ""
        return self._default(tid, fields, contents, user_text)

    def embed(self, items: Sequence[EmbedInput]) -> list[np.ndarray]:
        return self.embedder.embed(items)

    def _default(self, tid: str, fields: dict, pages: list[PageContent], user_text: Optional[str]) -> str:
        if tid == DECOMPOSE:
            return ", ".join(key_phrases(user_text or ""))
        if tid == JUDGE:
            return f"Thinking... {self._default_rating(fields['query'], pages[0] if pages else None)}"
        if tid == GRADE:
            ok = _loose_equal(fields["answer"], fields["gt"]) or (
                _loose_equal(fields["gt"], NOT_ANSWERABLE) and _declines(fields["answer"])
            )
            return json.dumps({"binary_correctness": int(ok)})
        if tid == ANSWER:
            return self._default_answer(fields["question"], pages)
        if tid == ANSWER_REFLECTION:
            ans = str(fields["answer"]).strip()
            return "yes" if ans and ans != NOT_ANSWERABLE else "no"
        if tid == QUESTION_REFLECTION:
            return str(fields["question"])
        if tid == HYPERGRAPH_SUMMARY:
            return "Key concepts: " + ", ".join(key_phrases(str(fields["question"])))
        if tid == REFINE:
            return f"Improved answer: {fields['initial_answer']}"
        raise GatewayError(f"mock has no default for {tid!r}")

    def _default_rating(self, query: str, page: Optional[PageContent]) -> int:
        if page is None:
            return 1
        if page.text:
            q = {t for t in _tokens(query) if t not in _STOPWORDS}
            overlap = len(q & set(_tokens(page.text))) / max(1, len(q))
            return 1 + int(round(4 * overlap))
        return 1 + _hash_int("judge", self.seed, query, page.page_id) % 3

    def _default_answer(self, question: str, pages: list[PageContent]) -> str:
        q = {t for t in _tokens(question) if t not in _STOPWORDS}
        best, best_overlap = None, 0
        for p in pages:
            overlap = len(q & set(_tokens(p.text or "")))
            if overlap > best_overlap:
                best, best_overlap = p, overlap
        if best is None:
            return NOT_ANSWERABLE
        return re.split(r"(?<=[.!?])\s", best.text.strip(), maxsplit=1)[0]


def _declines(answer) -> bool:
    text = " ".join(_tokens(str(answer)))
    return any(k in text for k in ("not answerable", "cannot answer", "can not answer", "unanswerable"))


def _loose_equal(a, b) -> bool:
    norm = lambda s: " ".join(_tokens(str(s)))
    return norm(a) == norm(b)
