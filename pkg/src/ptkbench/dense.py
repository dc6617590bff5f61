"""Exact cosine-similarity search over externally supplied passage embeddings."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .data import DataError, RunEntry
from .text import split_words

logger = logging.getLogger(__name__)

MAGIC = b"PTKV"
HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count
VECTOR_FORMAT_VERSION = 1


class EmbeddingError(RuntimeError):
    pass


class ZeroQueryError(ValueError):
    pass


@dataclass
class EmbeddingStore:
    vectors: np.ndarray  # (doc_count, dim) float32
    doc_ids: list[str]
    normalized: bool

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise DataError("embedding matrix must be 2-dimensional")
        if len(self.doc_ids) != self.vectors.shape[0]:
            raise DataError(f"{len(self.doc_ids)} ids for {self.vectors.shape[0]} vectors")
        bad = ~np.isfinite(self.vectors).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite embedding rows: {np.flatnonzero(bad)[:10].tolist()}")
        order = sorted(range(len(self.doc_ids)), key=self.doc_ids.__getitem__)
        self.id_rank = np.empty(len(self.doc_ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.doc_ids))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def doc_count(self) -> int:
        return self.vectors.shape[0]


def write_vectors(vectors: np.ndarray, path: str | Path) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VECTOR_FORMAT_VERSION, vectors.shape[1], vectors.shape[0]))
        fh.write(vectors.tobytes())


def read_vectors(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) != HEADER.size:
            raise DataError("truncated vector header", path=path)
        magic, version, dim, count = HEADER.unpack(head)
        if magic != MAGIC or version != VECTOR_FORMAT_VERSION:
            raise DataError("not a vector file (bad magic/version)", path=path)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != dim * count:
        raise DataError(f"header says {count}x{dim} but file holds {data.size} values", path=path)
    return data.reshape(count, dim).astype(np.float32)


def load_embeddings(vector_path: str | Path, id_path: str | Path, normalize: bool = True) -> EmbeddingStore:
    vectors = read_vectors(vector_path)
    doc_ids = Path(id_path).read_text(encoding="utf-8").splitlines()
    if len(doc_ids) != vectors.shape[0]:
        raise DataError(f"{len(doc_ids)} ids but {vectors.shape[0]} vectors", path=id_path)
    if not np.isfinite(vectors).all():
        raise DataError("vector file contains NaN/Inf", path=vector_path)
    if normalize:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise DataError(f"cannot normalize zero rows {zero[:10].tolist()}", path=vector_path)
        vectors = (vectors / norms[:, None]).astype(np.float32)
    return EmbeddingStore(vectors, doc_ids, normalize)


def search(query_vec: np.ndarray, k: int, store: EmbeddingStore) -> list[RunEntry]:
    """Exact top-k by cosine similarity; ties go to the smaller doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (store.dim,):
        raise EmbeddingError(f"query has shape {q.shape}, store dim is {store.dim}")
    qn = np.linalg.norm(q)
    if qn == 0 or not np.isfinite(qn):
        raise ZeroQueryError("query vector has zero (or non-finite) norm")
    sims = store.vectors @ (q / qn)
    if not store.normalized:
        norms = np.linalg.norm(store.vectors.astype(np.float64), axis=1)
        sims = np.divide(sims, norms, out=np.zeros_like(sims), where=norms > 0)
    order = np.lexsort((store.id_rank, -sims))[:k]
    return [RunEntry(store.doc_ids[d], r, float(sims[d])) for r, d in enumerate(order.tolist(), start=1)]


# ---------------------------------------------------------------- query embedders

class QueryEmbedder:
    kind = "abstract"

    def __init__(self, dim: int):
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def _check(self, vecs: np.ndarray) -> np.ndarray:
        if vecs.ndim != 2 or vecs.shape[1] != self.dim:
            raise EmbeddingError(f"embedder returned shape {vecs.shape}, expected (*, {self.dim})")
        if not np.isfinite(vecs).all():
            raise EmbeddingError("embedder returned non-finite values")
        return vecs


class HashEmbedder(QueryEmbedder):
    """Deterministic bag-of-words projection for offline tests.

    Each lowercase alphanumeric token adds +1 or -1 to one coordinate; both the
    coordinate (first 8 digest bytes mod ``dim``) and the sign (next byte's low
    bit) come from the token's SHA-256. Empty text maps to the zero vector.
    """

    kind = "test_hash"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for tok in split_words(text):
                h = hashlib.sha256(tok.encode("utf-8")).digest()
                slot = int.from_bytes(h[:8], "little") % self.dim
                out[row, slot] += 1.0 if h[8] & 1 else -1.0
        return self._check(out)


class FileLookupEmbedder(QueryEmbedder):
    """Vectors precomputed offline, keyed by exact query text (JSON lines of text/embedding)."""

    kind = "file_lookup"

    def __init__(self, path: str | Path):
        table = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    table[rec["text"]] = np.asarray(rec["embedding"], dtype=np.float64)
        if not table:
            raise DataError("empty embedding lookup file", path=path)
        super().__init__(len(next(iter(table.values()))))
        self.table = table

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        try:
            return self._check(np.stack([self.table[t] for t in texts]))
        except KeyError as exc:
            raise EmbeddingError(f"no stored embedding for query {exc.args[0]!r}") from None


class HttpEmbedder(QueryEmbedder):
    """OpenAI-compatible embedding endpoint (``{"input": [...]}`` -> ``{"data": [{"embedding": ...}]}``)."""

    kind = "http_endpoint"

    def __init__(self, dim: int, base_url: str, path: str = "/v1/embeddings", model: str | None = None,
                 api_key_env: str | None = None, max_retries: int = 4, backoff: float = 0.5,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        super().__init__(dim)
        self.url = base_url.rstrip("/") + path
        self.model = model
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=60.0)
        self.sleep = sleep

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        payload: dict = {"input": list(texts)}
        if self.model:
            payload["model"] = self.model
        headers = {}
        if self.api_key_env:
            headers["Authorization"] = f"Bearer {os.environ.get(self.api_key_env, '')}"
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self.client.post(self.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code == 200:
                    try:
                        data = resp.json()["data"]
                        vecs = np.asarray([d["embedding"] for d in data], dtype=np.float64)
                    except (ValueError, KeyError, TypeError) as exc:
                        raise EmbeddingError(f"malformed embedding response: {exc}") from None
                    if len(vecs) != len(texts):
                        raise EmbeddingError(f"asked for {len(texts)} embeddings, got {len(vecs)}")
                    return self._check(vecs)
                if resp.status_code != 429 and resp.status_code < 500:
                    raise EmbeddingError(f"embedding endpoint returned HTTP {resp.status_code}")
                last = EmbeddingError(f"HTTP {resp.status_code}")
            if attempt < self.max_retries:
                self.sleep(self.backoff * 2 ** attempt)
        raise EmbeddingError(f"embedding endpoint failed after {self.max_retries + 1} attempts: {last}")


def embed_query(text: str, embedder: QueryEmbedder) -> np.ndarray:
    vec = embedder.embed([text])[0]
    if not vec.any():
        logger.warning("degenerate (all-zero) query embedding for %r", text)
    return vec


class DenseRetriever:
    def __init__(self, store: EmbeddingStore, embedder: QueryEmbedder):
        if embedder.dim != store.dim:
            raise EmbeddingError(f"embedder dim {embedder.dim} != store dim {store.dim}")
        self.store = store
        self.embedder = embedder

    def search(self, text: str, k: int) -> list[RunEntry]:
        return search(embed_query(text, self.embedder), k, self.store)
