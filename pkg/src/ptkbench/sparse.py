"""BM25 inverted index: build, persist, score and search."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import kernels
from .data import DataError, Document, RunEntry
from .text import Analyzer, DEFAULT_ANALYZER

INDEX_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 0.82
    b: float = 0.68

    def __post_init__(self):
        if self.k1 < 0:
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")


class Postings(NamedTuple):
    doc_indices: np.ndarray  # int32, ascending
    tfs: np.ndarray  # int32


class AnalyzerMismatch(ValueError):
    pass


@dataclass
class InvertedIndex:
    postings: dict[str, Postings]
    doc_lengths: np.ndarray  # float64 token counts
    doc_ids: list[str]
    analyzer: Analyzer = DEFAULT_ANALYZER
    params: Bm25Params = Bm25Params()

    def __post_init__(self):
        self.doc_count = len(self.doc_ids)
        self.avg_doc_length = float(self.doc_lengths.mean()) if self.doc_count else 0.0
        # position of each doc in doc_id order, used for tie-breaking
        order = sorted(range(self.doc_count), key=self.doc_ids.__getitem__)
        self.id_rank = np.empty(self.doc_count, dtype=np.int64)
        self.id_rank[order] = np.arange(self.doc_count)

    def df(self, term: str) -> int:
        p = self.postings.get(term)
        return 0 if p is None else len(p.doc_indices)

    def idf(self, term: str) -> float:
        df = self.df(term)
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def postings_for(self, term: str) -> list[tuple[int, int]]:
        p = self.postings.get(term)
        if p is None:
            return []
        return list(zip(p.doc_indices.tolist(), p.tfs.tolist()))

    def check_analyzer(self, analyzer: Analyzer) -> None:
        if analyzer.config_hash() != self.analyzer.config_hash():
            raise AnalyzerMismatch(
                f"query analyzer {analyzer.config()} does not match index analyzer {self.analyzer.config()}")

    # -------------------------------------------------------------- persistence

    def save(self, directory: str | Path) -> None:
        """Write the index as a manifest plus little-endian binary arrays.

        Output is a pure function of the index contents, so rebuilding from the
        same corpus and config gives byte-identical files.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        terms = sorted(self.postings)
        doc_chunks, tf_chunks = [], []
        offset = 0
        vocab_lines = []
        for term in terms:
            p = self.postings[term]
            gaps = np.diff(p.doc_indices, prepend=0).astype("<u4")
            doc_chunks.append(gaps)
            tf_chunks.append(p.tfs.astype("<u4"))
            vocab_lines.append(f"{term}\t{offset}\t{len(gaps)}\n")
            offset += len(gaps)
        empty = np.zeros(0, dtype="<u4")
        (np.concatenate(doc_chunks) if doc_chunks else empty).tofile(d / "postings.docs.bin")
        (np.concatenate(tf_chunks) if tf_chunks else empty).tofile(d / "postings.tfs.bin")
        self.doc_lengths.astype("<u4").tofile(d / "doclens.bin")
        (d / "vocab.tsv").write_text("".join(vocab_lines), encoding="utf-8")
        (d / "docids.txt").write_text("".join(f"{x}\n" for x in self.doc_ids), encoding="utf-8")
        manifest = {
            "format_version": INDEX_FORMAT_VERSION,
            "kind": "bm25",
            "analyzer": self.analyzer.config(),
            "analyzer_hash": self.analyzer.config_hash(),
            "params": {"k1": self.params.k1, "b": self.params.b},
            "doc_count": self.doc_count,
            "vocab_size": len(terms),
            "posting_count": offset,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "InvertedIndex":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("format_version") != INDEX_FORMAT_VERSION or manifest.get("kind") != "bm25":
            raise DataError(f"unsupported index format {manifest.get('format_version')!r}", path=d)
        analyzer = Analyzer.from_config(manifest["analyzer"])
        if analyzer.config_hash() != manifest["analyzer_hash"]:
            raise DataError("analyzer hash in manifest does not match its config", path=d)
        gaps = np.fromfile(d / "postings.docs.bin", dtype="<u4")
        tfs = np.fromfile(d / "postings.tfs.bin", dtype="<u4")
        postings = {}
        for line in (d / "vocab.tsv").read_text(encoding="utf-8").splitlines():
            term, off, n = line.split("\t")
            off, n = int(off), int(n)
            postings[term] = Postings(np.cumsum(gaps[off:off + n]).astype(np.int32),
                                      tfs[off:off + n].astype(np.int32))
        doc_ids = (d / "docids.txt").read_text(encoding="utf-8").splitlines()
        lengths = np.fromfile(d / "doclens.bin", dtype="<u4").astype(np.float64)
        if len(doc_ids) != manifest["doc_count"] or len(lengths) != len(doc_ids):
            raise DataError("doc count does not match manifest", path=d)
        params = Bm25Params(**manifest["params"])
        return cls(postings, lengths, doc_ids, analyzer, params)


def build_index(docs: Iterable[Document], params: Bm25Params = Bm25Params(),
                analyzer: Analyzer = DEFAULT_ANALYZER) -> InvertedIndex:
    lists: dict[str, tuple[list[int], list[int]]] = {}
    doc_ids: list[str] = []
    lengths: list[int] = []
    seen: set[str] = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise DataError(f"duplicate doc id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        idx = len(doc_ids)
        doc_ids.append(doc.doc_id)
        tokens = analyzer(doc.text)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            ds, ts = lists.setdefault(term, ([], []))
            ds.append(idx)
            ts.append(tf)
    if not doc_ids:
        raise DataError("cannot index an empty corpus")
    postings = {t: Postings(np.asarray(ds, dtype=np.int32), np.asarray(ts, dtype=np.int32))
                for t, (ds, ts) in lists.items()}
    return InvertedIndex(postings, np.asarray(lengths, dtype=np.float64), doc_ids, analyzer, params)


def score(query_terms: list[str], doc_index: int, index: InvertedIndex,
          params: Bm25Params | None = None) -> float:
    """BM25 score of one document for an analyzed query (bag semantics)."""
    params = params or index.params
    dl = index.doc_lengths[doc_index]
    total = 0.0
    for term in query_terms:
        p = index.postings.get(term)
        if p is None:
            continue
        pos = int(np.searchsorted(p.doc_indices, doc_index))
        if pos == len(p.doc_indices) or p.doc_indices[pos] != doc_index:
            continue
        tf = float(p.tfs[pos])
        denom = tf + params.k1 * (1.0 - params.b + params.b * dl / index.avg_doc_length)
        total += index.idf(term) * tf * (params.k1 + 1.0) / denom
    return total


def search_terms(query_terms: list[str], k: int, index: InvertedIndex,
                 params: Bm25Params | None = None) -> list[RunEntry]:
    if k < 1:
        raise ValueError("k must be >= 1")
    params = params or index.params
    scores = np.zeros(index.doc_count, dtype=np.float64)
    touched = np.zeros(index.doc_count, dtype=np.uint8)
    for term, qtf in Counter(query_terms).items():
        p = index.postings.get(term)
        if p is None:
            continue
        kernels.accumulate(scores, touched, p.doc_indices, p.tfs, index.doc_lengths,
                           index.idf(term) * qtf, params.k1, params.b, index.avg_doc_length)
    hits = np.flatnonzero(touched)
    if hits.size == 0:
        return []
    order = np.lexsort((index.id_rank[hits], -scores[hits]))[:k]
    return [RunEntry(index.doc_ids[d], r, float(scores[d])) for r, d in enumerate(hits[order].tolist(), start=1)]


def search(query_text: str, k: int, index: InvertedIndex, params: Bm25Params | None = None,
           analyzer: Analyzer | None = None) -> list[RunEntry]:
    """Top-k documents for free text; ties go to the smaller doc_id."""
    analyzer = analyzer or index.analyzer
    index.check_analyzer(analyzer)
    return search_terms(analyzer(query_text), k, index, params)


class Bm25Retriever:
    def __init__(self, index: InvertedIndex, params: Bm25Params | None = None):
        self.index = index
        self.params = params or index.params

    def search(self, text: str, k: int) -> list[RunEntry]:
        return search(text, k, self.index, self.params)
