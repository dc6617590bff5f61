"""Domain types plus loaders and writers for topics, qrels, corpora and runs."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

logger = logging.getLogger(__name__)

TOPICS_FORMAT = "ptkbench-topics"
TOPICS_VERSION = 1
MAX_GRADE = 4

QrelSet = dict[str, dict[str, int]]


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, *, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    placeholder: bool = False

    def __post_init__(self):
        if not self.doc_id:
            raise DataError("document id must be non-empty")
        if not self.text and not self.placeholder:
            raise DataError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class PtkbEntry:
    ptkb_id: str
    statement: str

    def __post_init__(self):
        if not self.statement.strip():
            raise DataError(f"PTKB entry {self.ptkb_id!r} has an empty statement")


@dataclass(frozen=True)
class Turn:
    turn_id: str
    utterance: str
    canonical_response: str = ""
    human_ptkb_ids: frozenset[str] = frozenset()
    assessed: bool = True


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    topic: str
    ptkb: tuple[PtkbEntry, ...]
    turns: tuple[Turn, ...]

    def ptkb_by_id(self) -> dict[str, PtkbEntry]:
        return {p.ptkb_id: p for p in self.ptkb}

    def turn_index(self, turn_id: str) -> int:
        for i, t in enumerate(self.turns):
            if t.turn_id == turn_id:
                return i
        raise KeyError(turn_id)

    def history(self, turn_id: str) -> tuple[Turn, ...]:
        """Turns preceding ``turn_id`` in conversational order."""
        return self.turns[: self.turn_index(turn_id)]


@dataclass(frozen=True)
class RunEntry:
    doc_id: str
    rank: int
    score: float


@dataclass(frozen=True)
class RunRanking:
    turn_id: str
    entries: tuple[RunEntry, ...]
    tag: str = "ptkb-bench"

    @property
    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]

    def validate(self) -> None:
        seen = set()
        prev = None
        for i, e in enumerate(self.entries, start=1):
            if e.rank != i:
                raise DataError(f"turn {self.turn_id}: rank {e.rank} at position {i}, ranks must run 1..n")
            if e.doc_id in seen:
                raise DataError(f"turn {self.turn_id}: duplicate doc {e.doc_id!r}")
            seen.add(e.doc_id)
            if prev is not None:
                if e.score > prev.score:
                    raise DataError(f"turn {self.turn_id}: score increases at rank {e.rank}")
                if e.score == prev.score and e.doc_id < prev.doc_id:
                    raise DataError(f"turn {self.turn_id}: tie at rank {e.rank} not broken by doc_id")
            prev = e


def make_ranking(turn_id: str, scored: Iterable[tuple[str, float]], tag: str = "ptkb-bench") -> RunRanking:
    """Build a ranking from (doc_id, score) pairs already in final order."""
    entries = tuple(RunEntry(doc_id, i, float(score)) for i, (doc_id, score) in enumerate(scored, start=1))
    return RunRanking(turn_id, entries, tag)


# ---------------------------------------------------------------- topics

def _require(obj: Mapping, key: str, where: str, kind=str):
    if key not in obj:
        raise DataError(f"missing field {where}.{key}")
    value = obj[key]
    if not isinstance(value, kind):
        raise DataError(f"field {where}.{key} must be {getattr(kind, '__name__', kind)}")
    return value


def conversations_from_json(doc: Mapping, *, path: str | Path | None = None) -> list[Conversation]:
    try:
        if doc.get("format") != TOPICS_FORMAT:
            raise DataError(f"format must be {TOPICS_FORMAT!r}")
        if doc.get("version") != TOPICS_VERSION:
            raise DataError(f"unsupported topics version {doc.get('version')!r}")
        raw_convs = _require(doc, "conversations", "$", list)
        conversations = []
        seen_turns: set[str] = set()
        for ci, rc in enumerate(raw_convs):
            where = f"conversations[{ci}]"
            conv_id = _require(rc, "conversation_id", where)
            ptkb = []
            ptkb_ids: set[str] = set()
            for pi, rp in enumerate(_require(rc, "ptkb", where, list)):
                pwhere = f"{where}.ptkb[{pi}]"
                pid = _require(rp, "ptkb_id", pwhere)
                if pid in ptkb_ids:
                    raise DataError(f"duplicate ptkb_id {pid!r} at {pwhere}")
                ptkb_ids.add(pid)
                ptkb.append(PtkbEntry(pid, _require(rp, "statement", pwhere)))
            turns = []
            for ti, rt in enumerate(_require(rc, "turns", where, list)):
                twhere = f"{where}.turns[{ti}]"
                tid = _require(rt, "turn_id", twhere)
                if tid in seen_turns:
                    raise DataError(f"duplicate turn_id {tid!r} at {twhere}")
                seen_turns.add(tid)
                human = rt.get("human_ptkb_ids", [])
                if not isinstance(human, list):
                    raise DataError(f"field {twhere}.human_ptkb_ids must be list")
                missing = [h for h in human if h not in ptkb_ids]
                if missing:
                    raise DataError(f"{twhere}: human_ptkb_ids {missing} do not resolve in conversation {conv_id!r}")
                turns.append(Turn(
                    turn_id=tid,
                    utterance=_require(rt, "utterance", twhere),
                    canonical_response=rt.get("response", "") or "",
                    human_ptkb_ids=frozenset(human),
                    assessed=bool(rt.get("assessed", True)),
                ))
            conversations.append(Conversation(conv_id, rc.get("topic", ""), tuple(ptkb), tuple(turns)))
        return conversations
    except DataError as exc:
        if path is not None and exc.path is None:
            raise DataError(str(exc), path=path) from None
        raise


def conversations_to_json(conversations: Iterable[Conversation]) -> dict:
    def order(c: Conversation, ids: frozenset[str]) -> list[str]:
        return [p.ptkb_id for p in c.ptkb if p.ptkb_id in ids]

    return {
        "format": TOPICS_FORMAT,
        "version": TOPICS_VERSION,
        "conversations": [
            {
                "conversation_id": c.conversation_id,
                "topic": c.topic,
                "ptkb": [{"ptkb_id": p.ptkb_id, "statement": p.statement} for p in c.ptkb],
                "turns": [
                    {
                        "turn_id": t.turn_id,
                        "utterance": t.utterance,
                        "response": t.canonical_response,
                        "human_ptkb_ids": order(c, t.human_ptkb_ids),
                        "assessed": t.assessed,
                    }
                    for t in c.turns
                ],
            }
            for c in conversations
        ],
    }


def load_topics(path: str | Path) -> list[Conversation]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON: {exc.msg} (column {exc.colno})", path=path, line=exc.lineno) from None
    return conversations_from_json(doc, path=path)


def write_topics(conversations: Iterable[Conversation], path: str | Path) -> None:
    Path(path).write_text(json.dumps(conversations_to_json(conversations), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def topic_counts(conversations: Iterable[Conversation]) -> dict[str, int]:
    conversations = list(conversations)
    turns = [t for c in conversations for t in c.turns]
    assessed = [t for t in turns if t.assessed]
    return {
        "topics": len({c.topic for c in conversations}),
        "conversations": len(conversations),
        "turns": len(turns),
        "assessed_turns": len(assessed),
        "turns_with_ptkb": sum(1 for t in assessed if t.human_ptkb_ids),
        "ptkb_entries": sum(len(c.ptkb) for c in conversations),
    }


def convert_ikat(records: list[dict], assessed_turn_ids: Iterable[str] | None = None) -> list[Conversation]:
    """Convert the official iKAT topic layout into canonical conversations.

    Conversation ids come from ``number``; PTKB keys become ``<conv>:<key>`` and
    turn ids ``<conv>-<turn_id>``. When ``assessed_turn_ids`` is given (typically
    the turn ids present in the qrels), only those turns are marked assessed.
    """
    assessed = set(assessed_turn_ids) if assessed_turn_ids is not None else None
    out = []
    for ri, rec in enumerate(records):
        where = f"[{ri}]"
        conv_id = str(_require(rec, "number", where, (str, int)))
        raw_ptkb = rec.get("ptkb", {})
        if isinstance(raw_ptkb, dict):
            items = sorted(raw_ptkb.items(), key=lambda kv: _natural_key(str(kv[0])))
        else:
            items = [(str(i), s) for i, s in enumerate(raw_ptkb, start=1)]
        ptkb = tuple(PtkbEntry(f"{conv_id}:{k}", v) for k, v in items)
        ptkb_ids = {p.ptkb_id for p in ptkb}
        turns = []
        for ti, rt in enumerate(rec.get("turns", rec.get("turn", []))):
            tid = f"{conv_id}-{_require(rt, 'turn_id', f'{where}.turns[{ti}]', (str, int))}"
            human = frozenset(f"{conv_id}:{p}" for p in rt.get("ptkb_provenance", []) or [])
            bad = human - ptkb_ids
            if bad:
                raise DataError(f"{where}.turns[{ti}]: ptkb_provenance {sorted(bad)} not in PTKB")
            turns.append(Turn(tid, rt.get("utterance", ""), rt.get("response", "") or "", human,
                              assessed is None or tid in assessed))
        out.append(Conversation(conv_id, rec.get("title", ""), ptkb, tuple(turns)))
    return out


def _natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


natural_key = _natural_key


# ---------------------------------------------------------------- qrels

def load_qrels(path: str | Path) -> QrelSet:
    qrels: QrelSet = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"expected 4 columns, got {len(parts)}", path=path, line=lineno)
            turn_id, _, doc_id, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError:
                raise DataError(f"grade {grade_s!r} is not an integer", path=path, line=lineno) from None
            if not 0 <= grade <= MAX_GRADE:
                raise DataError(f"grade {grade} outside [0, {MAX_GRADE}]", path=path, line=lineno)
            judged = qrels.setdefault(turn_id, {})
            if doc_id in judged:
                raise DataError(f"duplicate judgment for ({turn_id}, {doc_id})", path=path, line=lineno)
            judged[doc_id] = grade
    return qrels


def write_qrels(qrels: QrelSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for turn_id, judged in qrels.items():
            for doc_id, grade in judged.items():
                fh.write(f"{turn_id} 0 {doc_id} {grade}\n")


# ---------------------------------------------------------------- corpus

def load_corpus(path: str | Path, *, strict: bool = True, lenient: bool = False) -> Iterator[Document]:
    """Stream documents from a JSON-lines file with ``id`` and ``contents`` fields.

    ``lenient`` skips malformed records (with a warning) instead of raising.
    ``strict`` rejects duplicate ids; it keeps the set of seen ids in memory.
    """
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id = rec["id"]
                text = rec["contents"]
                if not isinstance(doc_id, str) or not isinstance(text, str) or not doc_id:
                    raise ValueError("fields id/contents must be non-empty strings")
            except (ValueError, KeyError, TypeError) as exc:
                if lenient:
                    logger.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                    continue
                raise DataError(f"malformed record: {exc}", path=path, line=lineno) from None
            if strict:
                if doc_id in seen:
                    raise DataError(f"duplicate doc id {doc_id!r}", path=path, line=lineno)
                seen.add(doc_id)
            yield Document(doc_id, text, placeholder=not text)


def write_corpus(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.doc_id, "contents": d.text}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- runs

def write_run(rankings: Iterable[RunRanking], path: str | Path) -> None:
    rankings = list(rankings)
    for r in rankings:
        r.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for r in rankings:
            for e in r.entries:
                fh.write(f"{r.turn_id} Q0 {e.doc_id} {e.rank} {e.score!r} {r.tag}\n")


def parse_run(path: str | Path) -> list[RunRanking]:
    grouped: dict[str, list[RunEntry]] = {}
    tags: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"expected 6 columns, got {len(parts)}", path=path, line=lineno)
            turn_id, _, doc_id, rank_s, score_s, tag = parts
            try:
                entry = RunEntry(doc_id, int(rank_s), float(score_s))
            except ValueError:
                raise DataError("rank/score not numeric", path=path, line=lineno) from None
            grouped.setdefault(turn_id, []).append(entry)
            tags.setdefault(turn_id, tag)
    return [RunRanking(t, tuple(sorted(es, key=lambda e: e.rank)), tags[t]) for t, es in grouped.items()]


@dataclass
class Dataset:
    """Canonical dataset directory contents (topics, qrels, optional ICL examples)."""

    root: Path
    conversations: list[Conversation]
    qrels: QrelSet
    icl_examples: list[dict] = field(default_factory=list)

    TOPICS = "topics.json"
    QRELS = "qrels.txt"
    CORPUS = "corpus.jsonl"
    ICL = "icl_examples.json"
    MANIFEST = "manifest.json"

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        conversations = load_topics(root / cls.TOPICS)
        qrels = load_qrels(root / cls.QRELS)
        icl = []
        if (root / cls.ICL).exists():
            icl = json.loads((root / cls.ICL).read_text(encoding="utf-8"))
        ds = cls(root, conversations, qrels, icl)
        overlap = {ex.get("turn_id") for ex in icl} & {t.turn_id for _, t in ds.turns()}
        if overlap:
            raise DataError(f"ICL examples overlap evaluated turns: {sorted(overlap)}", path=root / cls.ICL)
        return ds

    @property
    def corpus_path(self) -> Path:
        return self.root / self.CORPUS

    def turns(self, assessed_only: bool = False) -> Iterator[tuple[Conversation, Turn]]:
        for c in self.conversations:
            for t in c.turns:
                if t.assessed or not assessed_only:
                    yield c, t

    def evaluated_turns(self) -> list[tuple[Conversation, Turn]]:
        """Assessed turns with judgments; the population every metric averages over."""
        return [(c, t) for c, t in self.turns(assessed_only=True) if t.turn_id in self.qrels]

    def evaluation_qrels(self) -> QrelSet:
        return {t.turn_id: self.qrels[t.turn_id] for _, t in self.evaluated_turns()}
