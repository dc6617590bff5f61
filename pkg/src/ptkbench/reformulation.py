"""PTKB selection strategies and LLM query rewriting."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .data import Conversation, PtkbEntry, Turn
from .llm import BackendError, Gateway, GenerationParams

logger = logging.getLogger(__name__)

KINDS = ("none", "use_all", "human", "str", "sar", "oracle")
SHOT_CHOICES = (0, 1, 3, 5)
MAX_REWRITES = 5
TEMPLATE_NAMES = ("rewrite", "select", "sar", "example")
PLACEHOLDERS = {"history", "utterance", "ptkb_items", "examples", "instruction", "number", "answer"}


class ReformulationError(RuntimeError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class Strategy:
    kind: str
    shots: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.shots not in SHOT_CHOICES:
            raise ValueError(f"shots must be one of {SHOT_CHOICES}")
        if self.shots and self.kind not in ("str", "sar"):
            raise ValueError(f"strategy {self.kind!r} takes no in-context examples")

    @property
    def label(self) -> str:
        return f"{self.kind}-{self.shots}shot" if self.kind in ("str", "sar") else self.kind


@dataclass
class RewriteBundle:
    turn_id: str
    rewrites: tuple[str, ...]
    response: str
    selected_ptkb_ids: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= len(self.rewrites) <= MAX_REWRITES:
            raise ValueError(f"bundle for {self.turn_id} has {len(self.rewrites)} rewrites")

    def to_json(self) -> dict:
        return {
            "turn_id": self.turn_id,
            "rewrites": list(self.rewrites),
            "response": self.response,
            "selected_ptkb_ids": list(self.selected_ptkb_ids),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "RewriteBundle":
        return cls(rec["turn_id"], tuple(rec["rewrites"]), rec["response"],
                   tuple(rec.get("selected_ptkb_ids", ())), rec.get("provenance", {}))


class PromptTemplates:
    """Prompt texts loaded from ``*.tmpl`` files plus ``instructions.json``.

    Placeholders use ``str.format`` syntax; literal braces must be doubled.
    """

    def __init__(self, texts: dict[str, str], instructions: dict[str, str]):
        for name in TEMPLATE_NAMES:
            if name not in texts:
                raise ValueError(f"missing template {name}.tmpl")
        for name, text in texts.items():
            unknown = {f for _, f, _, _ in string.Formatter().parse(text) if f} - PLACEHOLDERS
            if unknown:
                raise ValueError(f"template {name}: unknown placeholders {sorted(unknown)}")
        self.texts = texts
        self.instructions = instructions

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptTemplates":
        root = Path(directory) if directory else resources.files("ptkbench") / "prompts"
        texts = {name: (root / f"{name}.tmpl").read_text(encoding="utf-8") for name in TEMPLATE_NAMES}
        instructions = json.loads((root / "instructions.json").read_text(encoding="utf-8"))
        return cls(texts, instructions)

    @property
    def digest(self) -> str:
        blob = json.dumps([self.texts, self.instructions], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def render(self, name: str, **fields: str) -> str:
        text = self.texts[name]
        needed = {f for _, f, _, _ in string.Formatter().parse(text) if f}
        missing = needed - fields.keys()
        if missing:
            raise KeyError(f"template {name}: unresolved placeholders {sorted(missing)}")
        return text.format(**{k: fields[k] for k in needed})


# ---------------------------------------------------------------- rendering helpers

def format_history(history: Sequence[Turn], include_responses: bool = True) -> str:
    lines = []
    for t in history:
        lines.append(f"User: {t.utterance}")
        if include_responses and t.canonical_response:
            lines.append(f"Assistant: {t.canonical_response}")
    return "\n".join(lines) if lines else "(none)"


def format_ptkb(statements: Sequence[str]) -> str:
    if not statements:
        return "(none)"
    return "\n".join(f"{i}. {s}" for i, s in enumerate(statements, start=1))


def _example_history(example: dict) -> str:
    lines = []
    for h in example.get("history", []):
        lines.append(f"User: {h['utterance']}")
        if h.get("response"):
            lines.append(f"Assistant: {h['response']}")
    return "\n".join(lines) if lines else "(none)"


def format_examples(templates: PromptTemplates, examples: Sequence[dict], shots: int, mode: str) -> str:
    """Render the first ``shots`` training examples for ``mode`` (select / rewrite / sar)."""
    if shots > len(examples):
        raise ValueError(f"{shots}-shot prompt needs {shots} ICL examples, only {len(examples)} available")
    blocks = []
    for i, ex in enumerate(examples[:shots], start=1):
        ptkb = list(ex.get("ptkb", []))
        selected = list(ex.get("selected", []))
        sel_line = "Selected: " + (", ".join(map(str, selected)) if selected else "none")
        if mode == "select":
            shown, answer = ptkb, sel_line
        elif mode == "sar":
            shown, answer = ptkb, f"{sel_line}\n1. {ex['rewrite']}"
        else:
            shown, answer = [ptkb[j - 1] for j in selected], f"1. {ex['rewrite']}"
        blocks.append(templates.render("example", number=str(i), history=_example_history(ex),
                                       utterance=ex["utterance"], ptkb_items=format_ptkb(shown), answer=answer))
    return "".join(blocks)


# ---------------------------------------------------------------- output parsing

_NUM_ITEM = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s*(.+?)\s*$")
_LABELLED = re.compile(r"^\s*(selected|response|rewrites?|queries)\s*:", re.IGNORECASE)


def parse_selection(text: str, n_items: int) -> list[int] | None:
    """1-based item indices from a selection reply; None when nothing is parseable.

    Accepts a ``Selected:`` line or a bare list; ``none`` means the empty list.
    Out-of-range indices are dropped.
    """
    m = re.search(r"selected\s*:\s*(.*)", text, re.IGNORECASE)
    body = m.group(1) if m else text
    if re.match(r"\s*(none|nothing|no\b|\[\s*\])", body, re.IGNORECASE):
        return []
    numbers = [int(x) for x in re.findall(r"\d+", body)]
    if not numbers:
        return None
    kept = sorted({x for x in numbers if 1 <= x <= n_items})
    if len(kept) != len(set(numbers)):
        logger.info("dropped out-of-range PTKB indices from %r", body.strip())
    return kept


def parse_rewrite_output(text: str) -> tuple[list[str], str, str | None]:
    """Split a completion into (rewrites, response, claimed selection line).

    Numbered or bulleted lines are rewrites; without any, every unlabelled line
    before the response is taken. A ``Response:`` label starts the response,
    which runs to the end of the text.
    """
    lines = text.strip().splitlines()
    response = ""
    resp_at = None
    for i, line in enumerate(lines):
        if re.match(r"^\s*\**response\**\s*:", line, re.IGNORECASE):
            resp_at = i
            break
    if resp_at is not None:
        first = re.sub(r"^\s*\**response\**\s*:\s*", "", lines[resp_at], flags=re.IGNORECASE)
        response = "\n".join([first] + lines[resp_at + 1:]).strip()
        lines = lines[:resp_at]
    selection_text = next((l for l in lines if re.match(r"^\s*selected\s*:", l, re.IGNORECASE)), None)
    body = [l for l in lines if l.strip() and not _LABELLED.match(l)]
    numbered = [m.group(1) for m in map(_NUM_ITEM.match, body) if m]
    rewrites = numbered if numbered else [l.strip() for l in body]
    rewrites = [r.strip().strip('"') for r in rewrites if r.strip().strip('"')]
    return rewrites, response, selection_text


# ---------------------------------------------------------------- operations

def resolve_ptkb(turn: Turn, conversation: Conversation, strategy: Strategy) -> list[PtkbEntry]:
    if strategy.kind == "none":
        return []
    if strategy.kind == "use_all":
        return list(conversation.ptkb)
    if strategy.kind == "human":
        return [p for p in conversation.ptkb if p.ptkb_id in turn.human_ptkb_ids]
    raise ValueError(f"resolve_ptkb does not handle strategy {strategy.kind!r}")


@dataclass
class Reformulator:
    """Renders prompts and drives the gateway for every strategy."""

    gateway: Gateway
    templates: PromptTemplates = field(default_factory=PromptTemplates.load)
    examples: Sequence[dict] = ()
    include_responses: bool = True
    icl_both_stages: bool = False

    # -- prompts

    def _fields(self, turn: Turn, conversation: Conversation, statements: Sequence[str]) -> dict:
        return {
            "history": format_history(conversation.history(turn.turn_id), self.include_responses),
            "utterance": turn.utterance,
            "ptkb_items": format_ptkb(statements),
        }

    def selection_prompt(self, turn: Turn, conversation: Conversation, shots: int) -> str:
        return self.templates.render(
            "select", instruction=self.templates.instructions["select"],
            examples=format_examples(self.templates, self.examples, shots, "select"),
            **self._fields(turn, conversation, [p.statement for p in conversation.ptkb]))

    def rewrite_prompt(self, turn: Turn, conversation: Conversation, subset: Sequence[PtkbEntry],
                       kind: str, shots: int = 0) -> str:
        if kind == "sar":
            return self.templates.render(
                "sar", instruction=self.templates.instructions["sar"],
                examples=format_examples(self.templates, self.examples, shots, "sar"),
                **self._fields(turn, conversation, [p.statement for p in conversation.ptkb]))
        examples = ""
        if kind == "str" and self.icl_both_stages:
            examples = format_examples(self.templates, self.examples, shots, "rewrite")
        return self.templates.render(
            "rewrite", instruction=self.templates.instructions[kind], examples=examples,
            **self._fields(turn, conversation, [p.statement for p in subset]))

    def prompts_for(self, strategy: Strategy, turn: Turn, conversation: Conversation) -> list[tuple[str, str]]:
        """Prompts a strategy would send for ``turn``, without calling any backend."""
        k = strategy.kind
        if k == "str":
            return [("select", self.selection_prompt(turn, conversation, strategy.shots)),
                    ("rewrite", "(rewrite prompt depends on the selection returned by the first call)")]
        if k == "sar":
            return [("sar", self.rewrite_prompt(turn, conversation, conversation.ptkb, "sar", strategy.shots))]
        if k == "oracle":
            return [(f"oracle:{p.ptkb_id}", self.rewrite_prompt(turn, conversation, [p], "oracle"))
                    for p in conversation.ptkb]
        return [("rewrite", self.rewrite_prompt(turn, conversation, resolve_ptkb(turn, conversation, strategy), k))]

    # -- calls

    def select_ptkb(self, turn: Turn, conversation: Conversation, shots: int,
                    params: GenerationParams) -> list[str]:
        if not conversation.ptkb:
            raise ValueError(f"conversation {conversation.conversation_id} has no PTKB to select from")
        reply = self.gateway.generate(self.selection_prompt(turn, conversation, shots), params)
        picked = parse_selection(reply, len(conversation.ptkb))
        if picked is None:
            logger.warning("turn %s: unparseable PTKB selection %r; using none", turn.turn_id, reply[:200])
            picked = []
        return [conversation.ptkb[i - 1].ptkb_id for i in picked]

    def reformulate(self, turn: Turn, conversation: Conversation, subset: Sequence[PtkbEntry], kind: str,
                    params: GenerationParams, shots: int = 0, provenance: dict | None = None) -> RewriteBundle:
        prompt = self.rewrite_prompt(turn, conversation, subset, kind, shots)
        raw = self.gateway.generate(prompt, params)
        rewrites, response, claimed = parse_rewrite_output(raw)
        if not rewrites:
            raise ReformulationError(f"turn {turn.turn_id}: no parseable rewrite", raw)
        if len(rewrites) > MAX_REWRITES:
            logger.info("turn %s: %d rewrites, keeping the first %d", turn.turn_id, len(rewrites), MAX_REWRITES)
            rewrites = rewrites[:MAX_REWRITES]
        elif len(rewrites) < MAX_REWRITES:
            logger.info("turn %s: only %d rewrites parsed", turn.turn_id, len(rewrites))
        if kind == "sar":
            picked = parse_selection(claimed, len(conversation.ptkb)) if claimed else None
            selected = tuple(conversation.ptkb[i - 1].ptkb_id for i in (picked or []))
        else:
            selected = tuple(p.ptkb_id for p in subset)
        prov = {**params.to_dict(), "backend": self.gateway.backend.backend_id,
                "template_hash": self.templates.digest, "strategy": kind, "shots": shots}
        prov.update(provenance or {})
        return RewriteBundle(turn.turn_id, tuple(rewrites), response, selected, prov)

    def oracle_candidates(self, turn: Turn, conversation: Conversation, params: GenerationParams,
                          provenance: dict | None = None):
        """One bundle per PTKB entry; returns (candidates, failures)."""
        if not conversation.ptkb:
            raise ValueError(f"conversation {conversation.conversation_id} has no PTKB")
        candidates, failures = [], []
        for entry in conversation.ptkb:
            try:
                bundle = self.reformulate(turn, conversation, [entry], "oracle", params,
                                          provenance={**(provenance or {}), "candidate": entry.ptkb_id})
            except (BackendError, ReformulationError) as exc:
                failures.append((entry.ptkb_id, str(exc)))
                continue
            candidates.append((entry.ptkb_id, bundle))
        if not candidates:
            raise ReformulationError(f"turn {turn.turn_id}: all {len(failures)} oracle candidates failed")
        return candidates, failures

    def run_strategy(self, strategy: Strategy, turn: Turn, conversation: Conversation,
                     params: GenerationParams, provenance: dict | None = None) -> RewriteBundle:
        """Bundle for every strategy except oracle (see :meth:`oracle_candidates`)."""
        prov = dict(provenance or {})
        k = strategy.kind
        if k == "str":
            ids = set(self.select_ptkb(turn, conversation, strategy.shots, params))
            subset = [p for p in conversation.ptkb if p.ptkb_id in ids]
            return self.reformulate(turn, conversation, subset, "str", params, strategy.shots, prov)
        if k == "sar":
            return self.reformulate(turn, conversation, conversation.ptkb, "sar", params, strategy.shots, prov)
        if k == "oracle":
            raise ValueError("oracle strategy yields several candidates; use oracle_candidates")
        subset = resolve_ptkb(turn, conversation, strategy)
        return self.reformulate(turn, conversation, subset, k, params, 0, prov)


def compose_query(bundle: RewriteBundle, backend: str) -> str:
    """Sparse retrieval gets rewrites plus response; dense gets rewrites only."""
    rewrites = " ".join(bundle.rewrites)
    if backend == "dense":
        return rewrites
    if backend != "sparse":
        raise ValueError(f"unknown retrieval backend {backend!r}")
    return f"{rewrites} {bundle.response}" if bundle.response else rewrites
