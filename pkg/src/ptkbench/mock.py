"""Deterministic stand-in for a chat model, for offline runs and tests.

The mock reads the block after the last ``## Current turn`` line of the final
message, using the labels the bundled templates emit (``History:``, ``PTKB:``
with numbered statements, ``Utterance:``). The task is inferred from the output
contract in that block: ``Selected:`` alone asks for a PTKB selection,
``Response:`` alone for rewrites, both for joint selection and rewriting.

Rewrites echo the utterance, content words from earlier user turns and every
PTKB statement in scope. With a seed, each rewrite gets one or two token edits
(synonym swap, adjacent transposition or a dropped word) drawn from an RNG keyed
on (prompt digest, seed, choice); without a seed, output is the plain template.
"""

from __future__ import annotations

import hashlib
import json
import random
import re

from .text import DEFAULT_ANALYZER, content_words, split_words

CURRENT_MARKER = "## Current turn"
MAX_CONTEXT_WORDS = 6
LEADS = ("", "information about ", "details on ", "find ", "search for ")

SYNONYMS = {
    "suggest": "recommend", "recommend": "suggest", "buy": "purchase", "good": "great",
    "best": "top", "easy": "simple", "popular": "famous", "trip": "journey", "food": "cuisine",
    "cheap": "affordable", "plan": "schedule", "exercises": "workouts", "city": "town",
    "make": "prepare", "kids": "children", "children": "kids", "near": "close", "try": "taste",
    "dishes": "meals", "help": "assist", "get": "reach", "eat": "have", "weekly": "week",
    "structure": "organize", "strengthen": "build", "long": "extended", "save": "spare",
    "local": "regional", "could": "might", "quick": "fast", "dinner": "supper",
}

_NUMBERED = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")


def _digest(messages) -> str:
    blob = json.dumps([[m["role"], m["content"]] for m in messages], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_prompt(text: str) -> dict:
    """Pull history, numbered PTKB statements, utterance and task out of a rendered prompt."""
    pos = text.rfind(CURRENT_MARKER)
    block = text[pos + len(CURRENT_MARKER):] if pos >= 0 else text
    history: list[str] = []
    ptkb: list[tuple[int, str]] = []
    utterance = ""
    section = None
    for line in block.splitlines():
        stripped = line.strip()
        if stripped.startswith("History:"):
            section = "history"
        elif stripped.startswith("PTKB:"):
            section = "ptkb"
        elif stripped.startswith("Utterance:"):
            utterance = stripped[len("Utterance:"):].strip()
            section = None
        elif section == "history" and stripped.lower().startswith("user:"):
            history.append(stripped[5:].strip())
        elif section == "ptkb":
            m = _NUMBERED.match(stripped)
            if m:
                ptkb.append((int(m.group(1)), m.group(2)))
    wants_sel = "Selected:" in block
    wants_resp = "Response:" in block
    task = "sar" if wants_sel and wants_resp else "select" if wants_sel else "rewrite"
    return {"history": history, "ptkb": ptkb, "utterance": utterance, "task": task}


def _stems(text: str) -> set[str]:
    return set(DEFAULT_ANALYZER(text))


def _select(parsed: dict, rng: random.Random | None) -> list[int]:
    context = parsed["utterance"] + " " + " ".join(parsed["history"])
    want = _stems(context)
    chosen = [n for n, s in parsed["ptkb"] if _stems(s) & want]
    if rng is not None and parsed["ptkb"] and rng.random() < 0.5:
        n = rng.choice([n for n, _ in parsed["ptkb"]])
        chosen = sorted(set(chosen) ^ {n})
    return chosen


def _context_words(parsed: dict) -> list[str]:
    own = set(split_words(parsed["utterance"]))
    out: list[str] = []
    for utt in reversed(parsed["history"]):
        for w in content_words(utt):
            if w not in own and w not in out:
                out.append(w)
    return out[:MAX_CONTEXT_WORDS]


def _perturb(text: str, rng: random.Random, max_ops: int = 2) -> str:
    words = text.split()
    for _ in range(rng.randint(1, max_ops)):
        op = rng.choice(("synonym", "swap", "drop"))
        swappable = [i for i, w in enumerate(words) if w.lower().strip("?.,!") in SYNONYMS]
        if op == "synonym" and swappable:
            i = rng.choice(swappable)
            words[i] = SYNONYMS[words[i].lower().strip("?.,!")]
        elif op == "drop" and len(words) > 4:
            del words[rng.randrange(len(words))]
        elif len(words) > 1:
            i = rng.randrange(len(words) - 1)
            words[i], words[i + 1] = words[i + 1], words[i]
    return " ".join(words)


def _rng(digest: str, seed: int, choice: int, slot: str) -> random.Random:
    material = f"{digest}:{seed}:{choice}:{slot}".encode()
    return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:8], "little"))


def _render(parsed: dict, seed: int | None, digest: str, choice: int) -> str:
    task = parsed["task"]
    sel_rng = _rng(digest, seed, choice, "select") if seed is not None else None
    lines = []
    if task in ("select", "sar"):
        chosen = _select(parsed, sel_rng)
        lines.append("Selected: " + (", ".join(map(str, chosen)) if chosen else "none"))
        if task == "select":
            return "\n".join(lines)
        statements = [s for n, s in parsed["ptkb"] if n in chosen]
    else:
        statements = [s for _, s in parsed["ptkb"]]

    utterance = parsed["utterance"].rstrip("?.! ")
    core = " ".join(x for x in (utterance, " ".join(_context_words(parsed)),
                                " ".join(s.rstrip(".") for s in statements)) if x)
    for i, lead in enumerate(LEADS):
        rewrite = lead + core
        if seed is not None:
            rewrite = _perturb(rewrite, _rng(digest, seed, choice, f"rewrite{i}"))
        lines.append(f"{i + 1}. {rewrite}")
    response = "Useful sources cover " + " ".join(content_words(core))
    if seed is not None:
        response = _perturb(response, _rng(digest, seed, choice, "response"), max_ops=1)
    lines.append("Response: " + response)
    return "\n".join(lines)


def mock_complete(messages, params) -> list[str]:
    """Pure function of (messages, params.seed, params.n_choices)."""
    digest = _digest(messages)
    parsed = parse_prompt(messages[-1]["content"])
    return [_render(parsed, params.seed, digest, c) for c in range(params.n_choices)]
