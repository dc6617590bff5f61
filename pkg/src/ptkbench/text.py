"""Text analysis shared by the sparse index, the hash embedder and the mock LLM."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from functools import lru_cache

from nltk.stem.porter import PorterStemmer

# Classic English stopword list (the widely distributed 179-word list).
ENGLISH_STOPWORDS = frozenset("""
i me my myself we our ours ourselves you you're you've you'll you'd your yours yourself yourselves
he him his himself she she's her hers herself it it's its itself they them their theirs themselves
what which who whom this that that'll these those am is are was were be been being have has had
having do does did doing a an the and but if or because as until while of at by for with about
against between into through during before after above below to from up down in out on off over
under again further then once here there when where why how all any both each few more most other
some such no nor not only own same so than too very s t can will just don don't should should've
now d ll m o re ve y ain aren aren't couldn couldn't didn didn't doesn doesn't hadn hadn't hasn
hasn't haven haven't isn isn't ma mightn mightn't mustn mustn't needn needn't shan shan't shouldn
shouldn't wasn wasn't weren weren't won won't wouldn wouldn't
""".split())

_SPLIT = re.compile(r"[\W_]+")
_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=200_000)
def _stem(token: str) -> str:
    return _stemmer.stem(token, to_lowercase=False)


def split_words(text: str) -> list[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


@dataclass(frozen=True)
class Analyzer:
    """Lowercase, split on non-alphanumerics, drop stopwords, Porter-stem.

    ``stopwords`` is ``"english"``, ``"none"`` or an explicit tuple of words.
    Stopwords are matched before stemming.
    """

    stem: bool = True
    stopwords: str | tuple[str, ...] = "english"

    def stopword_set(self) -> frozenset[str]:
        if self.stopwords == "english":
            return ENGLISH_STOPWORDS
        if self.stopwords == "none":
            return frozenset()
        return frozenset(w.lower() for w in self.stopwords)

    def __call__(self, text: str) -> list[str]:
        stop = self.stopword_set()
        tokens = [w for w in split_words(text) if w not in stop]
        if self.stem:
            tokens = [_stem(w) for w in tokens]
        return tokens

    def config(self) -> dict:
        cfg = asdict(self)
        if isinstance(self.stopwords, tuple):
            cfg["stopwords"] = list(self.stopwords)
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "Analyzer":
        sw = cfg.get("stopwords", "english")
        return cls(stem=bool(cfg.get("stem", True)), stopwords=tuple(sw) if isinstance(sw, list) else sw)

    def config_hash(self) -> str:
        blob = json.dumps(self.config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DEFAULT_ANALYZER = Analyzer()


def tokenize(text: str, analyzer: Analyzer = DEFAULT_ANALYZER) -> list[str]:
    return analyzer(text)


def content_words(text: str) -> list[str]:
    """Surface words of ``text`` minus stopwords, in order, unstemmed."""
    return [w for w in split_words(text) if w not in ENGLISH_STOPWORDS]
