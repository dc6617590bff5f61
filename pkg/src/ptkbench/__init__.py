"""Personalized conversational retrieval toolkit.

PTKB selection strategies, LLM query rewriting, BM25 and dense retrieval,
graded metrics and a repeated-run variance protocol.
"""

__version__ = "0.1.0"
