"""Graded-relevance metrics over TREC-style runs and qrels."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import QrelSet, RunRanking, natural_key

Judgments = Mapping[str, int]

METRIC_PATTERN = re.compile(r"^(mrr|map|ndcg|recall|judged)(?:@(\d+))?$")
VALID_METRICS = "mrr, mrr@K, map, ndcg@K, recall@K, judged@K"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    ndcg_cutoffs: tuple[int, ...] = (3, 5)
    recall_cutoff: int = 1000
    binarization_threshold: int = 1
    ndcg_gain: str = "linear"
    mrr_cutoff: int | None = None
    judged_cutoffs: tuple[int, ...] = ()

    def __post_init__(self):
        if any(k < 1 for k in (*self.ndcg_cutoffs, self.recall_cutoff, *self.judged_cutoffs)):
            raise ValueError("metric cutoffs must be >= 1")
        if not 1 <= self.binarization_threshold <= 4:
            raise ValueError("binarization threshold must lie in [1, 4]")
        if self.ndcg_gain not in ("linear", "exponential"):
            raise ValueError("ndcg_gain must be 'linear' or 'exponential'")

    @property
    def names(self) -> list[str]:
        names = ["mrr" if self.mrr_cutoff is None else f"mrr@{self.mrr_cutoff}"]
        names += [f"ndcg@{k}" for k in self.ndcg_cutoffs]
        names += [f"recall@{self.recall_cutoff}", "map"]
        names += [f"judged@{k}" for k in self.judged_cutoffs]
        return names

    @property
    def depth(self) -> int:
        """Ranking depth needed to compute every configured metric."""
        return max(self.recall_cutoff, *self.ndcg_cutoffs, *self.judged_cutoffs, self.mrr_cutoff or 1)

    def to_dict(self) -> dict:
        return {
            "ndcg_cutoffs": list(self.ndcg_cutoffs), "recall_cutoff": self.recall_cutoff,
            "binarization_threshold": self.binarization_threshold, "ndcg_gain": self.ndcg_gain,
            "mrr_cutoff": self.mrr_cutoff, "judged_cutoffs": list(self.judged_cutoffs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        d = dict(d)
        for key in ("ndcg_cutoffs", "judged_cutoffs"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _docs(run) -> list[str]:
    return run.doc_ids if isinstance(run, RunRanking) else list(run)


def mrr(run, qrels: Judgments, threshold: int = 1, cutoff: int | None = None) -> float:
    docs = _docs(run)
    if cutoff is not None:
        docs = docs[:cutoff]
    for rank, d in enumerate(docs, start=1):
        if qrels.get(d, 0) >= threshold:
            return 1.0 / rank
    return 0.0


def _gain(grade: int, kind: str) -> float:
    return float(grade) if kind == "linear" else 2.0 ** grade - 1.0


def ndcg_at_k(run, qrels: Judgments, k: int, gain: str = "linear") -> float:
    """Ideal DCG uses the full judged pool of the turn, not just retrieved documents."""
    docs = _docs(run)[:k]
    dcg = sum(_gain(qrels.get(d, 0), gain) / math.log2(i + 1) for i, d in enumerate(docs, start=1))
    ideal = sorted((g for g in qrels.values() if g > 0), reverse=True)[:k]
    idcg = sum(_gain(g, gain) / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0


def map_metric(run, qrels: Judgments, threshold: int = 1) -> float:
    total_relevant = sum(1 for g in qrels.values() if g >= threshold)
    if total_relevant == 0:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for rank, d in enumerate(_docs(run), start=1):
        if qrels.get(d, 0) >= threshold:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / total_relevant


def recall_at_k(run, qrels: Judgments, k: int, threshold: int = 1) -> float:
    relevant = {d for d, g in qrels.items() if g >= threshold}
    if not relevant:
        return 0.0
    return len(relevant.intersection(_docs(run)[:k])) / len(relevant)


def judged_at_k(run, qrels: Judgments, k: int) -> float:
    """Fraction of the top-k that appears in the judgment pool at any grade.

    The denominator is k even when the run is shorter, matching the usual
    pooling-coverage convention.
    """
    docs = _docs(run)[:k]
    return sum(1 for d in docs if d in qrels) / k


def metric_fn(name: str, config: MetricConfig = MetricConfig()):
    """Resolve a metric name such as ``ndcg@3`` to a per-query scoring function."""
    m = METRIC_PATTERN.match(name.strip().lower())
    if not m:
        raise MetricError(f"unknown metric {name!r}; valid names: {VALID_METRICS}")
    base, k = m.group(1), m.group(2)
    k = int(k) if k else None
    t = config.binarization_threshold
    if base == "mrr":
        return lambda run, q: mrr(run, q, t, k)
    if base == "map":
        if k is not None:
            raise MetricError("map takes no cutoff")
        return lambda run, q: map_metric(run, q, t)
    if k is None:
        raise MetricError(f"{base} needs a cutoff, e.g. {base}@10")
    if base == "ndcg":
        return lambda run, q: ndcg_at_k(run, q, k, config.ndcg_gain)
    if base == "recall":
        return lambda run, q: recall_at_k(run, q, k, t)
    return lambda run, q: judged_at_k(run, q, k)


@dataclass
class EvaluationResult:
    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    metrics: list[str]
    missing_turns: list[str] = field(default_factory=list)
    zero_relevant_turns: list[str] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["turn_id", "metric", "value"])
            for turn_id in sorted(self.per_query, key=natural_key):
                for name in self.metrics:
                    w.writerow([turn_id, name, repr(self.per_query[turn_id][name])])
            for name in self.metrics:
                w.writerow(["all", name, repr(self.means[name])])

    def format(self) -> str:
        width = max(len(n) for n in self.metrics)
        lines = [f"{n:<{width}}  {self.means[n]:.4f}" for n in self.metrics]
        lines.append(f"{'turns':<{width}}  {len(self.per_query)}")
        if self.missing_turns:
            lines.append(f"{'missing':<{width}}  {len(self.missing_turns)} (scored 0)")
        if self.zero_relevant_turns:
            lines.append(f"{'no-rel':<{width}}  {len(self.zero_relevant_turns)} turns without relevant judgments")
        return "\n".join(lines)


def read_metrics_csv(path: str | Path) -> tuple[dict[str, dict[str, float]], dict[str, float]]:
    """Per-turn values and the ``all`` summary row means from a metrics.csv."""
    per_query: dict[str, dict[str, float]] = {}
    means: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["turn_id"] == "all":
                means[row["metric"]] = float(row["value"])
            else:
                per_query.setdefault(row["turn_id"], {})[row["metric"]] = float(row["value"])
    return per_query, means


def evaluate_run(runs: Iterable[RunRanking], qrels: QrelSet, config: MetricConfig = MetricConfig(),
                 metrics: Sequence[str] | None = None, missing: str = "zero") -> EvaluationResult:
    """Score every judged turn and average unweighted.

    Turns judged in ``qrels`` but absent from the run score 0 (``missing="zero"``)
    or are left out (``missing="skip"``).
    """
    names = list(metrics) if metrics else config.names
    fns = {n: metric_fn(n, config) for n in names}
    by_turn = {r.turn_id: r for r in runs}
    if not by_turn.keys() & qrels.keys():
        raise MetricError("run and qrels share no turn ids")
    per_query: dict[str, dict[str, float]] = {}
    missing_turns, zero_rel = [], []
    for turn_id, judged in qrels.items():
        run = by_turn.get(turn_id)
        if run is None:
            missing_turns.append(turn_id)
            if missing == "skip":
                continue
            run = RunRanking(turn_id, ())
        if not any(g >= config.binarization_threshold for g in judged.values()):
            zero_rel.append(turn_id)
        per_query[turn_id] = {n: fn(run, judged) for n, fn in fns.items()}
    n = len(per_query)
    means = {name: (sum(s[name] for s in per_query.values()) / n if n else 0.0) for name in names}
    return EvaluationResult(per_query, means, names, missing_turns, zero_rel)
