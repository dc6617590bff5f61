"""Repeated-run experiments: orchestration, aggregation, significance and oracle analysis."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from . import stats
from .data import Dataset, QrelSet, RunEntry, RunRanking, natural_key, parse_run, write_run
from .llm import BackendError, Gateway, GenerationParams
from .metrics import EvaluationResult, MetricConfig, evaluate_run, metric_fn, read_metrics_csv
from .reformulation import Reformulator, ReformulationError, RewriteBundle, Strategy, compose_query

logger = logging.getLogger(__name__)

MIN_DEPTH = 1000
ORACLE_METRIC = "ndcg@3"
PERTURBATIONS = (None, "top-swap")


class ExperimentError(RuntimeError):
    pass


class Retriever(Protocol):
    def search(self, text: str, k: int) -> list[RunEntry]: ...


@dataclass
class ExperimentSpec:
    exp_id: str
    dataset: str
    strategy: Strategy
    backend: str = "sparse"
    runs: int = 5
    seeds: tuple[int, ...] = ()
    generation: GenerationParams = GenerationParams()
    metrics: MetricConfig = MetricConfig()
    perturbation: str | None = None
    icl_both_stages: bool = False
    include_responses: bool = True
    failure_threshold: float = 0.05

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("run count must be >= 1")
        if not self.seeds:
            self.seeds = tuple(range(1, self.runs + 1))
        self.seeds = tuple(self.seeds)
        if len(self.seeds) != self.runs:
            raise ValueError(f"{len(self.seeds)} seeds given for {self.runs} runs")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.backend not in ("sparse", "dense"):
            raise ValueError(f"unknown retrieval backend {self.backend!r}")
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation {self.perturbation!r}")

    @property
    def depth(self) -> int:
        return max(MIN_DEPTH, self.metrics.depth)

    def to_dict(self) -> dict:
        gen = self.generation.to_dict()
        gen.pop("seed")
        return {
            "exp_id": self.exp_id, "dataset": self.dataset,
            "strategy": {"kind": self.strategy.kind, "shots": self.strategy.shots},
            "backend": self.backend, "runs": self.runs, "seeds": list(self.seeds),
            "generation": gen, "metrics": self.metrics.to_dict(), "perturbation": self.perturbation,
            "icl_both_stages": self.icl_both_stages, "include_responses": self.include_responses,
            "failure_threshold": self.failure_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(
            exp_id=d["exp_id"], dataset=d["dataset"], strategy=Strategy(**d["strategy"]),
            backend=d["backend"], runs=d["runs"], seeds=tuple(d["seeds"]),
            generation=GenerationParams(**d["generation"]), metrics=MetricConfig.from_dict(d["metrics"]),
            perturbation=d.get("perturbation"), icl_both_stages=d.get("icl_both_stages", False),
            include_responses=d.get("include_responses", True),
            failure_threshold=d.get("failure_threshold", 0.05),
        )

    def digest(self) -> str:
        """Identity of the experimental condition; exp_id and seeds are excluded."""
        d = self.to_dict()
        d.pop("exp_id")
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    run_index: int
    seed: int
    spec_digest: str
    evaluation: EvaluationResult
    rankings: list[RunRanking] = field(default_factory=list)
    bundles: list[RewriteBundle] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    winners: dict[str, str] | None = None
    candidate_scores: dict[str, dict[str, float]] | None = None
    failed_turns: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float | None  # None for a single run
    per_run: tuple[float, ...]


@dataclass
class AggregateReport:
    label: str
    spec_digest: str
    n_runs: int
    metrics: dict[str, MetricSummary]
    per_query: dict[str, dict[str, list[float]]]  # metric -> turn -> value per run

    def query_means(self, metric: str) -> dict[str, float]:
        return {t: sum(v) / len(v) for t, v in self.per_query[metric].items()}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "std"] + [f"run_{i}" for i in range(self.n_runs)])
            for name, s in self.metrics.items():
                w.writerow([name, repr(s.mean), "" if s.std is None else repr(s.std)] + [repr(v) for v in s.per_run])


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    runs: list[RunResult]
    report: AggregateReport
    directory: Path | None = None


# ---------------------------------------------------------------- perturbation

def top_swap(ranking: RunRanking, seed: int, width: int = 3) -> RunRanking:
    """Shuffle the top ``width`` documents; everything below keeps its rank.

    The shuffled head is re-scored just above the next document so the ranking
    stays strictly ordered.
    """
    entries = list(ranking.entries)
    if len(entries) < 2:
        return ranking
    head = [e.doc_id for e in entries[:width]]
    random.Random(f"top-swap:{seed}:{ranking.turn_id}").shuffle(head)
    floor = entries[len(head) - 1].score
    step = max(abs(floor), 1.0) * 1e-6
    new_head = [RunEntry(d, i + 1, floor + (len(head) - i) * step) for i, d in enumerate(head)]
    return RunRanking(ranking.turn_id, tuple(new_head + entries[len(head):]), ranking.tag)


# ---------------------------------------------------------------- oracle

@dataclass
class OracleSelection:
    winners: dict[str, str]
    best_scores: dict[str, float]
    candidate_scores: dict[str, dict[str, float]]
    run: list[RunRanking]


def oracle_select(candidates: Mapping[str, Sequence[tuple[str, RunRanking]]], qrels: QrelSet,
                  metric: str = ORACLE_METRIC, config: MetricConfig = MetricConfig()) -> OracleSelection:
    """Per turn, keep the candidate with the best ``metric``; ties go to the lowest PTKB id."""
    fn = metric_fn(metric, config)
    winners, best, scores, run = {}, {}, {}, []
    for turn_id, cands in candidates.items():
        if not cands:
            raise ValueError(f"turn {turn_id} has no oracle candidates")
        judged = qrels.get(turn_id, {})
        scored = {pid: fn(ranking, judged) for pid, ranking in cands}
        top = max(scored.values())
        winner = min((pid for pid, s in scored.items() if s == top), key=natural_key)
        winners[turn_id] = winner
        best[turn_id] = top
        scores[turn_id] = scored
        run.append(dict(cands)[winner])
    return OracleSelection(winners, best, scores, run)


def _modal(picks: Sequence[str]) -> tuple[str, int]:
    counts = Counter(picks)
    top = max(counts.values())
    return min((p for p, c in counts.items() if c == top), key=natural_key), top


@dataclass(frozen=True)
class AgreementBucket:
    size: int  # how many runs chose the modal PTKB
    n_turns: int
    n_agree: int
    mean_recall: float | None

    @property
    def agreement(self) -> float | None:
        return self.n_agree / self.n_turns if self.n_turns else None


def oracle_agreement(winners_per_run: Sequence[Mapping[str, str]], human: Mapping[str, frozenset[str] | set[str]],
                     recall_per_run: Sequence[Mapping[str, float]] | None = None,
                     labeled_only: bool = True) -> list[AgreementBucket]:
    """Bucket turns by how many runs picked the modal winner, then measure human agreement.

    With ``labeled_only`` only turns carrying human PTKB labels are counted.
    """
    n_runs = len(winners_per_run)
    turns = sorted(set().union(*[w.keys() for w in winners_per_run]), key=natural_key) if n_runs else []
    buckets: dict[int, list[tuple[bool, float | None]]] = {k: [] for k in range(1, n_runs + 1)}
    for turn_id in turns:
        labels = human.get(turn_id, frozenset())
        if labeled_only and not labels:
            continue
        picks = [w[turn_id] for w in winners_per_run if turn_id in w]
        winner, count = _modal(picks)
        recall = None
        if recall_per_run:
            vals = [r[turn_id] for r in recall_per_run if turn_id in r]
            recall = sum(vals) / len(vals) if vals else None
        buckets[count].append((winner in labels, recall))
    out = []
    for k, rows in buckets.items():
        recalls = [r for _, r in rows if r is not None]
        out.append(AgreementBucket(k, len(rows), sum(a for a, _ in rows),
                                   sum(recalls) / len(recalls) if recalls else None))
    return out


# ---------------------------------------------------------------- aggregation

def aggregate(runs: Sequence[RunResult], label: str = "") -> AggregateReport:
    if not runs:
        raise ValueError("nothing to aggregate")
    digests = {r.spec_digest for r in runs}
    if len(digests) > 1:
        raise ExperimentError(f"cannot aggregate runs from different specs: {sorted(digests)}")
    names = runs[0].evaluation.metrics
    summaries = {}
    per_query: dict[str, dict[str, list[float]]] = {}
    for name in names:
        values = tuple(r.evaluation.means[name] for r in runs)
        std = statistics.stdev(values) if len(values) > 1 else None
        summaries[name] = MetricSummary(statistics.fmean(values), std, values)
        table: dict[str, list[float]] = {}
        for r in runs:
            for turn_id, scores in r.evaluation.per_query.items():
                table.setdefault(turn_id, []).append(scores[name])
        per_query[name] = table
    return AggregateReport(label, digests.pop(), len(runs), summaries, per_query)


def significance(report_a: AggregateReport, report_b: AggregateReport, metric: str,
                 kind: str = "summary_welch") -> stats.TTestResult:
    a_label, b_label = report_a.label or "a", report_b.label or "b"
    if kind == "summary_welch":
        sa, sb = report_a.metrics[metric], report_b.metrics[metric]
        if sa.std is None or sb.std is None:
            raise ValueError("summary_welch needs at least two runs per report")
        return stats.welch_from_summary(sa.mean, sa.std, report_a.n_runs, sb.mean, sb.std, report_b.n_runs,
                                        method_a=a_label, method_b=b_label, metric=metric)
    if kind == "per_query_paired":
        qa, qb = report_a.query_means(metric), report_b.query_means(metric)
        common = sorted(qa.keys() & qb.keys(), key=natural_key)
        if len(common) < 2:
            raise ValueError("reports share fewer than two turns")
        return stats.paired([qa[t] for t in common], [qb[t] for t in common],
                            method_a=a_label, method_b=b_label, metric=metric)
    raise ValueError(f"unknown test kind {kind!r}")


@dataclass(frozen=True)
class VarianceRow:
    method: str
    metric: str
    mean: float
    std: float


def variance_profile(reports: Mapping[str, AggregateReport], metrics: Sequence[str] | None = None) -> list[VarianceRow]:
    rows = []
    for label, rep in reports.items():
        if rep.n_runs < 2:
            raise ValueError(f"{label}: variance needs at least two runs")
        for name in metrics or list(rep.metrics):
            s = rep.metrics[name]
            rows.append(VarianceRow(label, name, s.mean, s.std))
    return rows


def write_variance(reports: Mapping[str, AggregateReport], rows: Sequence[VarianceRow], out_dir: str | Path) -> None:
    """``variance.csv`` holds the std table, ``variance_runs.csv`` the per-run points behind it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "variance.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "mean", "std"])
        for r in rows:
            w.writerow([r.method, r.metric, repr(r.mean), repr(r.std)])
    metrics = sorted({r.metric for r in rows})
    with open(out / "variance_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "run_index", "value"])
        for label, rep in reports.items():
            for name in metrics:
                for i, v in enumerate(rep.metrics[name].per_run):
                    w.writerow([label, name, i, repr(v)])


def format_table(reports: Mapping[str, AggregateReport], metrics: Sequence[str] | None = None,
                 baseline: str | None = None, kind: str = "summary_welch") -> str:
    """Text table of mean ± std (percent); a dagger marks p < 0.05 against ``baseline``."""
    first = next(iter(reports.values()))
    metrics = list(metrics or first.metrics)
    header = ["Method", "Runs"] + [m.upper() if m in ("mrr", "map") else m.replace("ndcg", "NDCG").replace("recall", "R")
                                   for m in metrics]
    rows = []
    for label, rep in reports.items():
        cells = [label, str(rep.n_runs)]
        for m in metrics:
            s = rep.metrics[m]
            cell = f"{100 * s.mean:.2f}" + ("" if s.std is None else f" ± {100 * s.std:.2f}")
            if baseline and label != baseline and baseline in reports:
                try:
                    if significance(rep, reports[baseline], m, kind).significant:
                        cell += "†"
                except ValueError:
                    pass
            cells.append(cell)
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


# ---------------------------------------------------------------- orchestration

@dataclass
class _TurnOutcome:
    turn_id: str
    ranking: RunRanking | None = None
    bundles: list[RewriteBundle] = field(default_factory=list)
    candidates: list[tuple[str, RunRanking]] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def _retrieve(retriever: Retriever, query: str, turn_id: str, spec: ExperimentSpec, seed: int) -> RunRanking:
    ranking = RunRanking(turn_id, tuple(retriever.search(query, spec.depth)), f"ptkb-{spec.exp_id}")
    if spec.perturbation == "top-swap":
        ranking = top_swap(ranking, seed)
    return ranking


def _run_turn(conv, turn, spec: ExperimentSpec, reformulator: Reformulator, retriever: Retriever,
              params: GenerationParams, run_index: int, seed: int) -> _TurnOutcome:
    out = _TurnOutcome(turn.turn_id)
    prov = {"run_index": run_index}
    try:
        if spec.strategy.kind == "oracle":
            cands, failed = reformulator.oracle_candidates(turn, conv, params, prov)
            out.failures += [{"turn_id": turn.turn_id, "candidate": pid, "error": err} for pid, err in failed]
            for pid, bundle in cands:
                out.bundles.append(bundle)
                query = compose_query(bundle, spec.backend)
                out.candidates.append((pid, _retrieve(retriever, query, turn.turn_id, spec, seed)))
        else:
            bundle = reformulator.run_strategy(spec.strategy, turn, conv, params, prov)
            out.bundles.append(bundle)
            out.ranking = _retrieve(retriever, compose_query(bundle, spec.backend), turn.turn_id, spec, seed)
    except (BackendError, ReformulationError, ValueError) as exc:
        logger.warning("turn %s failed: %s", turn.turn_id, exc)
        out.failures.append({"turn_id": turn.turn_id, "error": f"{type(exc).__name__}: {exc}"})
        out.ranking = None
        out.candidates = []
    return out


def run_single(spec: ExperimentSpec, run_index: int, dataset: Dataset, reformulator: Reformulator,
               retriever: Retriever, jobs: int = 1) -> RunResult:
    seed = spec.seeds[run_index]
    params = spec.generation.with_seed(seed)
    turns = dataset.evaluated_turns()
    work = lambda ct: _run_turn(ct[0], ct[1], spec, reformulator, retriever, params, run_index, seed)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, turns))
    else:
        outcomes = [work(ct) for ct in turns]

    qrels = dataset.evaluation_qrels()
    failures = [f for o in outcomes for f in o.failures]
    failed_turns = {o.turn_id for o in outcomes if o.ranking is None and not o.candidates}
    winners = cand_scores = None
    if spec.strategy.kind == "oracle":
        selection = oracle_select({o.turn_id: o.candidates for o in outcomes if o.candidates}, qrels,
                                  ORACLE_METRIC, spec.metrics)
        winners, cand_scores = selection.winners, selection.candidate_scores
        rankings = selection.run
    else:
        rankings = [o.ranking for o in outcomes if o.ranking is not None]
    # failed turns are absent from the run, so they score zero on every metric
    evaluation = evaluate_run(rankings, qrels, spec.metrics) if rankings else _all_zero(qrels, spec.metrics)
    return RunResult(run_index, seed, spec.digest(), evaluation, rankings,
                     [b for o in outcomes for b in o.bundles], failures, winners, cand_scores,
                     sorted(failed_turns, key=natural_key))


def _all_zero(qrels: QrelSet, config: MetricConfig) -> EvaluationResult:
    per_query = {t: {n: 0.0 for n in config.names} for t in qrels}
    return EvaluationResult(per_query, {n: 0.0 for n in config.names}, config.names, sorted(qrels))


def persist_run(result: RunResult, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "bundles.jsonl", "w", encoding="utf-8") as fh:
        for b in result.bundles:
            fh.write(json.dumps(b.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
    write_run(result.rankings, run_dir / "run.trec")
    result.evaluation.write_csv(run_dir / "metrics.csv")
    with open(run_dir / "failures.jsonl", "w", encoding="utf-8") as fh:
        for f in result.failures:
            fh.write(json.dumps(f, sort_keys=True) + "\n")
    if result.winners is not None:
        with open(run_dir / "winners.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["turn_id", "ptkb_id", ORACLE_METRIC])
            for t in sorted(result.winners, key=natural_key):
                w.writerow([t, result.winners[t], repr(result.candidate_scores[t][result.winners[t]])])
        with open(run_dir / "candidates.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["turn_id", "ptkb_id", ORACLE_METRIC])
            for t in sorted(result.candidate_scores, key=natural_key):
                for pid in sorted(result.candidate_scores[t], key=natural_key):
                    w.writerow([t, pid, repr(result.candidate_scores[t][pid])])


def run_experiment(spec: ExperimentSpec, dataset: Dataset, retriever: Retriever, gateway: Gateway,
                   runs_dir: str | Path | None = None, reformulator: Reformulator | None = None,
                   jobs: int = 1) -> ExperimentResult:
    """Run all R repetitions; with ``runs_dir`` everything lands in ``runs_dir/<exp_id>``."""
    reformulator = reformulator or Reformulator(gateway, examples=dataset.icl_examples,
                                                include_responses=spec.include_responses,
                                                icl_both_stages=spec.icl_both_stages)
    exp_dir = Path(runs_dir) / spec.exp_id if runs_dir is not None else None
    if exp_dir is not None:
        exp_dir.mkdir(parents=True, exist_ok=True)
        record = {**spec.to_dict(), "spec_digest": spec.digest(), "template_hash": reformulator.templates.digest}
        (exp_dir / "spec.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    results = []
    for r in range(spec.runs):
        result = run_single(spec, r, dataset, reformulator, retriever, jobs)
        if exp_dir is not None:
            persist_run(result, exp_dir / str(r))
        n_turns = len(result.evaluation.per_query)
        if len(result.failed_turns) > spec.failure_threshold * n_turns:
            raise ExperimentError(f"run {r}: {len(result.failed_turns)}/{n_turns} turns failed "
                                  f"(threshold {spec.failure_threshold:.0%})")
        logger.info("%s run %d (seed %d): %s", spec.exp_id, r, result.seed,
                    ", ".join(f"{k}={v:.4f}" for k, v in result.evaluation.means.items()))
        results.append(result)
    report = aggregate(results, spec.strategy.label)
    if exp_dir is not None:
        report.write_csv(exp_dir / "aggregate.csv")
    return ExperimentResult(spec, results, report, exp_dir)


def load_experiment(exp_dir: str | Path) -> ExperimentResult:
    """Rebuild results (metrics, rankings, oracle winners) from persisted artifacts."""
    exp_dir = Path(exp_dir)
    spec_path = exp_dir / "spec.json"
    if not spec_path.exists():
        raise FileNotFoundError(f"{spec_path} not found; is {exp_dir} an experiment directory?")
    spec = ExperimentSpec.from_dict(json.loads(spec_path.read_text(encoding="utf-8")))
    runs = []
    for r in range(spec.runs):
        run_dir = exp_dir / str(r)
        if not (run_dir / "metrics.csv").exists():
            raise FileNotFoundError(f"missing {run_dir / 'metrics.csv'}")
        per_query, means = read_metrics_csv(run_dir / "metrics.csv")
        names = spec.metrics.names
        winners = None
        if (run_dir / "winners.csv").exists():
            with open(run_dir / "winners.csv", newline="", encoding="utf-8") as fh:
                winners = {row["turn_id"]: row["ptkb_id"] for row in csv.DictReader(fh)}
        rankings = parse_run(run_dir / "run.trec") if (run_dir / "run.trec").exists() else []
        runs.append(RunResult(r, spec.seeds[r], spec.digest(), EvaluationResult(per_query, means, names),
                              rankings, winners=winners))
    return ExperimentResult(spec, runs, aggregate(runs, spec.strategy.label), exp_dir)
