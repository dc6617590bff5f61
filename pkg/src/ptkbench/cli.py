"""``ptkbench`` command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, GlobalConfig, load_config
from .data import (DataError, Dataset, convert_ikat, load_corpus, load_qrels, load_topics, parse_run,
                   topic_counts, write_corpus, write_qrels, write_topics)
from .dense import (DenseRetriever, EmbeddingError, FileLookupEmbedder, HashEmbedder, HttpEmbedder,
                    load_embeddings, write_vectors)
from .experiments import (ExperimentError, ExperimentSpec, format_table, load_experiment,
                          oracle_agreement, run_experiment, significance, variance_profile, write_variance)
from .llm import BackendError, ChatCache, Gateway, GenerationParams, MockBackend, OpenAIChatBackend
from .metrics import MetricConfig, MetricError, evaluate_run, metric_fn
from .reformulation import KINDS, SHOT_CHOICES, Reformulator, Strategy
from .sparse import AnalyzerMismatch, Bm25Retriever, InvertedIndex, build_index

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

logger = logging.getLogger("ptkbench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{flag}: file not found: {p}")
    return p


# ---------------------------------------------------------------- ingest

def cmd_ingest(args, cfg: GlobalConfig) -> int:
    topics = _require_file(args.topics, "--topics")
    qrels_path = _require_file(args.qrels, "--qrels")
    corpus = _require_file(args.corpus, "--corpus")
    icl_path = _require_file(args.icl_examples, "--icl-examples") if args.icl_examples else None
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"{out} already exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    qrels = load_qrels(qrels_path)
    if args.from_ikat:
        try:
            records = json.loads(topics.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(exc.msg, path=topics, line=exc.lineno) from None
        if not isinstance(records, list):
            raise DataError("iKAT topics must be a JSON array of conversations", path=topics)
        conversations = convert_ikat(records, qrels.keys())
    else:
        conversations = load_topics(topics)
    docs = list(load_corpus(corpus))
    icl = json.loads(icl_path.read_text(encoding="utf-8")) if icl_path else []

    out.mkdir(parents=True, exist_ok=True)
    write_topics(conversations, out / Dataset.TOPICS)
    write_qrels(qrels, out / Dataset.QRELS)
    write_corpus(docs, out / Dataset.CORPUS)
    if icl:
        (out / Dataset.ICL).write_text(json.dumps(icl, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    Dataset.load(out)  # re-validates ICL/evaluation disjointness on the written files

    counts = topic_counts(conversations)
    counts["qrel_records"] = sum(len(j) for j in qrels.values())
    counts["qrel_turns"] = len(qrels)
    counts["documents"] = len(docs)
    counts["icl_examples"] = len(icl)
    (out / Dataset.MANIFEST).write_text(json.dumps(counts, indent=2) + "\n", encoding="utf-8")
    width = max(map(len, counts))
    print(f"dataset written to {out}")
    for k, v in counts.items():
        print(f"  {k:<{width}}  {v}")
    return EXIT_OK


# ---------------------------------------------------------------- index

def _index_dir(dataset: Path, backend: str) -> Path:
    return dataset / "index" / backend


def cmd_index(args, cfg: GlobalConfig) -> int:
    root = Path(args.dataset)
    if not (root / Dataset.CORPUS).is_file():
        raise DataError(f"--dataset: {root} has no {Dataset.CORPUS}; run `ptkbench ingest` first")
    out = _index_dir(root, args.backend)
    if args.backend == "bm25":
        params = cfg.bm25
        if args.k1 is not None or args.b is not None:
            params = type(params)(args.k1 if args.k1 is not None else params.k1,
                                  args.b if args.b is not None else params.b)
        index = build_index(load_corpus(root / Dataset.CORPUS), params)
        index.save(out)
        print(f"bm25 index: {index.doc_count} documents, {len(index.postings)} terms -> {out}")
        return EXIT_OK

    if not args.embeddings:
        raise UsageError("dense indexing needs --embeddings (and --ids, or an ids.txt next to the vectors)")
    vec_path = _require_file(args.embeddings, "--embeddings")
    id_path = _require_file(args.ids or str(vec_path.parent / "ids.txt"), "--ids")
    store = load_embeddings(vec_path, id_path, normalize=not args.no_normalize)
    corpus_ids = {d.doc_id for d in load_corpus(root / Dataset.CORPUS)}
    unknown = [d for d in store.doc_ids if d not in corpus_ids]
    if unknown:
        raise DataError(f"{len(unknown)} embedding ids are not in the corpus, e.g. {unknown[0]!r}", path=id_path)
    out.mkdir(parents=True, exist_ok=True)
    write_vectors(store.vectors, out / "vectors.bin")
    (out / "ids.txt").write_text("".join(d + "\n" for d in store.doc_ids), encoding="utf-8")
    manifest = {"format_version": 1, "kind": "dense", "dim": store.dim, "doc_count": store.doc_count,
                "normalized": store.normalized}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"dense index: {store.doc_count} vectors of dim {store.dim} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- run

def _make_embedder(cfg: GlobalConfig, override: str | None):
    e = cfg.embedder
    kind = override or e.kind
    if kind == "test_hash":
        return HashEmbedder(e.dim)
    if kind == "file_lookup":
        if not e.path:
            raise ConfigError("embedder.path is required for file_lookup")
        return FileLookupEmbedder(e.path)
    if kind == "http_endpoint":
        if not e.base_url:
            raise ConfigError("embedder.base_url is required for http_endpoint")
        return HttpEmbedder(e.dim, e.base_url, e.endpoint, e.model, e.api_key_env)
    raise ConfigError(f"unknown embedder kind {kind!r}")


def _make_retriever(root: Path, backend: str, cfg: GlobalConfig, embedder_kind: str | None):
    if backend == "sparse":
        idx = _index_dir(root, "bm25")
        if not (idx / "manifest.json").is_file():
            raise DataError(f"no BM25 index under {idx}; run `ptkbench index --backend bm25 --dataset {root}`")
        return Bm25Retriever(InvertedIndex.load(idx))
    idx = _index_dir(root, "dense")
    if not (idx / "manifest.json").is_file():
        raise DataError(f"no dense index under {idx}; run `ptkbench index --backend dense ...` first")
    manifest = json.loads((idx / "manifest.json").read_text(encoding="utf-8"))
    store = load_embeddings(idx / "vectors.bin", idx / "ids.txt", normalize=manifest.get("normalized", True))
    embedder = _make_embedder(cfg, embedder_kind)
    if embedder.dim != store.dim:
        raise DataError(f"embedder dim {embedder.dim} does not match index dim {store.dim}")
    return DenseRetriever(store, embedder)


def _make_gateway(args, cfg: GlobalConfig) -> Gateway:
    if args.mock:
        backend = MockBackend(perturb=args.mock == "perturb")
    elif args.llm:
        if args.llm not in cfg.backends:
            known = ", ".join(sorted(cfg.backends)) or "none configured"
            raise UsageError(f"--llm {args.llm!r} is not in the config backend registry ({known})")
        entry = cfg.backends[args.llm]
        backend = OpenAIChatBackend(entry.base_url, entry.api_key_env, name=args.llm)
    else:
        raise UsageError("pass --mock [echo|perturb] or --llm NAME")
    cache = None if args.no_cache else ChatCache(args.cache_dir or cfg.cache_dir)
    return Gateway(backend, cache, max_inflight=max(1, args.jobs))


def cmd_run(args, cfg: GlobalConfig) -> int:
    root = Path(args.dataset)
    dataset = Dataset.load(root)
    strategy = Strategy(args.strategy, args.shots)
    runs = args.runs
    seeds = tuple(args.seeds) if args.seeds else ()
    if seeds and args.runs is None:
        runs = len(seeds)
    generation = GenerationParams(model=args.model, temperature=args.temperature, max_tokens=args.max_tokens)
    metrics = cfg.metrics
    if args.judged_cutoffs:
        metrics = MetricConfig.from_dict({**metrics.to_dict(), "judged_cutoffs": args.judged_cutoffs})
    exp_id = args.exp_id or f"{strategy.label}-{args.backend}"
    spec = ExperimentSpec(exp_id, str(root), strategy, args.backend, runs or 5, seeds, generation, metrics,
                          args.perturb, args.icl_both_stages, not args.exclude_responses, args.failure_threshold)

    if args.dump_prompts:
        # no gateway is built, so nothing can reach a backend
        reformulator = Reformulator(None, examples=dataset.icl_examples,
                                    include_responses=spec.include_responses, icl_both_stages=spec.icl_both_stages)
        out = sys.stdout if args.dump_prompts == "-" else open(args.dump_prompts, "w", encoding="utf-8")
        try:
            for conv, turn in dataset.evaluated_turns():
                for stage, prompt in reformulator.prompts_for(strategy, turn, conv):
                    out.write(json.dumps({"turn_id": turn.turn_id, "stage": stage, "prompt": prompt},
                                         ensure_ascii=False) + "\n")
        finally:
            if out is not sys.stdout:
                out.close()
        return EXIT_OK

    retriever = _make_retriever(root, args.backend, cfg, args.embedder)
    gateway = _make_gateway(args, cfg)
    result = run_experiment(spec, dataset, retriever, gateway, args.runs_dir or cfg.runs_dir, jobs=args.jobs)
    print(format_table({result.report.label: result.report}))
    print(f"\nexperiment: {result.directory}  (backend calls {gateway.backend_calls}, cache hits {gateway.cache_hits})")
    if spec.strategy.kind == "oracle":
        print(f"oracle winners: {result.directory}/<run>/winners.csv")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def _check_metric_names(names: list[str], config: MetricConfig) -> None:
    for n in names:
        try:
            metric_fn(n, config)
        except MetricError as exc:
            raise UsageError(str(exc)) from None


def cmd_evaluate(args, cfg: GlobalConfig) -> int:
    names = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    if names:
        _check_metric_names(names, cfg.metrics)
    runs = parse_run(_require_file(args.run, "--run"))
    qrels = load_qrels(_require_file(args.qrels, "--qrels"))
    result = evaluate_run(runs, qrels, cfg.metrics, names, missing=args.missing)
    if args.out:
        result.write_csv(args.out)
    print(result.format())
    return EXIT_OK


# ---------------------------------------------------------------- analyze

def _write_rows(path: str | None, header: list[str], rows: list[list]) -> None:
    if not path:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _print_rows(header: list[str], rows: list[list]) -> None:
    text = [[str(c) if not isinstance(c, float) else f"{c:.4f}" for c in r] for r in [header] + rows]
    widths = [max(len(r[i]) for r in text) for i in range(len(header))]
    for r in text:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


def _experiment_qrels(exp, override: str | None):
    if override:
        return load_qrels(_require_file(override, "--qrels"))
    return Dataset.load(exp.spec.dataset).evaluation_qrels()


def analyze_judged(args, cfg: GlobalConfig) -> int:
    cutoffs = args.cutoffs
    sources: list[tuple[str, int, list]] = []
    qrels_for: dict[str, dict] = {}
    for path in args.run or []:
        sources.append((path, 0, parse_run(_require_file(path, "--run"))))
        qrels_for[path] = None
    for d in args.exp or []:
        exp = load_experiment(d)
        qrels_for[d] = _experiment_qrels(exp, args.qrels)
        for r in exp.runs:
            sources.append((d, r.run_index, r.rankings))
    if not sources:
        raise UsageError("analyze judged needs --run or --exp")
    shared = load_qrels(_require_file(args.qrels, "--qrels")) if args.qrels else None
    names = [f"judged@{k}" for k in cutoffs]
    rows = []
    for src, idx, rankings in sources:
        qrels = qrels_for.get(src) or shared
        if qrels is None:
            raise UsageError(f"--qrels is required to analyze run file {src}")
        res = evaluate_run(rankings, qrels, cfg.metrics, names)
        rows.append([src, idx] + [res.means[n] for n in names])
    header = ["source", "run_index"] + names
    _write_rows(args.out, header, rows)
    _print_rows(header, rows)
    return EXIT_OK


def analyze_oracle_agreement(args, cfg: GlobalConfig) -> int:
    exp = load_experiment(args.exp)
    if exp.spec.strategy.kind != "oracle":
        raise DataError(f"{args.exp} is not an oracle experiment (strategy {exp.spec.strategy.kind})")
    dataset = Dataset.load(args.dataset or exp.spec.dataset)
    human = {t.turn_id: t.human_ptkb_ids for _, t in dataset.turns()}
    recall_name = f"recall@{exp.spec.metrics.recall_cutoff}"
    winners = [r.winners or {} for r in exp.runs]
    recalls = [{t: s[recall_name] for t, s in r.evaluation.per_query.items()} for r in exp.runs]
    buckets = oracle_agreement(winners, human, recalls, labeled_only=not args.all_turns)
    header = ["size", "n_turns", "n_agree", "agreement", f"mean_{recall_name}"]
    rows = [[b.size, b.n_turns, b.n_agree, "" if b.agreement is None else b.agreement,
             "" if b.mean_recall is None else b.mean_recall] for b in buckets]
    _write_rows(args.out, header, rows)
    _print_rows(header, rows)
    return EXIT_OK


def _reports(dirs: list[str]):
    reports = {}
    for d in dirs:
        exp = load_experiment(d)
        label = exp.spec.exp_id
        reports[label] = exp.report
    return reports


def analyze_variance(args, cfg: GlobalConfig) -> int:
    reports = _reports(args.exp)
    rows = variance_profile(reports, args.metrics.split(",") if args.metrics else None)
    if args.out:
        write_variance(reports, rows, args.out)
    _print_rows(["method", "metric", "mean", "std"], [[r.method, r.metric, r.mean, r.std] for r in rows])
    return EXIT_OK


def analyze_significance(args, cfg: GlobalConfig) -> int:
    a, b = load_experiment(args.a), load_experiment(args.b)
    ra, rb = a.report, b.report
    ra.label, rb.label = a.spec.exp_id, b.spec.exp_id
    metrics = args.metrics.split(",") if args.metrics else list(ra.metrics)
    kinds = ["summary_welch", "per_query_paired"] if args.kind == "both" else [args.kind]
    header = ["method_a", "method_b", "metric", "test", "t", "df", "p", "significant"]
    rows = []
    for m in metrics:
        for kind in kinds:
            res = significance(ra, rb, m, kind)
            rows.append([res.method_a, res.method_b, m, kind, res.t_statistic, res.degrees_of_freedom,
                         res.p_value, "†" if res.significant else ""])
    _write_rows(args.out, header, rows)
    _print_rows(header, rows)
    return EXIT_OK


def analyze_table(args, cfg: GlobalConfig) -> int:
    reports = _reports(args.exp)
    baseline = args.baseline
    if baseline and baseline not in reports:
        raise UsageError(f"--baseline {baseline!r} is not one of {sorted(reports)}")
    print(format_table(reports, args.metrics.split(",") if args.metrics else None, baseline, args.kind))
    return EXIT_OK


# ---------------------------------------------------------------- make-toy

def cmd_make_toy(args, cfg: GlobalConfig) -> int:
    from .toy import write_toy_dataset

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} already exists and is not empty; pass --force to overwrite")
    write_toy_dataset(out)
    print(f"toy dataset written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptkbench", description="Personalized conversational retrieval experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", default=os.environ.get("PTKBENCH_CONFIG"),
                   help="JSON config file (default: $PTKBENCH_CONFIG)")
    p.add_argument("--jobs", type=int, default=1, help="worker cap for turn-level parallelism")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="convert topics/qrels/corpus into a canonical dataset directory")
    s.add_argument("--topics", required=True)
    s.add_argument("--qrels")
    s.add_argument("--corpus")
    s.add_argument("--from-ikat", action="store_true", help="topics file uses the official iKAT layout")
    s.add_argument("--icl-examples", help="JSON list of training-split examples for few-shot prompts")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("index", help="build a BM25 or dense index for a dataset")
    s.add_argument("--backend", choices=("bm25", "dense"), required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--embeddings", help="document vectors file (dense)")
    s.add_argument("--ids", help="doc id sidecar for --embeddings (default: ids.txt beside it)")
    s.add_argument("--no-normalize", action="store_true", help="keep dense vectors as given")
    s.add_argument("--k1", type=float)
    s.add_argument("--b", type=float)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("run", help="run a repeated-run experiment and print mean ± std")
    s.add_argument("--dataset", required=True)
    s.add_argument("--strategy", choices=KINDS, required=True)
    s.add_argument("--shots", type=int, choices=SHOT_CHOICES, default=0)
    s.add_argument("--backend", choices=("sparse", "dense"), default="sparse", help="retrieval backend")
    s.add_argument("--model", default="gpt-4o-mini")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--max-tokens", type=int, default=512)
    s.add_argument("--runs", type=int)
    s.add_argument("--seeds", type=_int_list, help="comma-separated, one per run (default 1..R)")
    s.add_argument("--mock", nargs="?", const="echo", choices=("echo", "perturb"),
                   help="offline backend; echo ignores seeds, perturb applies seeded edits")
    s.add_argument("--llm", help="backend name from the config registry")
    s.add_argument("--perturb", choices=("top-swap",), help="shuffle the top 3 retrieved documents per seed")
    s.add_argument("--dump-prompts", metavar="PATH", help="write rendered prompts as JSON lines ('-' for stdout) and exit")
    s.add_argument("--icl-both-stages", action="store_true", help="STR: also put examples in the rewrite prompt")
    s.add_argument("--exclude-responses", action="store_true", help="omit canonical responses from history")
    s.add_argument("--embedder", choices=("test_hash", "file_lookup", "http_endpoint"))
    s.add_argument("--judged-cutoffs", type=_int_list, help="also record judged@k for these k")
    s.add_argument("--exp-id")
    s.add_argument("--runs-dir")
    s.add_argument("--cache-dir")
    s.add_argument("--no-cache", action="store_true")
    s.add_argument("--failure-threshold", type=float, default=0.05)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("evaluate", help="score a TREC run file against qrels")
    s.add_argument("--run", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--metrics", help="comma-separated, e.g. mrr,ndcg@3,recall@1000,map")
    s.add_argument("--missing", choices=("zero", "skip"), default="zero",
                   help="judged turns absent from the run score zero or are skipped")
    s.add_argument("--out", help="per-query CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze", help="post-hoc analyses over experiments")
    an = s.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    a = an.add_parser("judged", help="judged@k pooling coverage")
    a.add_argument("--run", action="append", help="TREC run file (repeatable)")
    a.add_argument("--exp", action="append", help="experiment directory (repeatable)")
    a.add_argument("--qrels")
    a.add_argument("--cutoffs", type=_int_list, default=[3, 10, 100])
    a.add_argument("--out")
    a.set_defaults(func=analyze_judged)
    a = an.add_parser("oracle-agreement", help="oracle winner stability vs human PTKB labels")
    a.add_argument("--exp", required=True)
    a.add_argument("--dataset")
    a.add_argument("--all-turns", action="store_true", help="include turns without human labels")
    a.add_argument("--out")
    a.set_defaults(func=analyze_oracle_agreement)
    a = an.add_parser("variance", help="run-to-run std per metric")
    a.add_argument("--exp", action="append", required=True)
    a.add_argument("--metrics")
    a.add_argument("--out", help="directory for variance.csv and variance_runs.csv")
    a.set_defaults(func=analyze_variance)
    a = an.add_parser("significance", help="t-test between two experiments")
    a.add_argument("--a", required=True)
    a.add_argument("--b", required=True)
    a.add_argument("--metrics")
    a.add_argument("--kind", choices=("summary_welch", "per_query_paired", "both"), default="summary_welch")
    a.add_argument("--out")
    a.set_defaults(func=analyze_significance)
    a = an.add_parser("table", help="mean ± std table over several experiments")
    a.add_argument("--exp", action="append", required=True)
    a.add_argument("--baseline", help="exp_id that significance daggers compare against")
    a.add_argument("--metrics")
    a.add_argument("--kind", choices=("summary_welch", "per_query_paired"), default="summary_welch")
    a.set_defaults(func=analyze_table)

    s = sub.add_parser("make-toy", help="write the built-in toy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_make_toy)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"ptkbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, ExperimentError) as exc:
        print(f"ptkbench: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, ConfigError, MetricError, AnalyzerMismatch, EmbeddingError, FileNotFoundError,
            ValueError) as exc:
        print(f"ptkbench: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
