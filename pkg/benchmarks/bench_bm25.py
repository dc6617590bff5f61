"""Time the compiled BM25 kernel against the pure-Python fallback.

Builds a synthetic Zipf-distributed corpus, then runs the same query batch
through ``search_terms`` with each kernel swapped in.

    python3 benchmarks/bench_bm25.py --docs 20000 --queries 200
"""

import argparse
import time

import numpy as np

from ptkbench import _bm25_py, kernels
from ptkbench.data import Document
from ptkbench.sparse import build_index, search_terms
from ptkbench.text import Analyzer


def synthetic_corpus(n_docs, vocab, mean_len, seed):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab)]
    weights = 1.0 / np.arange(1, vocab + 1)
    weights /= weights.sum()
    lengths = rng.poisson(mean_len, n_docs) + 1
    return [Document(f"doc{i:07d}", " ".join(rng.choice(words, size=n, p=weights)))
            for i, n in enumerate(lengths)], words


def time_kernel(fn, index, queries, k, repeat):
    saved = kernels.accumulate
    kernels.accumulate = fn
    try:
        best = float("inf")
        for _ in range(repeat):
            start = time.perf_counter()
            results = [search_terms(q, k, index) for q in queries]
            best = min(best, time.perf_counter() - start)
    finally:
        kernels.accumulate = saved
    return best, results


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--docs", type=int, default=20000)
    p.add_argument("--vocab", type=int, default=5000)
    p.add_argument("--doc-len", type=int, default=60)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--query-len", type=int, default=8)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    docs, words = synthetic_corpus(args.docs, args.vocab, args.doc_len, args.seed)
    t0 = time.perf_counter()
    index = build_index(docs, analyzer=Analyzer(stem=False, stopwords="none"))
    print(f"index: {index.doc_count} docs, {len(index.postings)} terms, built in {time.perf_counter() - t0:.2f}s")

    rng = np.random.default_rng(args.seed + 1)
    queries = [list(rng.choice(words[: args.vocab // 2], size=args.query_len)) for _ in range(args.queries)]

    timings = {"python": time_kernel(_bm25_py.accumulate, index, queries, args.k, args.repeat)}
    if kernels.BACKEND == "cython":
        timings["cython"] = time_kernel(kernels.accumulate, index, queries, args.k, args.repeat)
    else:
        print("compiled kernel not available; only the fallback is timed")

    for name, (secs, _) in timings.items():
        print(f"{name:>7}: {secs:.3f}s for {args.queries} queries ({1000 * secs / args.queries:.2f} ms/query)")
    # the raw kernel on the longest posting list, without ranking overhead
    term = max(index.postings, key=lambda t: len(index.postings[t].doc_indices))
    post = index.postings[term]
    kernel_fns = {"python": _bm25_py.accumulate}
    if kernels.BACKEND == "cython":
        kernel_fns["cython"] = kernels.accumulate
    for name, fn in kernel_fns.items():
        scores = np.zeros(index.doc_count)
        touched = np.zeros(index.doc_count, dtype=np.uint8)
        start = time.perf_counter()
        for _ in range(20):
            fn(scores, touched, post.doc_indices, post.tfs, index.doc_lengths, 1.0, 0.82, 0.68, index.avg_doc_length)
        per_call = (time.perf_counter() - start) / 20
        print(f"{name:>7} kernel: {1e3 * per_call:.3f} ms per call on a {len(post.doc_indices)}-entry posting list")
    if len(timings) == 2:
        py, cy = timings["python"], timings["cython"]
        same = all([e.doc_id for e in a] == [e.doc_id for e in b] for a, b in zip(py[1], cy[1]))
        print(f"speedup: {py[0] / cy[0]:.1f}x  rankings identical: {same}")


if __name__ == "__main__":
    main()
