import csv
import json
import shutil
import subprocess
import sys

import pytest

from ptkbench.cli import main
from ptkbench.data import Dataset, natural_key
from ptkbench.metrics import read_metrics_csv


def _ingest(toy_dir, out, *extra):
    return main(["ingest", "--topics", str(toy_dir / "topics.json"), "--qrels", str(toy_dir / "qrels.txt"),
                 "--corpus", str(toy_dir / "corpus.jsonl"), "--icl-examples", str(toy_dir / "icl_examples.json"),
                 "--out", str(out), *extra])


@pytest.fixture(scope="module")
def ds(tmp_path_factory, toy_dir):
    root = tmp_path_factory.mktemp("cli") / "toy"
    assert _ingest(toy_dir, root) == 0
    assert main(["index", "--backend", "bm25", "--dataset", str(root)]) == 0
    return root


def _run(ds, tmp_path, *extra):
    return main(["run", "--dataset", str(ds), "--runs-dir", str(tmp_path / "runs"),
                 "--cache-dir", str(tmp_path / "cache"), *extra])


def test_ingest_counts(ds, toy_dir, capsys):
    manifest = json.loads((ds / "manifest.json").read_text())
    expected = json.loads((toy_dir / "manifest.json").read_text())
    for key in ("conversations", "turns", "assessed_turns", "ptkb_entries", "qrel_records", "documents",
                "icl_examples"):
        assert manifest[key] == expected[key], key
    assert manifest["assessed_turns"] == 12


def test_ingest_errors(toy_dir, tmp_path, capsys):
    code = main(["ingest", "--topics", str(toy_dir / "topics.json"), "--qrels", str(tmp_path / "nope.txt"),
                 "--corpus", str(toy_dir / "corpus.jsonl"), "--out", str(tmp_path / "x")])
    assert code == 2 and "--qrels" in capsys.readouterr().err
    assert _ingest(toy_dir, tmp_path / "y") == 0
    assert _ingest(toy_dir, tmp_path / "y") == 2
    assert "--force" in capsys.readouterr().err
    assert _ingest(toy_dir, tmp_path / "y", "--force") == 0


def test_usage_errors(ds, tmp_path, capsys):
    assert main(["index", "--backend", "dense", "--dataset", str(ds)]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["run", "--dataset", str(ds), "--strategy", "human"]) == 1  # no --mock or --llm
    assert main(["run", "--dataset", str(ds), "--strategy", "human", "--llm", "nowhere"]) == 1
    assert main(["evaluate", "--run", "x", "--qrels", "y", "--metrics", "ndcg@3,precision"]) == 1
    assert main(["index", "--backend", "bm25", "--dataset", str(tmp_path)]) == 2


def test_index_rebuild_is_identical(ds, tmp_path):
    shutil.copytree(ds, tmp_path / "copy")
    assert main(["index", "--backend", "bm25", "--dataset", str(tmp_path / "copy")]) == 0
    for f in (ds / "index" / "bm25").iterdir():
        assert f.read_bytes() == (tmp_path / "copy" / "index" / "bm25" / f.name).read_bytes()
    manifest = json.loads((ds / "index" / "bm25" / "manifest.json").read_text())
    assert manifest["doc_count"] == 200


def test_dense_index_and_run(ds, toy_dir, tmp_path):
    dense = tmp_path / "dense"
    shutil.copytree(ds, dense)
    assert main(["index", "--backend", "dense", "--dataset", str(dense),
                 "--embeddings", str(toy_dir / "embeddings" / "vectors.bin")]) == 0
    assert _run(dense, tmp_path, "--strategy", "none", "--backend", "dense", "--mock", "--runs", "1") == 0
    assert (tmp_path / "runs" / "none-dense" / "0" / "run.trec").exists()


def test_run_echo_has_zero_std(ds, tmp_path, capsys):
    assert _run(ds, tmp_path, "--strategy", "human", "--mock", "echo", "--runs", "3") == 0
    with open(tmp_path / "runs" / "human-sparse" / "aggregate.csv") as fh:
        assert all(float(row["std"]) == 0.0 for row in csv.DictReader(fh))


def test_dump_prompts(ds, tmp_path):
    out = tmp_path / "prompts.jsonl"
    assert main(["run", "--dataset", str(ds), "--strategy", "sar", "--shots", "3", "--dump-prompts", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 12 and all(r["prompt"].count("### Example") == 3 for r in rows)
    out2 = tmp_path / "str.jsonl"
    assert main(["run", "--dataset", str(ds), "--strategy", "str", "--dump-prompts", str(out2)]) == 0
    assert [json.loads(l)["stage"] for l in out2.read_text().splitlines()][:2] == ["select", "rewrite"]


def test_oracle_run_and_analyses(ds, tmp_path, capsys):
    assert _run(ds, tmp_path, "--strategy", "oracle", "--mock", "perturb", "--runs", "3",
                "--judged-cutoffs", "3,10") == 0
    exp = tmp_path / "runs" / "oracle-sparse"
    with open(exp / "0" / "winners.csv") as fh:
        winners = list(csv.DictReader(fh))
    assert len(winners) == 12 and all(":" in w["ptkb_id"] for w in winners)

    # re-evaluating the persisted run reproduces metrics.csv
    out = tmp_path / "re.csv"
    assert main(["evaluate", "--run", str(exp / "0" / "run.trec"), "--qrels", str(ds / "qrels.txt"),
                 "--out", str(out), "--metrics", "mrr,ndcg@3,ndcg@5,recall@1000,map,judged@3,judged@10"]) == 0
    assert read_metrics_csv(out) == read_metrics_csv(exp / "0" / "metrics.csv")

    assert main(["analyze", "judged", "--exp", str(exp), "--cutoffs", "3,10",
                 "--out", str(tmp_path / "judged.csv")]) == 0
    with open(tmp_path / "judged.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3

    agree = tmp_path / "agree.csv"
    assert main(["analyze", "oracle-agreement", "--exp", str(exp), "--out", str(agree)]) == 0
    with open(agree) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["size"]) for r in rows] == [1, 2, 3]
    # hand tally from the persisted winners
    picks = {}
    for r in range(3):
        with open(exp / str(r) / "winners.csv") as fh:
            for w in csv.DictReader(fh):
                picks.setdefault(w["turn_id"], []).append(w["ptkb_id"])
    human = {t.turn_id: t.human_ptkb_ids for _, t in Dataset.load(ds).turns()}
    tally = {1: [0, 0], 2: [0, 0], 3: [0, 0]}
    for turn_id, chosen in picks.items():
        if not human[turn_id]:
            continue
        top = max(chosen.count(c) for c in chosen)
        modal = min((c for c in chosen if chosen.count(c) == top), key=natural_key)
        tally[top][0] += 1
        tally[top][1] += modal in human[turn_id]
    assert {int(r["size"]): [int(r["n_turns"]), int(r["n_agree"])] for r in rows} == tally
    assert sum(v[0] for v in tally.values()) == 9

    assert main(["analyze", "variance", "--exp", str(exp), "--out", str(tmp_path / "var")]) == 0
    assert (tmp_path / "var" / "variance.csv").exists()


def test_significance_and_table(ds, tmp_path, capsys):
    assert _run(ds, tmp_path, "--strategy", "none", "--mock", "perturb", "--runs", "3") == 0
    assert _run(ds, tmp_path, "--strategy", "human", "--mock", "perturb", "--runs", "3") == 0
    a, b = tmp_path / "runs" / "human-sparse", tmp_path / "runs" / "none-sparse"
    sig = tmp_path / "sig.csv"
    assert main(["analyze", "significance", "--a", str(a), "--b", str(a), "--kind", "both", "--out", str(sig)]) == 0
    with open(sig) as fh:
        assert all(r["significant"] == "" for r in csv.DictReader(fh))
    capsys.readouterr()
    assert main(["analyze", "table", "--exp", str(b), "--exp", str(a), "--baseline", "none-sparse",
                 "--metrics", "ndcg@3,recall@1000"]) == 0
    table = capsys.readouterr().out
    assert "human-sparse" in table and "none-sparse" in table
    assert main(["analyze", "table", "--exp", str(a), "--baseline", "missing"]) == 1


def test_entry_point_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ptkbench", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "ptkbench" in proc.stdout
