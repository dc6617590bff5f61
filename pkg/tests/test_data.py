import json

import pytest
from hypothesis import given, settings, strategies as st

from ptkbench.data import (Conversation, DataError, Dataset, Document, PtkbEntry, RunEntry, RunRanking, Turn,
                           conversations_from_json, convert_ikat, load_corpus,
                           load_qrels, load_topics, make_ranking, parse_run, topic_counts, write_qrels,
                           write_run, write_topics)


def _topics(**turn_overrides):
    turn = {"turn_id": "1-1-1", "utterance": "hello", "response": "hi", "human_ptkb_ids": ["1-1:1"]}
    turn.update(turn_overrides)
    return {"format": "ptkbench-topics", "version": 1, "conversations": [
        {"conversation_id": "1-1", "topic": "t", "ptkb": [{"ptkb_id": "1-1:1", "statement": "I like tea."}],
         "turns": [turn]}]}


def test_toy_topics_match_manifest(toy_dir):
    manifest = json.loads((toy_dir / "manifest.json").read_text())
    counts = topic_counts(load_topics(toy_dir / "topics.json"))
    for key in ("conversations", "turns", "assessed_turns", "turns_with_ptkb", "ptkb_entries"):
        assert counts[key] == manifest[key], key


def test_empty_conversation_list(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"format": "ptkbench-topics", "version": 1, "conversations": []}))
    assert load_topics(p) == []


def test_duplicate_turn_id_rejected():
    doc = _topics()
    doc["conversations"].append({"conversation_id": "1-2", "ptkb": [], "turns": [{"turn_id": "1-1-1", "utterance": "x"}]})
    with pytest.raises(DataError, match="duplicate turn_id"):
        conversations_from_json(doc)


def test_unresolved_human_label_is_load_error():
    with pytest.raises(DataError, match="do not resolve"):
        conversations_from_json(_topics(human_ptkb_ids=["1-1:9"]))


def test_missing_field_reports_path():
    doc = _topics()
    del doc["conversations"][0]["turns"][0]["utterance"]
    with pytest.raises(DataError, match=r"conversations\[0\]\.turns\[0\]"):
        conversations_from_json(doc)


def test_json_syntax_error_has_line(tmp_path):
    p = tmp_path / "t.json"
    p.write_text('{\n  "format": "ptkbench-topics",\n  oops\n}')
    with pytest.raises(DataError) as err:
        load_topics(p)
    assert err.value.line == 3


def test_topics_round_trip(tmp_path, toy_dir):
    convs = load_topics(toy_dir / "topics.json")
    write_topics(convs, tmp_path / "t.json")
    assert load_topics(tmp_path / "t.json") == convs


def test_history_has_prior_turns_in_order(toy_dataset):
    for conv in toy_dataset.conversations:
        for i, turn in enumerate(conv.turns):
            assert [t.turn_id for t in conv.history(turn.turn_id)] == [t.turn_id for t in conv.turns[:i]]


def test_qrels_single_record(tmp_path):
    p = tmp_path / "q.txt"
    p.write_text("10-1-2 0 docA 3\n")
    assert load_qrels(p) == {"10-1-2": {"docA": 3}}


@pytest.mark.parametrize("line,msg", [("t 0 d 5", "outside"), ("t 0 d", "4 columns"), ("t 0 d x", "integer")])
def test_qrels_errors_carry_line(tmp_path, line, msg):
    p = tmp_path / "q.txt"
    p.write_text("t 0 ok 1\n" + line + "\n")
    with pytest.raises(DataError, match=msg) as err:
        load_qrels(p)
    assert err.value.line == 2


def test_toy_qrels_counts(toy_dir):
    qrels = load_qrels(toy_dir / "qrels.txt")
    assert sum(len(j) for j in qrels.values()) == 40
    assert len(qrels) == 12


@given(st.dictionaries(st.from_regex(r"[a-z0-9\-]{1,8}", fullmatch=True),
                       st.dictionaries(st.from_regex(r"[a-z0-9]{1,8}", fullmatch=True), st.integers(0, 4),
                                       min_size=1, max_size=5), max_size=5))
@settings(max_examples=50, deadline=None)
def test_qrels_round_trip(tmp_path_factory, qrels):
    p = tmp_path_factory.mktemp("q") / "q.txt"
    write_qrels(qrels, p)
    assert load_qrels(p) == qrels


def test_corpus_streams_in_file_order(toy_dir):
    docs = list(load_corpus(toy_dir / "corpus.jsonl"))
    assert len(docs) == 200
    assert [d.doc_id for d in docs] == [f"d{i:03d}" for i in range(200)]


def test_empty_corpus(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text("")
    assert list(load_corpus(p)) == []


def test_corpus_duplicate_and_lenient(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id": "a", "contents": "x"}\n{"id": "a", "contents": "y"}\n')
    with pytest.raises(DataError, match="duplicate"):
        list(load_corpus(p))
    p.write_text('{"id": "a", "contents": "x"}\nnot json\n{"id": "b", "contents": "y"}\n')
    with pytest.raises(DataError) as err:
        list(load_corpus(p))
    assert err.value.line == 2
    assert [d.doc_id for d in load_corpus(p, lenient=True)] == ["a", "b"]


def test_document_invariants():
    with pytest.raises(DataError):
        Document("", "text")
    with pytest.raises(DataError):
        Document("a", "")
    assert Document("a", "", placeholder=True).placeholder


def test_run_line_format(tmp_path):
    p = tmp_path / "r.trec"
    write_run([make_ranking("10-1-2", [("docA", 7.31)])], p)
    assert p.read_text() == "10-1-2 Q0 docA 1 7.31 ptkb-bench\n"


def test_run_rejects_non_monotone_scores(tmp_path):
    bad = RunRanking("t", (RunEntry("a", 1, 1.0), RunEntry("b", 2, 2.0)))
    with pytest.raises(DataError, match="score increases"):
        write_run([bad], tmp_path / "r.trec")


def test_run_rejects_bad_tie_order_and_duplicates():
    with pytest.raises(DataError, match="tie"):
        RunRanking("t", (RunEntry("b", 1, 1.0), RunEntry("a", 2, 1.0))).validate()
    with pytest.raises(DataError, match="duplicate"):
        RunRanking("t", (RunEntry("a", 1, 2.0), RunEntry("a", 2, 1.0))).validate()


@st.composite
def rankings(draw):
    out = []
    for t in draw(st.lists(st.from_regex(r"[a-z0-9\-]{1,6}", fullmatch=True), unique=True, max_size=4)):
        docs = draw(st.lists(st.from_regex(r"d[0-9]{1,3}", fullmatch=True), unique=True, min_size=1, max_size=8))
        scores = draw(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=len(docs), max_size=len(docs)))
        pairs = sorted(zip(docs, scores), key=lambda x: (-x[1], x[0]))
        out.append(make_ranking(t, pairs))
    return out


@given(rankings())
@settings(max_examples=60, deadline=None)
def test_run_round_trip(tmp_path_factory, runs):
    p = tmp_path_factory.mktemp("r") / "r.trec"
    write_run(runs, p)
    assert sorted(parse_run(p), key=lambda r: r.turn_id) == sorted(runs, key=lambda r: r.turn_id)


def test_convert_ikat_layout():
    records = [{"number": "11-2", "title": "Souvenirs",
                "ptkb": {"1": "I live in Amsterdam.", "2": "My mother collects antique crystals."},
                "turns": [{"turn_id": 1, "utterance": "Popular Turkish souvenirs?", "response": "Carpets."},
                          {"turn_id": 2, "utterance": "Which one for my mom?", "ptkb_provenance": [2]}]}]
    convs = convert_ikat(records, assessed_turn_ids=["11-2-2"])
    c = convs[0]
    assert [p.ptkb_id for p in c.ptkb] == ["11-2:1", "11-2:2"]
    assert [t.turn_id for t in c.turns] == ["11-2-1", "11-2-2"]
    assert c.turns[1].human_ptkb_ids == {"11-2:2"}
    assert [t.assessed for t in c.turns] == [False, True]
    assert topic_counts(convs)["turns_with_ptkb"] == 1


def test_dataset_rejects_icl_overlap(tmp_path, toy_dir):
    for name in ("topics.json", "qrels.txt", "corpus.jsonl"):
        (tmp_path / name).write_bytes((toy_dir / name).read_bytes())
    (tmp_path / "icl_examples.json").write_text(json.dumps([{"turn_id": "1-1-2"}]))
    with pytest.raises(DataError, match="overlap"):
        Dataset.load(tmp_path)


def test_dataset_evaluated_turns(toy_dataset):
    assert len(toy_dataset.evaluated_turns()) == 12
    assert set(toy_dataset.evaluation_qrels()) == set(toy_dataset.qrels)


def test_structures_are_immutable():
    t = Turn("a", "b")
    with pytest.raises(AttributeError):
        t.utterance = "c"
    c = Conversation("c", "", (PtkbEntry("c:1", "s"),), (t,))
    assert c.ptkb_by_id()["c:1"].statement == "s"
