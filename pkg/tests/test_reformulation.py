import pytest
from hypothesis import given, strategies as st

from ptkbench.data import Conversation, PtkbEntry, Turn
from ptkbench.llm import Backend, BackendError, Gateway, GenerationParams, MockBackend
from ptkbench.reformulation import (PromptTemplates, ReformulationError, Reformulator, RewriteBundle, Strategy,
                                    compose_query, format_ptkb, parse_rewrite_output, parse_selection,
                                    resolve_ptkb)

TEN = Conversation("9-1", "t", tuple(PtkbEntry(f"9-1:{i}", f"Statement number {i}.") for i in range(1, 11)),
                   (Turn("9-1-1", "first question"), Turn("9-1-2", "second question", "", frozenset({"9-1:2", "9-1:5"}))))


class Scripted(Backend):
    """Replies with fixed text and records prompts."""

    backend_id = "scripted"

    def __init__(self, reply, fail_on=()):
        super().__init__()
        self.reply = reply
        self.prompts = []
        self.fail_on = fail_on

    def complete(self, messages, params):
        self._count()
        prompt = messages[-1]["content"]
        self.prompts.append(prompt)
        if any(f in prompt.split("## Current turn")[-1] for f in self.fail_on):
            raise BackendError("boom")
        return [self.reply]


def _ref(backend, **kw):
    return Reformulator(Gateway(backend), **kw)


def _souvenir(toy_dataset):
    conv = toy_dataset.conversations[0]
    return conv, conv.turns[1]


# ---------------------------------------------------------------- parsing

@pytest.mark.parametrize("reply,want", [("1,3", [1, 3]), ("Selected: 1, 3", [1, 3]), ("none", []),
                                        ("Selected: none", []), ("1, 9", [1]), ("I am not sure", None)])
def test_parse_selection(reply, want):
    assert parse_selection(reply, 5) == want


def test_parse_rewrites_numbered_and_response():
    text = "1. alpha query\n2) beta query\n3: gamma\nResponse: an answer\nspanning lines"
    rewrites, response, sel = parse_rewrite_output(text)
    assert rewrites == ["alpha query", "beta query", "gamma"]
    assert response == "an answer\nspanning lines" and sel is None


def test_parse_rewrites_line_per_rewrite_and_selection():
    rewrites, response, sel = parse_rewrite_output("Selected: 2\nplain one\nplain two")
    assert rewrites == ["plain one", "plain two"] and response == "" and sel == "Selected: 2"


@given(st.lists(st.from_regex(r"[a-z][a-z ]{0,20}[a-z]", fullmatch=True), min_size=1, max_size=5),
       st.from_regex(r"[a-z][a-z ]{0,20}", fullmatch=True))
def test_parse_rewrites_recovers_rendered_list(rewrites, response):
    text = "\n".join(f"{i}. {r}" for i, r in enumerate(rewrites, 1)) + f"\nResponse: {response}"
    got, resp, _ = parse_rewrite_output(text)
    assert got == [r.strip() for r in rewrites] and resp == response.strip()


# ---------------------------------------------------------------- strategies

def test_strategy_validation():
    assert Strategy("sar", 3).label == "sar-3shot"
    with pytest.raises(ValueError):
        Strategy("human", 1)
    with pytest.raises(ValueError):
        Strategy("str", 2)
    with pytest.raises(ValueError):
        Strategy("bogus")


def test_resolve_ptkb():
    turn = TEN.turns[1]
    assert resolve_ptkb(turn, TEN, Strategy("none")) == []
    assert len(resolve_ptkb(turn, TEN, Strategy("use_all"))) == 10
    human = resolve_ptkb(turn, TEN, Strategy("human"))
    assert [p.ptkb_id for p in human] == ["9-1:2", "9-1:5"]
    assert resolve_ptkb(turn, TEN, Strategy("human")) == human


def test_none_prompt_has_no_statements(toy_dataset):
    ref = _ref(MockBackend())
    for conv, turn in toy_dataset.evaluated_turns():
        prompt = ref.rewrite_prompt(turn, conv, resolve_ptkb(turn, conv, Strategy("none")), "none")
        assert not any(p.statement in prompt for p in conv.ptkb)


@pytest.mark.parametrize("shots", [0, 1, 3, 5])
def test_icl_example_count(toy_dataset, shots):
    conv, turn = _souvenir(toy_dataset)
    ref = _ref(MockBackend(), examples=toy_dataset.icl_examples)
    assert ref.selection_prompt(turn, conv, shots).count("### Example") == shots
    assert ref.rewrite_prompt(turn, conv, conv.ptkb, "sar", shots).count("### Example") == shots
    # STR rewrite stage carries examples only when asked to
    assert ref.rewrite_prompt(turn, conv, conv.ptkb[:1], "str", shots).count("### Example") == 0
    both = _ref(MockBackend(), examples=toy_dataset.icl_examples, icl_both_stages=True)
    assert both.rewrite_prompt(turn, conv, conv.ptkb[:1], "str", shots).count("### Example") == shots


def test_too_few_examples(toy_dataset):
    conv, turn = _souvenir(toy_dataset)
    with pytest.raises(ValueError, match="5-shot"):
        _ref(MockBackend(), examples=toy_dataset.icl_examples[:2]).selection_prompt(turn, conv, 5)


def test_history_responses_flag(toy_dataset):
    conv, turn = _souvenir(toy_dataset)
    resp = conv.turns[0].canonical_response
    assert resp in _ref(MockBackend()).rewrite_prompt(turn, conv, [], "none")
    assert resp not in _ref(MockBackend(), include_responses=False).rewrite_prompt(turn, conv, [], "none")


def test_select_ptkb_parse_contract():
    conv = Conversation("c", "", tuple(PtkbEntry(f"c:{i}", f"s{i}") for i in range(1, 6)), (Turn("c-1", "q"),))
    turn = conv.turns[0]
    assert _ref(Scripted("1,3")).select_ptkb(turn, conv, 0, GenerationParams()) == ["c:1", "c:3"]
    assert _ref(Scripted("none")).select_ptkb(turn, conv, 0, GenerationParams()) == []
    assert _ref(Scripted("2, 9")).select_ptkb(turn, conv, 0, GenerationParams()) == ["c:2"]
    assert _ref(Scripted("no idea")).select_ptkb(turn, conv, 0, GenerationParams()) == []
    with pytest.raises(ValueError):
        _ref(Scripted("1")).select_ptkb(turn, Conversation("e", "", (), (turn,)), 0, GenerationParams())


def test_reformulate_with_mock(toy_dataset):
    conv, turn = _souvenir(toy_dataset)
    subset = resolve_ptkb(turn, conv, Strategy("human"))
    bundle = _ref(MockBackend()).reformulate(turn, conv, subset, "human", GenerationParams(seed=4))
    assert len(bundle.rewrites) == 5
    for r in bundle.rewrites:
        assert "souvenir" in r.lower()
        assert "crystal" in r.lower() or "antique" in r.lower() or "glassware" in r.lower()
    assert bundle.selected_ptkb_ids == ("1-1:1",)
    assert bundle.provenance["seed"] == 4 and bundle.provenance["template_hash"]


def test_reformulate_counts_and_errors(toy_dataset):
    conv, turn = _souvenir(toy_dataset)
    three = "1. a\n2. b\n3. c\nResponse: r"
    assert len(_ref(Scripted(three)).reformulate(turn, conv, [], "none", GenerationParams()).rewrites) == 3
    seven = "\n".join(f"{i}. q{i}" for i in range(1, 8))
    assert len(_ref(Scripted(seven)).reformulate(turn, conv, [], "none", GenerationParams()).rewrites) == 5
    with pytest.raises(ReformulationError) as err:
        _ref(Scripted("Response: only")).reformulate(turn, conv, [], "none", GenerationParams())
    assert err.value.raw == "Response: only"


def test_sar_claimed_selection(toy_dataset):
    conv, turn = _souvenir(toy_dataset)
    b = _ref(Scripted("Selected: 1, 4\n1. q\nResponse: r")).reformulate(turn, conv, conv.ptkb, "sar", GenerationParams())
    assert b.selected_ptkb_ids == ("1-1:1", "1-1:4")
    b = _ref(Scripted("1. q\nResponse: r")).reformulate(turn, conv, conv.ptkb, "sar", GenerationParams())
    assert b.selected_ptkb_ids == ()


def test_oracle_candidates():
    turn = TEN.turns[0]
    cands, failed = _ref(MockBackend()).oracle_candidates(turn, TEN, GenerationParams())
    assert [pid for pid, _ in cands] == [p.ptkb_id for p in TEN.ptkb]
    cands, failed = _ref(Scripted("1. q", fail_on=("Statement number 4.",))).oracle_candidates(
        turn, TEN, GenerationParams())
    assert len(cands) == 9 and [pid for pid, _ in failed] == ["9-1:4"]
    single = Conversation("s", "", (PtkbEntry("s:1", "x y"),), (Turn("s-1", "q"),))
    assert len(_ref(MockBackend()).oracle_candidates(single.turns[0], single, GenerationParams())[0]) == 1
    with pytest.raises(ReformulationError):
        _ref(Scripted("1. q", fail_on=("Statement",))).oracle_candidates(turn, TEN, GenerationParams())


def test_gateway_call_counts(toy_dataset):
    conv, turn = _souvenir(toy_dataset)
    for kind, want in [("str", 2), ("sar", 1), ("none", 1), ("human", 1), ("use_all", 1)]:
        gw = Gateway(MockBackend())
        Reformulator(gw).run_strategy(Strategy(kind), turn, conv, GenerationParams(seed=1))
        assert gw.calls == want, kind
    gw = Gateway(MockBackend())
    Reformulator(gw).oracle_candidates(turn, conv, GenerationParams(seed=1))
    assert gw.calls == len(conv.ptkb)


def test_compose_query():
    b = RewriteBundle("t", ("a", "b"), "c")
    assert compose_query(b, "sparse") == "a b c"
    assert compose_query(b, "dense") == "a b"
    assert compose_query(RewriteBundle("t", ("a", "b"), ""), "sparse") == "a b"


def test_bundle_invariants_and_json():
    with pytest.raises(ValueError):
        RewriteBundle("t", (), "")
    with pytest.raises(ValueError):
        RewriteBundle("t", tuple("abcdef"), "")
    b = RewriteBundle("t", ("a",), "r", ("x:1",), {"seed": 1})
    assert RewriteBundle.from_json(b.to_json()) == b


def test_templates_strict(tmp_path):
    t = PromptTemplates.load()
    with pytest.raises(KeyError, match="unresolved"):
        t.render("rewrite", history="h")
    for f in tmp_path.iterdir():
        f.unlink()
    src = PromptTemplates.load()
    for name, text in src.texts.items():
        (tmp_path / f"{name}.tmpl").write_text(text + ("{bogus}" if name == "rewrite" else ""))
    (tmp_path / "instructions.json").write_text("{}")
    with pytest.raises(ValueError, match="bogus"):
        PromptTemplates.load(tmp_path)


def test_format_ptkb_numbered():
    assert format_ptkb(["a", "b"]) == "1. a\n2. b"
    assert format_ptkb([]) == "(none)"


def test_prompts_for_makes_no_calls(toy_dataset):
    gw = Gateway(MockBackend())
    ref = Reformulator(gw, examples=toy_dataset.icl_examples)
    conv, turn = _souvenir(toy_dataset)
    stages = ref.prompts_for(Strategy("oracle"), turn, conv)
    assert len(stages) == 5 and gw.calls == 0
    assert ref.prompts_for(Strategy("sar", 3), turn, conv)[0][1].count("### Example") == 3
