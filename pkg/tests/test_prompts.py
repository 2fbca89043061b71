import re
from pathlib import Path

import pytest

from pilora.datagen import GenSpec, gen_corpus
from pilora.exceptions import ParseError, StructureError, TreeValidationError
from pilora.mdt import MdtNode, MdtTree, grouping_of
from pilora.prompts import (
    SUBTASKS,
    CotPayload,
    Diagnostic,
    TruncationError,
    end2end_run,
    gold_generator,
    parse,
    pipeline_run,
    prompt_for,
    render,
    render_response,
    template,
)

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(GenSpec(n_trees=120))


def payload_for(subtask, tree):
    if subtask == "triplets":
        return tree.triplets()
    if subtask == "grouping":
        return grouping_of(tree)
    if subtask == "cot-gen-3":
        return CotPayload(tree.triplets(), tree)
    return tree


@pytest.mark.parametrize("subtask", SUBTASKS)
@pytest.mark.parametrize("kind", ["prompt", "response"])
def test_templates_match_golden_text(subtask, kind):
    golden = (GOLDEN / f"{subtask}.{kind}.txt").read_text()
    assert template(subtask, kind) == re.sub(r"\{(\w+)\}", r"[\1]", golden)


def test_triplet_prompt_lists_six_relations():
    out = render("triplets", {"Text": "T"})
    assert (
        'The triplet relationship defines a total of 6 categories: "clinical manifestations", "therapeutic drugs", '
        '"usage and dosage", "Treatment plan", "Prohibited drugs", "Basic situation"' in out
    )
    assert "\n\nT\n\n" in out


def test_missing_slot_named():
    with pytest.raises(KeyError, match=r"\[triplets\]"):
        render("grouping", {"Text": "x"})


@pytest.mark.parametrize("subtask", SUBTASKS)
def test_no_placeholders_left(subtask, corpus):
    ex = corpus.train[5]
    prompt = prompt_for(subtask, ex.text, triplets=ex.tree.triplets(), grouping=grouping_of(ex.tree))
    assert "[Text]" not in prompt and "[triplets]" not in prompt and "[nodes]" not in prompt


def test_single_node_response_has_one_line():
    tree = MdtTree([MdtNode("D", [("patient", "treatment plan", "rest")])])
    out = render_response("assembling", tree)
    assert out.count("Node 1:") == 1 and "Node 2" not in out
    assert "Node 1: role=D; logical_rel=null; triplets=[(patient, treatment plan, rest)]" in out


@pytest.mark.parametrize("subtask", SUBTASKS)
def test_roundtrip_over_corpus(subtask, corpus):
    for ex in corpus.train:
        payload = payload_for(subtask, ex.tree)
        parsed = parse(subtask, render_response(subtask, payload))
        assert parsed.subtask == subtask
        if subtask == "cot-gen-3":
            assert parsed.payload.tree == ex.tree and list(parsed.payload.triplets) == list(payload.triplets)
        else:
            assert parsed.payload == payload if subtask == "assembling" else list(parsed.payload) == list(payload)


def test_missing_field_is_syntax_error_on_that_line(corpus):
    tree = next(ex.tree for ex in corpus.train if len(ex.tree) == 3)
    text = render_response("assembling", tree)
    lines = text.split("\n")
    bad_line = next(i for i, l in enumerate(lines) if l.startswith("Node 2"))
    lines[bad_line] = lines[bad_line].replace("logical_rel=null; ", "")
    with pytest.raises(ParseError) as exc:
        parse("assembling", "\n".join(lines))
    assert exc.value.line == bad_line + 1
    assert "logical_rel" in str(exc.value)


def test_unclosable_node_list_is_structural_error():
    trip = ("patient", "clinical manifestations", "fever")
    dec = ("patient", "treatment plan", "rest")
    lines = [
        "The diagnosis and treatment decision tree extracted based on the given guideline text is as follows:",
        "",
        f"Node 1: role=C; logical_rel=null; triplets=[({', '.join(trip)})]",
        "",
        f"Node 2: role=C; logical_rel=null; triplets=[({', '.join(trip)})]",
        "",
        f"Node 3: role=D; logical_rel=null; triplets=[({', '.join(dec)})]",
    ]
    with pytest.raises(StructureError):
        parse("assembling", "\n".join(lines))


def test_semantic_error_distinct_from_syntax():
    text = render_response("assembling", MdtTree([MdtNode("D", [("patient", "treatment plan", "rest")])]))
    text = text.replace("triplets=[(patient, treatment plan, rest)]", "triplets=[(patient, treatment plan, rest), (patient, therapeutic drugs, aspirin)]")
    with pytest.raises(TreeValidationError):
        parse("assembling", text)


def test_non_contiguous_indices_rejected(corpus):
    tree = next(ex.tree for ex in corpus.train if len(ex.tree) == 3)
    text = render_response("assembling", tree).replace("Node 3:", "Node 4:")
    with pytest.raises(ParseError):
        parse("assembling", text)


def test_teacher_forced_pipeline_returns_gold(corpus):
    gold = {ex.text: ex.tree for ex in corpus.test}
    gen = gold_generator(gold)
    for text, tree in gold.items():
        assert pipeline_run(gen, text) == tree
        assert end2end_run(gen, text) == tree


def test_corrupted_generation_gives_diagnostic(corpus):
    ex = corpus.test[0]
    res = end2end_run(lambda prompt: "Node 1: garbage", ex.text)
    assert isinstance(res, Diagnostic) and not res and res.raw == "Node 1: garbage" and res.stage == "cot-gen-3"


def test_truncation():
    def gen(prompt):
        raise TruncationError("The triples")

    with pytest.raises(TruncationError):
        end2end_run(gen, "x")
    res = pipeline_run(gen, "x", truncation="diagnose")
    assert isinstance(res, Diagnostic) and res.stage == "triplets"
