import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_shapes, edit_distance, fill, level_order, shapes
from pilora.exceptions import StructureError, TreeValidationError
from pilora.mdt import (
    MdtNode,
    MdtTree,
    Triplet,
    breadth_first_decode,
    breadth_first_encode,
    check_valid,
    decision_paths,
    evaluate_trees,
    grouping_of,
    levenshtein,
    levenshtein_ratio,
    ng_lr,
    preorder_decode,
    preorder_encode,
    tree_metrics,
    tree_tokens,
    triplet_prf,
    validate,
)

T = lambda s, r, o: (s, r, o)  # noqa: E731
C1 = MdtNode("C", [T("patient", "clinical manifestations", "fever")])
C2 = MdtNode("C", [T("child", "basic situation", "asthma")])
D1 = MdtNode("D", [T("patient", "therapeutic drugs", "aspirin")])
D2 = MdtNode("D", [T("patient", "treatment plan", "rest")])
D3 = MdtNode("D", [T("patient", "prohibited drugs", "codeine")])
D2b = MdtNode("D", [T("patient", "treatment plan", "surgery")])


def test_minimal_tree_valid():
    assert validate(MdtTree([D1])) == []


def test_condition_leaf_violation():
    v = validate(MdtTree([C1]))
    assert v and any("condition leaf" in x for x in v)


def test_logical_rel_rule():
    two = MdtNode("D", [T("patient", "therapeutic drugs", "aspirin"), T("patient", "treatment plan", "rest")], "null")
    assert validate(MdtTree([two]))
    one_and = MdtNode("D", [T("patient", "therapeutic drugs", "aspirin")], "and")
    assert validate(MdtTree([one_and]))
    assert validate(MdtTree([MdtNode("D", [], "null")]))


def test_unknown_relation_and_role():
    assert validate(MdtTree([MdtNode("D", [T("patient", "side effects", "rash")])]))
    assert validate(MdtTree([MdtNode("X", [T("patient", "treatment plan", "rest")])]))


def test_decision_with_children_is_violation():
    assert validate(MdtTree([D1, D2, D3]))


def test_check_valid_raises():
    with pytest.raises(TreeValidationError):
        check_valid(MdtTree([C1]))


def test_triplet_normalisation():
    assert Triplet("  patient ", "Treatment  Plan", "rest") == Triplet("patient", "treatment plan", "rest")


def test_small_codecs():
    t = preorder_decode([C1, D1, D2])
    assert t.children() == [(1, 2), None, None]
    assert breadth_first_encode(t) == [C1, D1, D2]
    assert preorder_decode([D1]).nodes == (D1,)
    assert breadth_first_encode(MdtTree([D1])) == [D1]


def test_left_nested_five():
    t = preorder_decode([C1, C2, D1, D2, D3])
    assert preorder_encode(t) == [C1, C2, D1, D2, D3]
    assert breadth_first_encode(t) == [C1, C2, D3, D1, D2]


@pytest.mark.parametrize("roles", [["C", "D"], ["D", "D"], ["C", "C", "D"], ["C", "D", "D", "D"]])
def test_bad_role_patterns(roles):
    nodes = [C1 if r == "C" else D1 for r in roles]
    with pytest.raises(StructureError) as exc:
        preorder_decode(nodes)
    assert exc.value.position is not None
    with pytest.raises(StructureError):
        breadth_first_decode(nodes)


def test_shape_counts():
    assert [len(shapes(n)) for n in (1, 3, 5, 7)] == [1, 1, 2, 5]


def test_exhaustive_roundtrips():
    rng = random.Random(0)
    for shape in all_shapes(7):
        for _ in range(50):
            tree, nested = fill(shape, rng)
            assert validate(tree) == []
            assert preorder_decode(preorder_encode(tree)) == tree
            bfs = breadth_first_encode(tree)
            assert bfs == level_order(nested)
            assert breadth_first_decode(bfs) == tree


def test_tree_json_roundtrip():
    tree, _ = fill(shapes(7)[2], random.Random(1))
    for order in ("preorder", "bfs"):
        doc = json.loads(tree.to_json(order))
        assert doc["order"] == order
        assert MdtTree.from_dict(doc) == tree


def test_prf_examples():
    g = [T("a", "treatment plan", "x"), T("b", "treatment plan", "y"), T("c", "treatment plan", "z")]
    assert triplet_prf(g, g) == (1.0, 1.0, 1.0)
    assert triplet_prf([T("q", "treatment plan", "q")], g) == (0.0, 0.0, 0.0)
    gold4 = g + [T("d", "treatment plan", "w")]
    p, r, f = triplet_prf([g[0], T("q", "treatment plan", "q")], gold4)
    assert (p, r) == (0.5, 0.25) and f == pytest.approx(1 / 3)
    assert triplet_prf([], []) == (1.0, 1.0, 1.0)
    assert triplet_prf([], g)[0] == 0.0
    assert triplet_prf(g + g, g) == (1.0, 1.0, 1.0)


def test_ng_lr_examples():
    tree = preorder_decode([C1, D1, D2])
    gold = grouping_of(tree)
    assert ng_lr(gold, gold) == 1.0
    other = grouping_of(preorder_decode([C2, D3, D2b]))
    assert ng_lr(other, gold) == 0.0
    two = MdtNode("D", [T("patient", "therapeutic drugs", "aspirin"), T("patient", "treatment plan", "rest")], "and")
    flipped = MdtNode("D", two.triplets, "or")
    a, b = grouping_of(preorder_decode([C1, two, D3])), grouping_of(preorder_decode([C1, flipped, D3]))
    sym = lambda g: [(rel, tuple(sorted(t.sort_key() for t in ts))) for ts, rel in g]  # noqa: E731
    assert ng_lr(b, a) == pytest.approx(1 - edit_distance(sym(b), sym(a)) / 3)
    assert ng_lr(b, a) == pytest.approx(2 / 3)


@given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
@settings(max_examples=200)
def test_levenshtein_matches_oracle(a, b):
    assert levenshtein(a, b) == edit_distance(a, b)
    r = levenshtein_ratio(a, b)
    assert 0.0 <= r <= 1.0


def test_tree_metrics_examples():
    gold = preorder_decode([C1, D1, D2])
    assert tree_metrics(gold, gold) == (1.0, 1.0, 1.0)
    disjoint = preorder_decode([C2, D3, D2b])
    acc, dp, _ = tree_metrics(disjoint, gold)
    assert (acc, dp) == (0.0, 0.0)
    pred = preorder_decode([C1, D1, D2b])
    acc, dp, lr = tree_metrics(pred, gold)
    assert (acc, dp) == (0.0, 0.5)
    assert lr == pytest.approx(1 - edit_distance(tree_tokens(pred), tree_tokens(gold)) / 6)


def test_decision_paths_follow_yes_left():
    paths = decision_paths(preorder_decode([C1, D1, D2]))
    assert paths[0][0][1] == "Y" and paths[0][-1] == D1.canonical()
    assert paths[1][0][1] == "N" and paths[1][-1] == D2.canonical()


def test_triplet_order_invariance():
    two = [T("patient", "treatment plan", "rest"), T("patient", "therapeutic drugs", "aspirin")]
    a = preorder_decode([C1, MdtNode("D", two, "and"), D3])
    b = preorder_decode([C1, MdtNode("D", two[::-1], "and"), D3])
    assert tree_metrics(a, b) == (1.0, 1.0, 1.0)


def test_metric_bounds_on_random_pairs():
    rng = random.Random(3)
    trees = [fill(s, rng)[0] for s in all_shapes(7) for _ in range(6)]
    for _ in range(300):
        p, g = rng.choice(trees), rng.choice(trees)
        acc, dp, lr = tree_metrics(p, g)
        assert 0 <= acc <= 1 and 0 <= dp <= 1 and 0 <= lr <= 1
        assert lr >= acc
        assert (acc == 1.0) == (dp == 1.0 and lr == 1.0) == (p.canonical() == g.canonical())


def test_tree_metrics_reject_invalid():
    with pytest.raises(TreeValidationError):
        tree_metrics(MdtTree([C1]), MdtTree([D1]))


def test_evaluate_trees_counts_invalid_as_zero():
    gold = [preorder_decode([C1, D1, D2]), MdtTree([D3])]
    rep = evaluate_trees([gold[0], None], gold)
    d = rep.as_dict()
    assert d["Tree_Acc"] == 0.5 and d["n_invalid"] == 1 and d["n"] == 2
    assert d["Prec"] == 1.0 and d["Rec"] == pytest.approx(3 / 4)
