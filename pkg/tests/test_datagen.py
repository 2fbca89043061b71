import numpy as np
import pytest

from pilora.datagen import Corpus, GenSpec, gen_corpus, realize_text, sample_tree
from pilora.exceptions import ConfigError, DataError
from pilora.mdt import MdtNode, MdtTree, validate
from pilora.prompts import parse, render_response
from pilora.tokenizer import BOS, EOS, SEP, Tokenizer, build_example


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus()


def test_default_sizes(corpus):
    assert (len(corpus.train), len(corpus.dev), len(corpus.test)) == (400, 50, 50)


def test_deterministic(corpus):
    assert gen_corpus().checksum() == corpus.checksum()
    assert gen_corpus(GenSpec(seed=8)).checksum() != corpus.checksum()


def test_all_trees_valid_and_distinct(corpus):
    exs = corpus.train + corpus.dev + corpus.test
    assert all(validate(e.tree) == [] for e in exs)
    assert len({e.tree.canonical() for e in exs}) == len(exs)
    assert max(e.tree.depth() for e in exs) <= 3


def test_depth_one_gives_single_decisions():
    c = gen_corpus(GenSpec(max_depth=1, n_trees=30))
    assert all(len(e.tree) == 1 and e.tree.nodes[0].role == "D" for e in c.train + c.dev + c.test)


def test_single_decision_sentence_has_no_if():
    t = MdtTree([MdtNode("D", [("patient", "therapeutic drugs", "aspirin")])])
    assert realize_text(t) == "patient takes aspirin."


def test_text_injective_over_1000_trees():
    rng = np.random.default_rng(0)
    spec = GenSpec(n_objects=8, n_subjects=4)
    trees = {sample_tree(rng, spec).canonicalized() for _ in range(1000)}
    texts = {realize_text(t) for t in trees}
    assert len(texts) == len(trees)


def test_text_length_budget(corpus):
    # 40 characters per triplet; measured maximum on the default corpus is about 32.4
    for e in corpus.train + corpus.dev + corpus.test:
        assert len(e.text) <= 40 * sum(len(n.triplets) for n in e.tree.nodes)


def test_gold_parse_consistency(corpus):
    for e in corpus.train:
        assert parse("assembling", render_response("assembling", e.tree)).payload == e.tree


def test_jsonl_roundtrip(corpus, tmp_path):
    corpus.save(tmp_path)
    assert Corpus.load(tmp_path).checksum() == corpus.checksum()
    first = (tmp_path / "train.jsonl").read_text().splitlines()[0]
    assert first.startswith("{") and '"text"' in first and '"tree"' in first
    (tmp_path / "dev.jsonl").unlink()
    with pytest.raises(DataError):
        Corpus.load(tmp_path)


@pytest.mark.parametrize(
    "kw",
    [{"max_depth": 5}, {"max_depth": 0}, {"split": (0.5, 0.2, 0.2)}, {"triplets_per_node": (0, 2)}, {"n_trees": 0}],
)
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        GenSpec(**kw)


def test_spec_dict_roundtrip():
    spec = GenSpec(seed=3, split=(0.6, 0.2, 0.2))
    assert GenSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        GenSpec.from_dict({"colour": 1})


def test_tokenizer_roundtrip(corpus):
    tok = Tokenizer.for_corpus()
    for e in corpus.train[:50]:
        for s in (e.text, render_response("assembling", e.tree)):
            ids = tok.encode(s)
            assert tok.decode(ids) == s
            assert len(ids) < len(s)
    assert Tokenizer.from_json(tok.to_json()).tokens == tok.tokens


def test_build_example_masks_prompt():
    tok = Tokenizer.for_corpus()
    x, y = build_example(tok, "ab", "cd")
    assert x[0] == BOS and x[3] == SEP
    assert list(y[:3]) == [-1, -1, -1] and y[-1] == EOS
    assert tok.decode(y[3:-1]) == "cd"
