import numpy as np
import pytest

from pilora.backbone import BackboneConfig
from pilora.datagen import GenSpec, gen_corpus
from pilora.exceptions import DataError
from pilora.pretrain import PretrainSpec, load_checkpoint, load_shipped, pretrain, warmup_examples, write_checkpoint
from pilora.tokenizer import Tokenizer


@pytest.fixture(scope="module")
def tok():
    return Tokenizer.for_corpus()


def test_warmup_examples_skip_excluded_trees(tok):
    spec = PretrainSpec(n_trees=30)
    every = warmup_examples(spec, tok)
    held = gen_corpus(GenSpec(seed=spec.corpus_seed, n_trees=30))
    exclude = {held.train[0].tree.canonical()}
    fewer = warmup_examples(spec, tok, exclude)
    assert len(fewer) == len(every) - 3


def test_warmup_corpus_differs_from_default(tok):
    spec = PretrainSpec()
    default = gen_corpus()
    warm = gen_corpus(GenSpec(seed=spec.corpus_seed, n_trees=spec.n_trees))
    ours = {e.tree.canonical() for e in default.train + default.dev + default.test}
    assert len(ours) == 500
    assert warm.checksum() != default.checksum()


def test_tiny_pretrain_freezes_and_roundtrips(tok, tmp_path):
    config = BackboneConfig(vocab_size=len(tok), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq=256)
    spec = PretrainSpec(n_trees=10, steps=30, batch_size=4, warmup=5)
    model = pretrain(config, tok, spec)
    assert all(not w.requires_grad and w.grad is None for w in model.weights.values())
    path = tmp_path / "m.json.gz"
    write_checkpoint(model, path)
    again = load_checkpoint(path)
    for k, w in model.weights.items():
        np.testing.assert_array_equal(w.data, again.weights[k].data)
    first = path.read_bytes()
    write_checkpoint(again, path)
    assert path.read_bytes() == first


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "none.json.gz")


def test_shipped_checkpoint_loads(tok):
    model = load_shipped()
    assert model.config.vocab_size == len(tok)
    assert model.config.n_layers == 4 and model.config.d_model == 64
