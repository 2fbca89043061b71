import numpy as np
import pytest

from pilora import autodiff as ad
from pilora.backbone import BackboneConfig, forward, init_backbone
from pilora.decoding import LMGenerator, greedy, logits
from pilora.exceptions import ConfigError, DataError
from pilora.lora import attach
from pilora.prompts import TruncationError
from pilora.tokenizer import EOS, Tokenizer


@pytest.fixture(scope="module")
def model():
    return init_backbone(BackboneConfig(vocab_size=30, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq=24))


@pytest.fixture(scope="module")
def adapters(model):
    a = attach(model, [(0, "q"), (1, "ffn_up"), (1, "o")], rank=2, seed=0)
    rng = np.random.default_rng(1)
    for m in a.modules.values():
        m.B.data = rng.normal(0, 0.3, m.B.shape)
    return a


def naive_greedy(model, ids, adapters, limit):
    ids = list(ids)
    new = []
    while len(ids) < limit:
        with ad.Graph():
            nxt = int(forward(model, np.array([ids]), adapters=adapters).data[0, -1].argmax())
        if nxt == EOS:
            return new, True
        new.append(nxt)
        ids.append(nxt)
    return new, False


def test_logits_match_forward(model, adapters):
    ids = np.random.default_rng(0).integers(0, 30, (3, 11))
    with ad.Graph():
        ref = forward(model, ids, adapters=adapters).data
    np.testing.assert_allclose(logits(model, ids, adapters), ref, rtol=1e-9, atol=1e-12)


def test_cached_greedy_matches_recompute(model, adapters):
    rng = np.random.default_rng(2)
    prompts = [list(rng.integers(4, 30, n)) for n in (3, 5, 5, 8)]
    got = greedy(model, prompts, adapters)
    for p, g in zip(prompts, got):
        assert g == naive_greedy(model, p, adapters, model.config.max_seq)


def test_inactive_adapters_are_ignored(model, adapters):
    snap = adapters.snapshot()
    for m in snap.modules.values():
        m.active = False
    ids = np.arange(4, 12)[None]
    np.testing.assert_allclose(logits(model, ids, snap), logits(model, ids), rtol=0, atol=0)


def test_max_new_caps_output(model):
    for new, finished in greedy(model, [[5, 6, 7]], max_new=2):
        assert len(new) <= 2
        assert finished or len(new) == 2


def test_generator_raises_on_truncation():
    tok = Tokenizer(["a", "b"])
    model = init_backbone(BackboneConfig(vocab_size=len(tok), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq=24))
    gen = LMGenerator(model, tok, max_new=1)
    gen.prefetch(["ab"])
    text, finished = gen._cache["ab"]
    if finished:
        assert gen("ab") == text == ""
    else:
        with pytest.raises(TruncationError):
            gen("ab")


def test_bad_inputs(model):
    with pytest.raises(DataError):
        greedy(model, [[3, 99]])
    with pytest.raises(DataError):
        greedy(model, [list(range(4, 29))])
    with pytest.raises(ConfigError):
        greedy(model, [[3, 4]], max_new=0)
