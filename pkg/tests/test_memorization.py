"""Learnability smoke tests: the desk backbone can memorize small sets."""

import numpy as np
import pytest

from pilora import autodiff as ad
from pilora import experiment as ex
from pilora.backbone import BackboneConfig, forward_loss, init_backbone
from pilora.datagen import gen_corpus
from pilora.decoding import LMGenerator
from pilora.lora import attach
from pilora.prompts import end2end_run
from pilora.tokenizer import Tokenizer
from pilora.training import Adam, TrainConfig, batch_gradients, eval_loss, pad_batch

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def setup():
    corpus = gen_corpus()
    tok = Tokenizer.for_corpus()
    return corpus, tok


def lora_fit(model, items, steps, lr, rank=8, batch=8):
    adapters = attach(model, model.config.all_sites(), rank=rank, seed=0)
    cfg = TrainConfig(lr=lr)
    opt = Adam(adapters.parameters(), cfg)
    rng = np.random.default_rng(0)
    for step in range(1, steps + 1):
        idx = rng.choice(len(items), min(batch, len(items)), replace=False)
        _, grads = batch_gradients(model, adapters, [items[i] for i in idx], micro=batch)
        g = {}
        for s, (gA, gB) in grads.items():
            m = adapters.modules[s]
            g[id(m.A)], g[id(m.B)] = gA, gB
        # short warm-up, then linear decay to zero
        opt.step(g, lr * min(1.0, step / 20) * (1 - (step - 1) / steps))
    return adapters


def test_lora_memorizes_fifty_examples(setup):
    corpus, tok = setup
    model = ex.load_backbone("desk-pretrained", len(tok))
    items = ex.encode_split(corpus.train[:50], tok)
    adapters = lora_fit(model, items, steps=500, lr=1e-2)
    loss = eval_loss(model, adapters, items)
    assert loss < 0.1, loss


def test_full_training_memorizes_fifty_examples(setup):
    corpus, tok = setup
    items = ex.encode_split(corpus.train[:50], tok)
    model = init_backbone(BackboneConfig(vocab_size=len(tok)))
    params = list(model.weights.values())
    for p in params:
        p.requires_grad = True
    opt = Adam(params, TrainConfig())
    rng = np.random.default_rng(0)
    loss = None
    for step in range(1, 2001):
        X, Y = pad_batch([items[i] for i in rng.choice(50, 8, replace=False)])
        for p in params:
            p.zero_grad()
        with ad.Graph():
            out = forward_loss(model, X, Y)
            ad.backward(out)
        opt.step({id(p): p.grad for p in params if p.grad is not None}, 3e-3 * min(1.0, step / 100))
        if step % 250 == 0:
            for p in params:
                p.requires_grad = False
            loss = eval_loss(model, None, items)
            for p in params:
                p.requires_grad = True
            if loss <= 0.1:
                break
    assert loss <= 0.1, loss


def test_memorized_example_decodes_to_gold(setup):
    corpus, tok = setup
    model = ex.load_backbone("desk-pretrained", len(tok))
    example = corpus.train[0]
    adapters = lora_fit(model, ex.encode_split([example], tok), steps=150, lr=1e-2, batch=1)
    tree = end2end_run(LMGenerator(model, tok, adapters), example.text)
    assert tree == example.tree
