import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pilora.datagen import GenSpec, gen_corpus
from pilora.estimators import PILoRASelector, Text2MDTExtractor
from pilora.exceptions import DataError

FAST = dict(backbone_preset="tiny", batch_size=4, micro_batch=4, stage1_max_steps=3, stage2_max_steps=3, validation_fraction=0.25)


@pytest.fixture(scope="module")
def xy():
    c = gen_corpus(GenSpec(n_trees=20))
    return [e.text for e in c.train], [e.tree for e in c.train]


def test_params_roundtrip():
    est = PILoRASelector(K=5, n_lora=3)
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(K=7).K == 7


def test_selector(xy):
    X, y = xy
    sel = PILoRASelector(n_lora=5, **FAST).fit(X, y)
    assert len(sel.allocation_) == 5
    assert sel.get_support().sum() == 5
    assert list(sel.get_support(indices=True)) == [i for i, s in enumerate(sel.sites_) if s in set(sel.allocation_)]
    assert sel.ranking_[:5] == sorted(sel.allocation_, key=sel.ranking_.index)
    assert sel.transform(sel.sites_) == [s for s in sel.sites_ if s in set(sel.allocation_)]
    assert sel.n_steps_ == 3


def test_selector_deterministic(xy):
    X, y = xy
    a = PILoRASelector(**FAST).fit(X, y)
    b = PILoRASelector(**FAST).fit(X, y)
    assert a.scores_ == b.scores_


def test_extractor(xy):
    X, y = xy
    est = Text2MDTExtractor(**FAST).fit(X, y)
    preds = est.predict(X[:2])
    assert len(preds) == 2
    metrics = est.evaluate(X[:2], y[:2])
    assert 0.0 <= metrics["Tree_Acc"] <= 1.0
    assert est.score(X[:2], y[:2]) == metrics["Tree_Acc"]
    assert np.isfinite(est.best_dev_loss_)


def test_unfitted():
    with pytest.raises(NotFittedError):
        PILoRASelector().get_support()
    with pytest.raises(NotFittedError):
        Text2MDTExtractor().predict(["x"])


def test_input_validation(xy):
    X, y = xy
    with pytest.raises(DataError):
        PILoRASelector(**FAST).fit(X[:3], y[:4])
    with pytest.raises(DataError):
        PILoRASelector(**FAST).fit("one text", y[:1])
    with pytest.raises(DataError):
        PILoRASelector(**FAST).fit(["", "b"], y[:2])
    with pytest.raises(DataError):
        PILoRASelector(**FAST).fit(X[:2], ["not a tree", y[0]])
    with pytest.raises(DataError):
        PILoRASelector(**{**FAST, "validation_fraction": 1.5}).fit(X, y)
