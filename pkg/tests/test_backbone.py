import math

import numpy as np
import pytest

from pilora import autodiff as ad
from pilora.backbone import Backbone, BackboneConfig, forward, forward_loss, init_backbone
from pilora.exceptions import ConfigError, DataError
from pilora.lora import attach


@pytest.fixture(scope="module")
def small():
    return init_backbone(BackboneConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq=32))


def test_same_seed_same_checksum():
    cfg = BackboneConfig(vocab_size=40, d_model=16, n_layers=1, n_heads=2, d_ff=32)
    assert init_backbone(cfg).checksum() == init_backbone(cfg).checksum()
    assert init_backbone(cfg).checksum() != init_backbone(BackboneConfig(**{**cfg.__dict__, "seed": 1})).checksum()


def test_head_dim():
    assert BackboneConfig(d_model=32, n_heads=4).head_dim == 8


@pytest.mark.parametrize("kw", [{"d_model": 30, "n_heads": 4}, {"n_layers": 0}, {"vocab_size": 0}])
def test_invalid_config_rejected(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**kw)


def test_untrained_loss_near_log_vocab(small):
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 64, (4, 16))
    with ad.Graph():
        loss = forward_loss(small, ids, rng.integers(0, 64, (4, 16))).item()
    assert math.log(64) - 0.5 <= loss <= math.log(64) + 0.5


def test_zero_adapters_match_bare_model(small):
    ids = np.random.default_rng(1).integers(0, 64, (2, 10))
    adapters = attach(small, small.config.all_sites(), rank=4)
    with ad.Graph():
        bare = forward(small, ids).data
        adapted = forward(small, ids, adapters=adapters).data
    np.testing.assert_array_equal(bare, adapted)


def test_causal_mask(small):
    ids = np.random.default_rng(2).integers(0, 64, (1, 12))
    with ad.Graph():
        base = forward(small, ids).data
    for t in range(11):
        for k in (1, 3):
            if t + k >= 12:
                continue
            other = ids.copy()
            other[0, t + k] = (other[0, t + k] + 7) % 64
            with ad.Graph():
                out = forward(small, other).data
            np.testing.assert_array_equal(out[0, : t + 1], base[0, : t + 1])


def test_frozen_weights_get_no_grad(small):
    ids = np.random.default_rng(3).integers(0, 64, (2, 8))
    adapters = attach(small, [(0, "q"), (1, "ffn_down")], rank=2)
    adapters.modules[(0, "q")].B.data += 0.1
    with ad.Graph():
        ad.backward(forward_loss(small, ids, ids, adapters=adapters))
    assert all(w.grad is None for w in small.weights.values())
    assert adapters.modules[(0, "q")].A.grad is not None


def test_batch_permutation_equivariance(small):
    rng = np.random.default_rng(4)
    ids, tg = rng.integers(0, 64, (4, 8)), rng.integers(0, 64, (4, 8))
    perm = [2, 0, 3, 1]
    with ad.Graph():
        a = forward_loss(small, ids, tg).item()
        b = forward_loss(small, ids[perm], tg[perm]).item()
    assert a == pytest.approx(b, rel=1e-13)


def test_out_of_range_ids_rejected(small):
    with pytest.raises(DataError):
        forward_loss(small, np.array([[1, 64]]), np.array([[1, 2]]))
    with pytest.raises(DataError):
        forward_loss(small, np.zeros((1, 40), dtype=int), np.zeros((1, 40), dtype=int))


def test_checkpoint_roundtrip_is_byte_stable(small, tmp_path):
    small.save(tmp_path / "a.json")
    again = Backbone.load(tmp_path / "a.json")
    again.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert again.checksum() == small.checksum()
