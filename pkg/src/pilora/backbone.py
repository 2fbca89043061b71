"""A tiny frozen decoder-only transformer used as the loss surface for adapters."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from pilora import autodiff as ad
from pilora.autodiff import Tensor
from pilora.exceptions import ConfigError, DataError

if TYPE_CHECKING:
    from pilora.lora import AdapterSet

SITE_NAMES = ("q", "k", "v", "o", "ffn_up", "ffn_down")
INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 100
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def site_shape(self, name: str) -> tuple[int, int]:
        """(d_in, d_out) of the frozen linear map at a site."""
        if name == "ffn_up":
            return self.d_model, self.d_ff
        if name == "ffn_down":
            return self.d_ff, self.d_model
        if name in SITE_NAMES:
            return self.d_model, self.d_model
        raise ConfigError(f"unknown site name {name!r}")

    def all_sites(self) -> list[tuple[int, str]]:
        return [(layer, name) for layer in range(self.n_layers) for name in SITE_NAMES]


BACKBONE_PRESETS = {
    "desk": BackboneConfig(),
    "tiny": BackboneConfig(d_model=32, n_heads=4, d_ff=128),
}


class Backbone:
    """Frozen weights. Linear maps are stored as ``(d_in, d_out)`` so ``y = x @ W``.

    The LM head reuses the token embedding table.
    """

    def __init__(self, config: BackboneConfig, weights: dict[str, np.ndarray], rng_state: dict | None = None):
        self.config = config
        self.weights = {k: Tensor(v) for k, v in weights.items()}
        self.rng_state = rng_state

    def weight(self, layer: int, name: str) -> Tensor:
        return self.weights[f"layers.{layer}.{name}"]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.weights):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.weights[key].data).tobytes())
        return h.hexdigest()

    # -- checkpoint -----------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "config": asdict(self.config),
            "weights": {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for k, t in sorted(self.weights.items())},
            "rng_state": self.rng_state,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Backbone":
        doc = json.loads(text)
        config = BackboneConfig(**doc["config"])
        weights = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["weights"].items()}
        return cls(config, weights, doc.get("rng_state"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Backbone":
        return cls.from_json(Path(path).read_text())


def init_backbone(config: BackboneConfig) -> Backbone:
    """All weights ~ N(0, 0.02) from ``config.seed``; same seed, same bits."""
    rng = np.random.default_rng(config.seed)
    c = config
    weights = {
        "tok_emb": rng.normal(0.0, INIT_STD, (c.vocab_size, c.d_model)),
        "pos_emb": rng.normal(0.0, INIT_STD, (c.max_seq, c.d_model)),
    }
    for layer in range(c.n_layers):
        for name in SITE_NAMES:
            weights[f"layers.{layer}.{name}"] = rng.normal(0.0, INIT_STD, c.site_shape(name))
    return Backbone(config, weights, rng.bit_generator.state)


def check_ids(config: BackboneConfig, ids: np.ndarray, what: str = "token") -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[-1] > config.max_seq:
        raise DataError(f"sequence length {ids.shape[-1]} exceeds max_seq={config.max_seq}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DataError(f"{what} id out of range [0, {config.vocab_size})")
    return ids.astype(np.int64)


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> Tensor:
    m = _MASKS.get(T)
    if m is None:
        m = np.triu(np.full((T, T), -np.inf), k=1)
        _MASKS[T] = m
    return Tensor(m)


def forward(model: Backbone, tokens, adapters: "AdapterSet | None" = None, leaves=None) -> Tensor:
    """Logits of shape ``(B, T, vocab)``.

    ``leaves`` maps a site to the ``(A, B)`` tensors to use there; when absent
    they come from ``adapters.leaves()`` (unscaled).
    """
    c = model.config
    ids = check_ids(c, tokens)
    Bsz, T = ids.shape
    if leaves is None and adapters is not None:
        leaves = adapters.leaves()
    leaves = leaves or {}

    def site(x: Tensor, layer: int, name: str) -> Tensor:
        y = ad.matmul(x, model.weight(layer, name))
        pair = leaves.get((layer, name))
        if pair is not None:
            A, B = pair
            delta = ad.matmul(ad.matmul(x, ad.transpose(A, (1, 0))), ad.transpose(B, (1, 0)))
            y = ad.add(y, delta)
        return y

    tok = model.weights["tok_emb"]
    x = ad.add(ad.embed(tok, ids), ad.embed(model.weights["pos_emb"], np.arange(T)))
    mask = _causal_mask(T)
    H, dh = c.n_heads, c.head_dim
    inv_sqrt = 1.0 / math.sqrt(dh)

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (Bsz, T, H, dh)), (0, 2, 1, 3))

    for layer in range(c.n_layers):
        h = ad.layernorm(x)
        q = heads(site(h, layer, "q"))
        k = heads(site(h, layer, "k"))
        v = heads(site(h, layer, "v"))
        att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        att = ad.softmax(ad.add(att, mask))
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (Bsz, T, c.d_model))
        x = ad.add(x, site(ctx, layer, "o"))
        h = ad.layernorm(x)
        x = ad.add(x, site(ad.gelu(site(h, layer, "ffn_up")), layer, "ffn_down"))
    # tied head on the raw residual stream
    return ad.matmul(x, ad.transpose(tok, (1, 0)))


def forward_loss(model: Backbone, tokens, targets, adapters: "AdapterSet | None" = None, leaves=None) -> Tensor:
    """Mean next-token cross-entropy; ``targets`` of -1 are ignored (prompt/padding)."""
    ids = check_ids(model.config, tokens)
    tg = np.asarray(targets, dtype=np.int64)
    if tg.ndim == 1:
        tg = tg[None, :]
    if tg.shape != ids.shape:
        raise DataError(f"targets shape {tg.shape} differs from tokens shape {ids.shape}")
    valid = tg[tg != -1]
    if valid.size and (valid.min() < 0 or valid.max() >= model.config.vocab_size):
        raise DataError(f"target id out of range [0, {model.config.vocab_size})")
    logits = forward(model, ids, adapters, leaves)
    return ad.cross_entropy(logits, tg)
