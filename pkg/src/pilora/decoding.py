"""Greedy decoding with a key/value cache, in plain numpy (no tape)."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from pilora.backbone import Backbone, check_ids
from pilora.exceptions import ConfigError
from pilora.lora import AdapterSet
from pilora.prompts import TruncationError
from pilora.tokenizer import BOS, EOS, SEP, Tokenizer

_C = math.sqrt(2.0 / math.pi)


def _ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_C * x * (1.0 + 0.044715 * x * x)))


class _Weights:
    """Backbone matrices with the active adapter deltas folded in."""

    def __init__(self, model: Backbone, adapters: AdapterSet | None):
        self.config = model.config
        self.tok = model.weights["tok_emb"].data
        self.pos = model.weights["pos_emb"].data
        self.w = {}
        for layer, name in model.config.all_sites():
            W = model.weight(layer, name).data
            m = adapters.modules.get((layer, name)) if adapters is not None else None
            if m is not None and m.active:
                W = W + m.A.data.T @ m.B.data.T
            self.w[layer, name] = W


def _step(W: _Weights, ids: np.ndarray, start: int, cache: list) -> np.ndarray:
    """Run positions ``start .. start+T`` for every row; extend ``cache`` in place."""
    c = W.config
    Bsz, T = ids.shape
    H, dh = c.n_heads, c.head_dim
    x = W.tok[ids] + W.pos[start : start + T]
    total = start + T
    mask = np.triu(np.full((T, total), -np.inf), k=start + 1)
    for layer in range(c.n_layers):
        h = _ln(x)
        q = (h @ W.w[layer, "q"]).reshape(Bsz, T, H, dh).transpose(0, 2, 1, 3)
        k = (h @ W.w[layer, "k"]).reshape(Bsz, T, H, dh).transpose(0, 2, 1, 3)
        v = (h @ W.w[layer, "v"]).reshape(Bsz, T, H, dh).transpose(0, 2, 1, 3)
        if len(cache) > layer:
            pk, pv = cache[layer]
            k = np.concatenate([pk, k], axis=2)
            v = np.concatenate([pv, v], axis=2)
            cache[layer] = (k, v)
        else:
            cache.append((k, v))
        att = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + mask
        att = np.exp(att - att.max(-1, keepdims=True))
        att /= att.sum(-1, keepdims=True)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(Bsz, T, c.d_model)
        x = x + ctx @ W.w[layer, "o"]
        x = x + _gelu(_ln(x) @ W.w[layer, "ffn_up"]) @ W.w[layer, "ffn_down"]
    return x @ W.tok.T


def logits(model: Backbone, ids, adapters: AdapterSet | None = None) -> np.ndarray:
    """Full-sequence logits; matches :func:`pilora.backbone.forward` numerically."""
    ids = check_ids(model.config, ids)
    return _step(_Weights(model, adapters), ids, 0, [])


def greedy(
    model: Backbone,
    prompts: Sequence[Sequence[int]],
    adapters: AdapterSet | None = None,
    max_new: int | None = None,
) -> list[tuple[list[int], bool]]:
    """Greedy continuation of each id sequence until ``EOS``.

    Rows with the same prompt length are decoded together. Returns
    ``(new_ids, finished)`` per prompt; ``finished`` is False when the length
    limit was hit first.
    """
    if max_new is not None and max_new < 1:
        raise ConfigError(f"max_new must be >= 1, got {max_new}")
    W = _Weights(model, adapters)
    limit = model.config.max_seq
    for p in prompts:
        check_ids(model.config, p, "prompt token")
    out: list[tuple[list[int], bool] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    for plen, rows in groups.items():
        budget = limit - plen if max_new is None else min(max_new, limit - plen)
        ids = np.asarray([list(prompts[i]) for i in rows], dtype=np.int64)
        cache: list = []
        lg = _step(W, ids, 0, cache)[:, -1]
        new = [[] for _ in rows]
        done = np.zeros(len(rows), dtype=bool)
        pos = plen
        while True:
            nxt = lg.argmax(-1)
            for r, t in enumerate(nxt):
                if not done[r]:
                    if t == EOS:
                        done[r] = True
                    else:
                        new[r].append(int(t))
            if done.all() or len(new[0]) >= budget or pos >= limit:
                break
            lg = _step(W, nxt[:, None], pos, cache)[:, -1]
            pos += 1
        for r, i in enumerate(rows):
            out[i] = (new[r], bool(done[r]))
    return out  # type: ignore[return-value]


class LMGenerator:
    """Prompt string in, response string out; satisfies the runner's generator protocol.

    ``generate_many`` decodes a list of prompts in batches. A response that runs
    into the length limit raises :class:`TruncationError`.
    """

    def __init__(self, model: Backbone, tokenizer: Tokenizer, adapters: AdapterSet | None = None, max_new: int | None = None):
        self.model = model
        self.tokenizer = tokenizer
        self.adapters = adapters
        self.max_new = max_new
        self._cache: dict[str, tuple[str, bool]] = {}

    def _ids(self, prompt: str) -> list[int]:
        return [BOS] + self.tokenizer.encode(prompt) + [SEP]

    def prefetch(self, prompts: Sequence[str]) -> None:
        todo = [p for p in dict.fromkeys(prompts) if p not in self._cache]
        if not todo:
            return
        res = greedy(self.model, [self._ids(p) for p in todo], self.adapters, self.max_new)
        for p, (ids, finished) in zip(todo, res):
            self._cache[p] = (self.tokenizer.decode(ids), finished)

    def __call__(self, prompt: str) -> str:
        self.prefetch([prompt])
        text, finished = self._cache[prompt]
        if not finished:
            raise TruncationError(text)
        return text

    def generate_many(self, prompts: Sequence[str]) -> list[str]:
        self.prefetch(prompts)
        return [self(p) for p in prompts]
