"""Character-level tokenizer with whole-phrase tokens.

The fixed template chunks, grammar words and corpus entities each get a
single id; everything else falls back to single characters. Encoding is
greedy longest match, and ``decode(encode(s)) == s`` for any string over the
alphabet.
"""

from __future__ import annotations

import json
import string

import numpy as np

from pilora import datagen
from pilora.exceptions import DataError
from pilora.mdt import LOGICAL_RELS, RELATIONS
from pilora.prompts import SUBTASKS, _SLOT, _response_shape, template

SPECIALS = ("<pad>", "<bos>", "<sep>", "<eos>", "<unk>")
PAD, BOS, SEP, EOS, UNK = range(len(SPECIALS))
BASE_CHARS = string.ascii_lowercase + string.digits + " ,.;:=()[]_\n\"'CDI-"


def _template_chunks() -> list[str]:
    chunks = []
    for sub in SUBTASKS:
        for kind in ("prompt", "response"):
            chunks.extend(_SLOT.split(template(sub, kind))[0::2])
        shape = _response_shape(sub)
        if shape.item:
            chunks.extend(_SLOT.split(shape.item)[0::2])
            chunks.append(shape.sep)
            chunks.extend(_SLOT.split(shape.header)[0::2])
    return chunks


def default_phrases(spec: "datagen.GenSpec | None" = None) -> list[str]:
    spec = spec or datagen.GenSpec()
    phrases = set(_template_chunks())
    phrases.update(["[(", "), (", ")]", "[]"])
    phrases.update(f", {rel}, " for rel in RELATIONS)
    phrases.update(datagen.VERBS.values())
    phrases.update(datagen.JOINERS.values())
    phrases.update(["If ", "if ", ", then ", ", otherwise "])
    phrases.update(LOGICAL_RELS)
    vocab = datagen.vocabulary(spec)
    for words in vocab.values():
        phrases.update(words)
    return sorted(p for p in phrases if len(p) > 1)


class Tokenizer:
    def __init__(self, phrases: list[str], chars: str = BASE_CHARS):
        self.tokens = list(SPECIALS) + sorted(set(chars)) + sorted(set(phrases) - set(chars))
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self._by_first: dict[str, list[str]] = {}
        for t in self.tokens[len(SPECIALS):]:
            self._by_first.setdefault(t[0], []).append(t)
        for k in self._by_first:
            self._by_first[k].sort(key=len, reverse=True)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def for_corpus(cls, spec: "datagen.GenSpec | None" = None) -> "Tokenizer":
        return cls(default_phrases(spec))

    def encode(self, text: str) -> list[int]:
        out, i, n = [], 0, len(text)
        while i < n:
            for cand in self._by_first.get(text[i], ()):
                if text.startswith(cand, i):
                    out.append(self.index[cand])
                    i += len(cand)
                    break
            else:
                out.append(UNK)
                i += 1
        return out

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i < len(SPECIALS):
                if i == UNK:
                    parts.append("�")
                continue
            parts.append(self.tokens[i])
        return "".join(parts)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        tokens = json.loads(text)["tokens"]
        body = tokens[len(SPECIALS):]
        tok = cls([t for t in body if len(t) > 1], "".join(t for t in body if len(t) == 1))
        if tok.tokens != tokens:
            raise DataError("tokenizer vocabulary does not round-trip")
        return tok


def build_example(tok: Tokenizer, prompt: str, response: str) -> tuple[np.ndarray, np.ndarray]:
    """``<bos> prompt <sep> response <eos>`` with loss only on the response side.

    Returns ``(inputs, targets)`` of equal length for next-token training.
    """
    p = tok.encode(prompt)
    r = tok.encode(response)
    seq = [BOS] + p + [SEP] + r + [EOS]
    inputs = np.asarray(seq[:-1], dtype=np.int64)
    targets = np.asarray(seq[1:], dtype=np.int64)
    targets[: len(p) + 1] = -1
    return inputs, targets
