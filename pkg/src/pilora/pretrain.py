"""Deterministic full-parameter warm-up of the backbone on auxiliary subtasks.

A randomly initialised backbone gives low-rank adapters almost nothing to
steer. The ``desk-pretrained`` preset first trains every weight on the three
pipeline subtasks (triplet extraction, node grouping, tree assembling) drawn
from a separately seeded corpus that shares no tree with the default corpus,
then freezes the result. The single-pass tree generation format is never
seen during warm-up, so adapters still have a task to learn.
"""

from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from pilora import autodiff as ad
from pilora.backbone import Backbone, BackboneConfig, forward_loss, init_backbone
from pilora.datagen import GenSpec, gen_corpus
from pilora.exceptions import DataError
from pilora.mdt import grouping_of
from pilora.prompts import prompt_for, render_response
from pilora.tokenizer import Tokenizer, build_example
from pilora.training import pad_batch

log = logging.getLogger(__name__)

WARMUP_TASKS = ("triplets", "grouping", "assembling")


@dataclass(frozen=True)
class PretrainSpec:
    corpus_seed: int = 1009
    n_trees: int = 3000
    steps: int = 10000
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 100
    seed: int = 0
    # linear decay to zero after warmup; False keeps the rate constant
    decay: bool = True


def warmup_examples(spec: PretrainSpec, tok: Tokenizer, exclude: set | None = None, max_len: int = 256):
    """Tokenized pipeline-subtask examples.

    Trees in ``exclude`` (canonical forms) are skipped, as are sequences longer
    than ``max_len``.
    """
    corpus = gen_corpus(GenSpec(seed=spec.corpus_seed, n_trees=spec.n_trees))
    out = []
    for ex in corpus.train + corpus.dev + corpus.test:
        if exclude and ex.tree.canonical() in exclude:
            continue
        trip = ex.tree.triplets()
        grouping = grouping_of(ex.tree)
        pairs = {
            "triplets": (prompt_for("triplets", ex.text), render_response("triplets", trip)),
            "grouping": (prompt_for("grouping", ex.text, triplets=trip), render_response("grouping", grouping)),
            "assembling": (prompt_for("assembling", ex.text, grouping=grouping), render_response("assembling", ex.tree)),
        }
        for task in WARMUP_TASKS:
            x, y = build_example(tok, *pairs[task])
            if len(x) <= max_len:
                out.append((x, y))
    return out


def pretrain(config: BackboneConfig, tok: Tokenizer, spec: PretrainSpec = PretrainSpec(), exclude: set | None = None) -> Backbone:
    """Adam on all weights with linear warmup (then linear decay); returns a frozen backbone."""
    data = warmup_examples(spec, tok, exclude, config.max_seq)
    model = init_backbone(config)
    params = list(model.weights.values())
    for p in params:
        p.requires_grad = True
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(spec.seed)
    for step in range(1, spec.steps + 1):
        idx = rng.choice(len(data), spec.batch_size, replace=False)
        X, Y = pad_batch([data[i] for i in idx])
        for p in params:
            p.zero_grad()
        with ad.Graph():
            loss = forward_loss(model, X, Y)
            ad.backward(loss)
        lr = spec.lr * min(1.0, step / spec.warmup)
        if spec.decay and step > spec.warmup:
            lr *= (spec.steps - step + 1) / (spec.steps - spec.warmup + 1)
        for i, p in enumerate(params):
            g = p.grad
            if g is None:
                continue
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            p.data = p.data - lr * (m[i] / (1 - 0.9**step)) / (np.sqrt(v[i] / (1 - 0.999**step)) + 1e-8)
        if step % 100 == 0:
            log.info("warm-up step %d loss %.4f", step, loss.item())
    for p in params:
        p.requires_grad = False
        p.grad = None
    return model


CHECKPOINT = "desk-pretrained.json.gz"


def load_checkpoint(path) -> Backbone:
    p = Path(path)
    if not p.exists():
        raise DataError(f"backbone checkpoint not found: {p}")
    return Backbone.from_json(gzip.decompress(p.read_bytes()).decode())


def load_shipped() -> Backbone:
    ref = resources.files("pilora.checkpoints").joinpath(CHECKPOINT)
    if not ref.is_file():
        raise DataError(f"shipped checkpoint {CHECKPOINT} is missing from the installation")
    with ref.open("rb") as fh:
        return Backbone.from_json(gzip.decompress(fh.read()).decode())


def write_checkpoint(model: Backbone, path) -> None:
    Path(path).write_bytes(gzip.compress(model.to_json().encode(), mtime=0))


def build_shipped(path, spec: PretrainSpec = PretrainSpec()) -> Backbone:
    """Rebuild the ``desk-pretrained`` checkpoint from scratch (about two hours on one CPU)."""
    tok = Tokenizer.for_corpus()
    held_out = gen_corpus()
    exclude = {e.tree.canonical() for e in held_out.train + held_out.dev + held_out.test}
    model = pretrain(BackboneConfig(vocab_size=len(tok)), tok, spec, exclude)
    write_checkpoint(model, path)
    return model


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    build_shipped(sys.argv[1] if len(sys.argv) > 1 else CHECKPOINT)
