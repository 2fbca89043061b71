"""scikit-learn style wrappers.

``PILoRASelector`` runs the scoring stage and exposes the kept modules like a
feature selector. ``Text2MDTExtractor`` runs both stages and predicts trees
from guideline texts. Both take plain text sequences as ``X`` and
:class:`~pilora.mdt.MdtTree` sequences as ``y``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from pilora import experiment as ex
from pilora.datagen import Example, GenSpec
from pilora.decoding import LMGenerator
from pilora.mdt import MdtTree, evaluate_trees
from pilora.prompts import TruncationError, end2end_run, prompt_for
from pilora.scoring import rank_sites
from pilora.tokenizer import Tokenizer
from pilora.training import TaskData, TrainConfig, stage1, stage2
from pilora.validation import check_texts, check_trees, check_xy, holdout_split


class _AllocationBase(BaseEstimator):
    def __init__(
        self,
        scorer="pi",
        K=25,
        n_lora=None,
        rank=4,
        lr=3e-3,
        batch_size=32,
        micro_batch=8,
        stage1_max_steps=600,
        stage2_max_steps=1500,
        backbone_preset="desk-pretrained",
        validation_fraction=0.1,
        seed=0,
    ):
        self.scorer = scorer
        self.K = K
        self.n_lora = n_lora
        self.rank = rank
        self.lr = lr
        self.batch_size = batch_size
        self.micro_batch = micro_batch
        self.stage1_max_steps = stage1_max_steps
        self.stage2_max_steps = stage2_max_steps
        self.backbone_preset = backbone_preset
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            scorer=self.scorer,
            K=self.K,
            n_lora=self.n_lora,
            rank=self.rank,
            lr=self.lr,
            batch_size=self.batch_size,
            micro_batch=self.micro_batch,
            stage1_max_steps=self.stage1_max_steps,
            stage2_max_steps=self.stage2_max_steps,
            seed=self.seed,
        )

    def _prepare(self, X, y):
        texts, trees = check_xy(X, y)
        config = self._train_config()
        tok = Tokenizer.for_corpus(GenSpec())
        model = ex.load_backbone(self.backbone_preset, len(tok))
        train_idx, dev_idx = holdout_split(len(texts), self.validation_fraction)
        exs = [Example(t, tr) for t, tr in zip(texts, trees)]
        data = TaskData(
            ex.encode_split([exs[i] for i in train_idx], tok, max_len=model.config.max_seq),
            ex.encode_split([exs[i] for i in dev_idx], tok, max_len=model.config.max_seq),
        )
        return config, tok, model, data


class PILoRASelector(_AllocationBase):
    """Scores every adapter module during a training run and keeps the top ``n_lora``.

    Fitted attributes: ``scores_`` (site -> score), ``ranking_`` (sites, best
    first), ``allocation_`` (kept sites), ``sites_`` (all sites in canonical
    order), ``n_steps_``.
    """

    def fit(self, X, y):
        config, _, model, data = self._prepare(X, y)
        res = stage1(config, data, model)
        self.sites_ = model.config.all_sites()
        self.scores_ = res.scores
        self.ranking_ = [s for s, _ in rank_sites(res.scores)]
        self.allocation_ = list(res.allocation)
        self.n_steps_ = res.steps
        self.ledger_ = res.ledger
        return self

    def get_support(self, indices: bool = False):
        check_is_fitted(self, "allocation_")
        kept = set(self.allocation_)
        mask = np.array([s in kept for s in self.sites_])
        return np.flatnonzero(mask) if indices else mask

    def transform(self, sites):
        """Filter a list of sites down to the kept ones, preserving order."""
        check_is_fitted(self, "allocation_")
        kept = set(self.allocation_)
        return [tuple(s) for s in sites if tuple(s) in kept]


class Text2MDTExtractor(_AllocationBase):
    """Both allocation stages, then greedy single-pass tree generation.

    ``predict`` returns an :class:`MdtTree` per text, or ``None`` where the
    generation did not parse into a valid tree. ``score`` is tree accuracy.
    """

    def fit(self, X, y):
        config, tok, model, data = self._prepare(X, y)
        s1 = stage1(config, data, model)
        s2 = stage2(config, s1.allocation, data, model)
        self.tokenizer_ = tok
        self.backbone_ = model
        self.allocation_ = list(s1.allocation)
        self.scores_ = s1.scores
        self.adapters_ = s2.best_adapters()
        self.best_dev_loss_ = s2.best_dev_loss
        return self

    def predict(self, X) -> list[MdtTree | None]:
        check_is_fitted(self, "adapters_")
        texts = check_texts(X)
        gen = LMGenerator(self.backbone_, self.tokenizer_, self.adapters_)
        gen.prefetch([prompt_for("cot-gen-3", t) for t in texts])
        out = []
        for t in texts:
            try:
                res = end2end_run(gen, t, truncation="diagnose")
            except TruncationError:
                res = None
            out.append(res if res else None)
        return out

    def evaluate(self, X, y) -> dict:
        texts, trees = check_xy(X, y)
        return evaluate_trees(self.predict(texts), trees).as_dict()

    def score(self, X, y) -> float:
        return self.evaluate(X, y)["Tree_Acc"]


__all__ = ["PILoRASelector", "Text2MDTExtractor", "check_trees"]
