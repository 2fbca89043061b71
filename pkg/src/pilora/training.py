"""Two-stage adapter allocation: score-and-prune, then retrain on the kept sites."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from pilora import autodiff as ad
from pilora.autodiff import Tensor
from pilora.backbone import Backbone, BackboneConfig, forward_loss
from pilora.exceptions import ConfigError, DataError, NumericError
from pilora.lora import AdapterSet, Site, attach, prune, site_order
from pilora.scoring import SCORERS, ScoreLedger, sensitivity_score, step_score, top_sites

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Every knob of one allocation run. ``n_lora=None`` keeps half of the attached modules."""

    lr: float = 3e-3
    warmup: int = 100
    batch_size: int = 32
    micro_batch: int = 4
    K: int = 25
    n_lora: int | None = None
    rank: int = 4
    scorer: str = "pi"
    single_pass: bool = False
    scale_mode: str = "parameters"
    seed: int = 0
    # stage 1
    stage1_patience: int = 5
    stage1_min_epochs: int = 3
    stage1_min_steps: int = 0
    stage1_max_steps: int = 600
    # stage 2
    eval_interval: int = 200
    patience: int = 10
    stage2_max_steps: int = 1500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("lr", "batch_size", "micro_batch", "K", "rank", "stage1_patience", "eval_interval", "patience")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("warmup", "stage1_min_epochs", "stage1_min_steps", "stage1_max_steps", "stage2_max_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if self.batch_size % self.micro_batch:
            raise ConfigError(f"batch_size={self.batch_size} must be a multiple of micro_batch={self.micro_batch}")
        if self.n_lora is not None and self.n_lora < 1:
            raise ConfigError(f"n_lora must be >= 1, got {self.n_lora}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")
        if self.scale_mode not in ("parameters", "output"):
            raise ConfigError(f"scale_mode must be 'parameters' or 'output', got {self.scale_mode!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {unknown}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def derive_seed(seed: int, tag: str) -> int:
    """Independent integer seed for a named random stream."""
    words = [ord(c) for c in tag]
    return int(np.random.SeedSequence([int(seed)] + words).generate_state(1)[0])


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup over ``warmup`` steps (1-based), then constant."""
    if config.warmup and step <= config.warmup:
        return config.lr * step / config.warmup
    return config.lr


class Adam:
    """Adam with decoupled weight decay; state only for the tensors it is given."""

    def __init__(self, params: Sequence[Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, grads: dict[int, np.ndarray], lr: float) -> None:
        c = self.config
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        for p in self.params:
            g = grads.get(id(p))
            if g is None:
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                m = self.m[id(p)] = b1 * self.m[id(p)] + (1 - b1) * g
                v = self.v[id(p)] = b2 * self.v[id(p)] + (1 - b2) * g * g
            if not np.all(np.isfinite(v)):
                raise NumericError("optimizer second moment overflowed")
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            if c.weight_decay:
                p.data = p.data * (1 - lr * c.weight_decay)
            p.data = p.data - lr * mh / (np.sqrt(vh) + c.eps)
            if not np.all(np.isfinite(p.data)):
                raise NumericError("parameter update produced non-finite values")

    def drop(self, keep: Sequence[Tensor]) -> None:
        ids = {id(p) for p in keep}
        self.params = [p for p in self.params if id(p) in ids]
        self.m = {k: v for k, v in self.m.items() if k in ids}
        self.v = {k: v for k, v in self.v.items() if k in ids}


# ---------------------------------------------------------------- data


@dataclass
class TaskData:
    """Tokenized ``(inputs, targets)`` pairs; targets use -1 where no loss applies."""

    train: list[tuple[np.ndarray, np.ndarray]]
    dev: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.train:
            raise DataError("training set is empty")
        if not self.dev:
            raise DataError("dev set is empty")


def pad_batch(items: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(x) for x, _ in items)
    X = np.zeros((len(items), T), dtype=np.int64)
    Y = np.full((len(items), T), -1, dtype=np.int64)
    for r, (x, y) in enumerate(items):
        X[r, : len(x)] = x
        Y[r, : len(y)] = y
    return X, Y


def micro_batches(items, size: int):
    for i in range(0, len(items), size):
        yield pad_batch(items[i : i + size])


def eval_loss(model: Backbone, adapters: AdapterSet | None, items, micro: int = 8) -> float:
    """Token-weighted mean cross-entropy over ``items``; no tape is recorded."""
    leaves = None
    if adapters is not None:
        leaves = {s: (Tensor(m.A.data), Tensor(m.B.data)) for s, m in adapters.modules.items() if m.active}
    total = 0.0
    count = 0
    for X, Y in micro_batches(items, micro):
        n = int((Y != -1).sum())
        with ad.Graph():
            loss = forward_loss(model, X, Y, leaves=leaves or {})
        if not math.isfinite(loss.item()):
            raise NumericError("non-finite evaluation loss")
        total += loss.item() * n
        count += n
    return total / count


def batch_gradients(model: Backbone, adapters: AdapterSet, batch, micro: int, alpha: float | None = None):
    """Mean loss and per-site ``(gA, gB)`` averaged over micro-batches.

    With ``alpha`` the pass runs at the scaled point ``alpha * w`` and the
    gradients are taken there.
    """
    grads: dict[Site, list[np.ndarray]] = {}
    losses = []
    chunks = list(micro_batches(batch, micro))
    for X, Y in chunks:
        leaves = adapters.leaves(alpha)
        with ad.Graph():
            loss = forward_loss(model, X, Y, leaves=leaves)
            ad.backward(loss)
        lv = loss.item()
        if not math.isfinite(lv):
            raise NumericError("non-finite training loss")
        losses.append(lv)
        for s, (A, B) in leaves.items():
            gA = A.grad if A.grad is not None else np.zeros_like(A.data)
            gB = B.grad if B.grad is not None else np.zeros_like(B.data)
            if not (np.all(np.isfinite(gA)) and np.all(np.isfinite(gB))):
                raise NumericError(f"non-finite gradient at site {s}")
            if s in grads:
                grads[s][0] = grads[s][0] + gA
                grads[s][1] = grads[s][1] + gB
            else:
                grads[s] = [gA, gB]
            A.zero_grad()
            B.zero_grad()
    n = len(chunks)
    return float(np.mean(losses)), {s: (g[0] / n, g[1] / n) for s, g in grads.items()}


def _flat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a.reshape(-1), b.reshape(-1)])


class _EpochSampler:
    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order: list[int] = []
        self.epoch = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def next(self) -> tuple[list[int], bool]:
        """Indices for the next mini-batch and whether it ends an epoch."""
        if not self.order:
            self.order = list(self.rng.permutation(self.n))
        idx, self.order = self.order[: self.batch_size], self.order[self.batch_size :]
        end = not self.order
        if end:
            self.epoch += 1
        return idx, end


# ---------------------------------------------------------------- stage 1


@dataclass
class Curve:
    rows: list[tuple[int, float, float | None]] = field(default_factory=list)

    def add(self, step: int, train_loss: float, eval_loss: float | None = None) -> None:
        self.rows.append((step, train_loss, eval_loss))

    def to_csv(self) -> str:
        lines = ["step,train_loss,eval_loss"]
        for s, t, e in self.rows:
            lines.append(f"{s},{t!r},{'' if e is None else repr(e)}")
        return "\n".join(lines) + "\n"


@dataclass
class Stage1Result:
    ledger: ScoreLedger
    allocation: list[Site]
    adapters: AdapterSet
    curve: Curve
    steps: int
    dev_loss: float | None

    @property
    def scores(self) -> dict[Site, float]:
        return self.ledger.module_scores()


def resolve_n_lora(config: TrainConfig, n_sites: int) -> int:
    n = n_sites // 2 if config.n_lora is None else config.n_lora
    if n > n_sites:
        raise ConfigError(f"n_lora={n} exceeds the {n_sites} attached modules")
    return max(n, 1)


def stage1(
    config: TrainConfig,
    data: TaskData,
    model: Backbone,
    sites: Sequence[Site] | None = None,
) -> Stage1Result:
    """Train all adapters while accumulating per-step scores, then keep the top ``n_lora``.

    Each step: draw a mini-batch, draw ``alpha`` (pi scorer), take the gradient
    at ``alpha * w`` for scoring, take the plain gradient for the Adam update
    (or reuse the scaled one with ``single_pass``), accumulate scores. Stops when
    the per-epoch dev loss has not improved for ``stage1_patience`` epochs
    (after the minimum budget) or at ``stage1_max_steps``.
    """
    sites = list(sites) if sites is not None else model.config.all_sites()
    n_keep = resolve_n_lora(config, len(sites))
    adapters = attach(model, sites, rank=config.rank, seed=derive_seed(config.seed, "stage1-init"), scale_mode=config.scale_mode)
    # only the pi scorer draws alpha; the others score at alpha = 1
    K = config.K if config.scorer == "pi" else 1
    ledger = ScoreLedger({s: m.size for s, m in adapters.modules.items()}, K=K, seed=derive_seed(config.seed, "alpha"))
    curve = Curve()
    if config.scorer == "random":
        rng = np.random.default_rng(derive_seed(config.seed, "random-scores"))
        ledger.accumulate({s: np.full(m.size, rng.random()) for s, m in adapters.modules.items()})
        allocation = top_sites(ledger.module_scores(), n_keep)
        return Stage1Result(ledger, allocation, prune(adapters, allocation), curve, 0, None)

    sampler = _EpochSampler(len(data.train), config.batch_size, derive_seed(config.seed, "stage1-data"))
    opt = Adam(adapters.parameters(), config)
    min_steps = max(config.stage1_min_steps, config.stage1_min_epochs * sampler.steps_per_epoch)
    best, bad_epochs, dev = math.inf, 0, None
    step = 0
    while step < config.stage1_max_steps:
        step += 1
        idx, epoch_end = sampler.next()
        batch = [data.train[i] for i in idx]
        w = {s: _flat(m.A.data, m.B.data) for s, m in adapters.modules.items()}
        if config.scorer == "pi":
            alpha = ledger.sample_alpha()
            loss_a, g_alpha = batch_gradients(model, adapters, batch, config.micro_batch, alpha)
            ledger.accumulate({s: step_score(w[s], _flat(*g_alpha[s]), alpha) for s in w})
            if config.single_pass or alpha == 1.0:
                loss, grads = loss_a, g_alpha
            else:
                loss, grads = batch_gradients(model, adapters, batch, config.micro_batch)
        else:
            loss, grads = batch_gradients(model, adapters, batch, config.micro_batch)
            if config.scorer == "sensitivity":
                ledger.accumulate({s: sensitivity_score(w[s], _flat(*grads[s])) for s in w})
            else:
                ledger.accumulate({s: np.abs(w[s]) for s in w})
        opt.step(_grads_by_param(adapters, grads), lr_at(config, step))
        curve.add(step, loss)
        if epoch_end:
            dev = eval_loss(model, adapters, data.dev)
            curve.rows[-1] = (step, loss, dev)
            log.info("stage1 step %d epoch %d train %.4f dev %.4f", step, sampler.epoch, loss, dev)
            if dev < best - 1e-12:
                best, bad_epochs = dev, 0
            else:
                bad_epochs += 1
            if step >= min_steps and bad_epochs >= config.stage1_patience:
                break
    allocation = top_sites(ledger.module_scores(), n_keep)
    prune(adapters, allocation)
    opt.drop(adapters.parameters())
    return Stage1Result(ledger, allocation, adapters, curve, step, dev)


def _grads_by_param(adapters: AdapterSet, grads: dict[Site, tuple[np.ndarray, np.ndarray]]) -> dict[int, np.ndarray]:
    out = {}
    for s, (gA, gB) in grads.items():
        m = adapters.modules[s]
        if m.active:
            out[id(m.A)] = gA
            out[id(m.B)] = gB
    return out


# ---------------------------------------------------------------- stage 2


@dataclass
class Stage2Result:
    adapters: AdapterSet
    best_state: dict
    best_dev_loss: float
    best_step: int
    final_dev_loss: float
    curve: Curve
    steps: int
    evals_without_improvement: int

    def best_adapters(self) -> AdapterSet:
        a = self.adapters.snapshot()
        a.load_state_dict(self.best_state)
        return a


def stage2(config: TrainConfig, allocation: Sequence[Site], data: TaskData, model: Backbone) -> Stage2Result:
    """Fresh adapters on ``allocation`` only; stop after ``patience`` evaluations without a new best dev loss."""
    allocation = [tuple(s) for s in allocation]
    if not allocation:
        raise ConfigError("allocation is empty")
    valid = set(model.config.all_sites())
    unknown = [s for s in allocation if s not in valid]
    if unknown:
        raise ConfigError(f"allocation references unknown sites {unknown}")
    adapters = attach(model, allocation, rank=config.rank, seed=derive_seed(config.seed, "stage2-init"), scale_mode=config.scale_mode)
    opt = Adam(adapters.parameters(), config)
    sampler = _EpochSampler(len(data.train), config.batch_size, derive_seed(config.seed, "stage2-data"))
    curve = Curve()
    best, best_step, best_state, bad = math.inf, 0, adapters.state_dict(), 0
    dev = best
    step = 0
    while step < config.stage2_max_steps:
        step += 1
        idx, _ = sampler.next()
        loss, grads = batch_gradients(model, adapters, [data.train[i] for i in idx], config.micro_batch)
        opt.step(_grads_by_param(adapters, grads), lr_at(config, step))
        curve.add(step, loss)
        if step % config.eval_interval == 0 or step == config.stage2_max_steps:
            dev = eval_loss(model, adapters, data.dev)
            curve.rows[-1] = (step, loss, dev)
            log.info("stage2 step %d train %.4f dev %.4f", step, loss, dev)
            if dev < best:
                best, best_step, best_state, bad = dev, step, adapters.state_dict(), 0
            else:
                bad += 1
                if bad >= config.patience:
                    break
    return Stage2Result(adapters, best_state, best, best_step, dev, curve, step, bad)


def sites_sorted(sites) -> list[Site]:
    return sorted((tuple(s) for s in sites), key=site_order)


def write_curve(path, curve: Curve) -> None:
    Path(path).write_text(curve.to_csv())


def dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


__all__ = [
    "Adam",
    "BackboneConfig",
    "Curve",
    "Stage1Result",
    "Stage2Result",
    "TaskData",
    "TrainConfig",
    "batch_gradients",
    "derive_seed",
    "eval_loss",
    "lr_at",
    "stage1",
    "stage2",
]
