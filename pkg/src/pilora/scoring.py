"""Importance scores for adapter modules.

Per-parameter scores are accumulated step by step in a :class:`ScoreLedger`,
averaged over steps, then averaged over each module's entries to rank
modules. The path-integrated score evaluates the gradient at a randomly
scaled copy of the adapters, ``alpha * w``, with ``alpha`` drawn from the
grid ``{1/K, ..., K/K}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from pilora.exceptions import ConfigError, DataError
from pilora.lora import Site, site_order

SCORERS = ("pi", "sensitivity", "magnitude", "random")


def sensitivity_score(w, g):
    """``|w * g|`` elementwise."""
    return np.abs(np.asarray(w, dtype=np.float64) * np.asarray(g, dtype=np.float64))


def step_score(w, g_at_alpha, alpha: float):
    """``|(alpha * w) * grad L(alpha * w)|`` elementwise.

    ``g_at_alpha`` must be the gradient taken at the scaled point, i.e. from
    a :func:`pilora.lora.scaled_forward` pass with the same ``alpha``.
    """
    return np.abs((alpha * np.asarray(w, dtype=np.float64)) * np.asarray(g_at_alpha, dtype=np.float64))


def path_integral_exact(w, grad_fn: Callable[[np.ndarray], np.ndarray], K: int):
    """``(|w| / K) * |sum_k grad L((k/K) w)|`` elementwise, all K grid points at once.

    ``grad_fn`` maps a parameter array to the loss gradient at that point.
    Verification only; training uses the one-point stochastic estimate.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    w = np.asarray(w, dtype=np.float64)
    total = np.zeros_like(w)
    for k in range(1, K + 1):
        total = total + np.asarray(grad_fn((k / K) * w), dtype=np.float64)
    return (np.abs(w) / K) * np.abs(total)


def grid_sweep_score(w, grad_fn: Callable[[np.ndarray], np.ndarray], K: int):
    """Mean of :func:`step_score` over every grid point, each visited once."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    w = np.asarray(w, dtype=np.float64)
    acc = np.zeros_like(w)
    for k in range(1, K + 1):
        a = k / K
        acc = acc + step_score(w, grad_fn(a * w), a)
    return acc / K


@dataclass(frozen=True)
class ModuleScore:
    site: Site
    score: float


class ScoreLedger:
    """Running per-parameter score sums for every module, plus the alpha sampler.

    Each module's vector is its ``A`` entries followed by its ``B`` entries.
    """

    def __init__(self, sizes: Mapping[Site, int], K: int = 25, seed: int = 0):
        if K < 1:
            raise ConfigError(f"K must be >= 1, got {K}")
        self.K = int(K)
        self.seed = int(seed)
        self.sums = {tuple(s): np.zeros(int(n)) for s, n in sizes.items()}
        self.steps = 0
        self._rng = np.random.default_rng(seed)

    @property
    def sites(self) -> list[Site]:
        return sorted(self.sums, key=site_order)

    def sample_alpha(self) -> float:
        """Uniform draw from ``{1/K, ..., K/K}``."""
        return int(self._rng.integers(1, self.K + 1)) / self.K

    def accumulate(self, scores: Mapping[Site, np.ndarray]) -> None:
        """Add one step's per-parameter scores; every module must be present."""
        missing = set(self.sums) - set(scores)
        if missing:
            raise DataError(f"step scores missing for sites {sorted(missing)}")
        for s, v in scores.items():
            v = np.asarray(v, dtype=np.float64).reshape(-1)
            if v.shape != self.sums[s].shape:
                raise DataError(f"site {s}: expected {self.sums[s].size} scores, got {v.size}")
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise DataError(f"site {s}: scores must be finite and nonnegative")
            self.sums[s] = self.sums[s] + v
        self.steps += 1

    def aggregate(self) -> dict[Site, np.ndarray]:
        """Mean per-parameter score over all accumulated steps."""
        if self.steps == 0:
            raise DataError("no steps accumulated")
        return {s: v / self.steps for s, v in self.sums.items()}

    def module_score(self, site: Site) -> ModuleScore:
        site = tuple(site)
        if site not in self.sums:
            raise KeyError(f"unknown site {site}")
        return ModuleScore(site, float(np.mean(self.sums[site] / self.steps)) if self.steps else 0.0)

    def module_scores(self) -> dict[Site, float]:
        if self.steps == 0:
            raise DataError("no steps accumulated")
        return {s: self.module_score(s).score for s in self.sites}

    def export(self) -> dict:
        scores = self.module_scores()
        return {
            "K": self.K,
            "P": self.steps,
            "seed": self.seed,
            "scores": [{"layer": s[0], "name": s[1], "score": v} for s, v in rank_sites(scores)],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.export(), indent=2, sort_keys=True) + "\n")


def sample_alpha(ledger: ScoreLedger) -> float:
    return ledger.sample_alpha()


def aggregate(ledger: ScoreLedger) -> dict[Site, np.ndarray]:
    return ledger.aggregate()


def module_score(ledger: ScoreLedger, site: Site) -> ModuleScore:
    return ledger.module_score(site)


def rank_sites(scores: Mapping[Site, float]) -> list[tuple[Site, float]]:
    """Descending score; ties by layer ascending, then site name."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], site_order(kv[0])))


def top_sites(scores: Mapping[Site, float], n: int) -> list[Site]:
    if n > len(scores):
        raise ConfigError(f"cannot keep {n} of {len(scores)} modules")
    return [s for s, _ in rank_sites(scores)[:n]]


def read_scores(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"score file not found: {p}")
    doc = json.loads(p.read_text())
    doc["scores"] = {(int(e["layer"]), str(e["name"])): float(e["score"]) for e in doc["scores"]}
    return doc
