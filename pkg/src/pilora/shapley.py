"""Exact cooperative-game values for small adapter sets.

The utility of a coalition is the negative mean token loss on a fixed batch
set with only the coalition's adapters active. All ``2^M`` coalitions are
evaluated once and cached, so both weightings come from the same table.
"""

from __future__ import annotations

import csv
import io
import json
from math import factorial
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from pilora.backbone import Backbone
from pilora.decoding import logits
from pilora.exceptions import ConfigError, DataError
from pilora.lora import AdapterSet, Site, site_key, site_order
from pilora.training import pad_batch

MAX_MODULES = 16
MODES = ("uniform-subset", "shapley")


def _mean_loss(model: Backbone, adapters: AdapterSet | None, batches) -> float:
    total, count = 0.0, 0
    for X, Y in batches:
        lg = logits(model, X, adapters)
        lg = lg - lg.max(-1, keepdims=True)
        logp = lg - np.log(np.exp(lg).sum(-1, keepdims=True))
        valid = Y != -1
        picked = np.take_along_axis(logp, np.where(valid, Y, 0)[..., None], -1)[..., 0]
        total -= float(picked[valid].sum())
        count += int(valid.sum())
    if count == 0:
        raise DataError("utility batch set has no target tokens")
    return total / count


def coalition_utility(model: Backbone, adapters: AdapterSet, coalition: Sequence[Site] | int, batches) -> float:
    """``-mean loss`` with only ``coalition`` active.

    ``coalition`` is a list of sites or a bitmask over ``adapters.sites``.
    ``batches`` is a non-empty sequence of padded ``(inputs, targets)`` arrays.
    """
    batches = list(batches)
    if not batches:
        raise DataError("utility dataset is empty")
    order = adapters.sites
    if isinstance(coalition, (int, np.integer)):
        if coalition < 0 or coalition >= 1 << len(order):
            raise ConfigError(f"bitmask {coalition} is wider than {len(order)} modules")
        members = {s for i, s in enumerate(order) if coalition >> i & 1}
    else:
        members = {tuple(s) for s in coalition}
        unknown = members - set(order)
        if unknown:
            raise ConfigError(f"coalition has unknown sites {sorted(unknown)}")
    view = adapters.snapshot()
    for s, m in view.modules.items():
        m.active = s in members
    return -_mean_loss(model, view, batches)


def utility_table(model: Backbone, adapters: AdapterSet, batches) -> np.ndarray:
    """Utility of every bitmask ``0 .. 2^M - 1`` over ``adapters.sites``."""
    M = len(adapters.sites)
    if M > MAX_MODULES:
        raise ConfigError(f"{M} modules exceeds the exact-enumeration limit of {MAX_MODULES}")
    batches = list(batches)
    return np.array([coalition_utility(model, adapters, mask, batches) for mask in range(1 << M)])


def values_from_table(table: Sequence[float] | Callable[[int], float], M: int, mode: str = "uniform-subset") -> np.ndarray:
    """Per-player values from a utility table indexed by bitmask.

    ``uniform-subset`` averages the marginal contribution over all ``2^(M-1)``
    subsets of the other players; ``shapley`` uses the classic
    ``|A|! (M-|A|-1)! / M!`` weights.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if M > MAX_MODULES:
        raise ConfigError(f"{M} modules exceeds the exact-enumeration limit of {MAX_MODULES}")
    v = table if callable(table) else (lambda mask, t=np.asarray(table, dtype=np.float64): float(t[mask]))
    weights = [factorial(a) * factorial(M - a - 1) / factorial(M) for a in range(M)]
    phi = np.zeros(M)
    for m in range(M):
        bit = 1 << m
        acc = 0.0
        for mask in range(1 << M):
            if mask & bit:
                continue
            delta = v(mask | bit) - v(mask)
            acc += delta if mode == "uniform-subset" else weights[bin(mask).count("1")] * delta
        phi[m] = acc / (1 << (M - 1)) if mode == "uniform-subset" else acc
    return phi


def exact_values(model: Backbone, adapters: AdapterSet, batches, weighting: str = "uniform-subset") -> dict[Site, float]:
    table = utility_table(model, adapters, batches)
    phi = values_from_table(table, len(adapters.sites), weighting)
    return dict(zip(adapters.sites, phi.tolist()))


def fixed_batches(items, n_seqs: int = 16, max_tokens: int = 512, micro: int = 8):
    """First ``n_seqs`` examples, each cut to ``max_tokens``, padded into micro-batches."""
    chosen = [(x[:max_tokens], y[:max_tokens]) for x, y in list(items)[:n_seqs]]
    if not chosen:
        raise DataError("utility dataset is empty")
    return [pad_batch(chosen[i : i + micro]) for i in range(0, len(chosen), micro)]


def correlation(phi: Mapping[Site, float], scores: Mapping[Site, float]) -> dict:
    """Rank agreement between two score maps over their shared sites."""
    sites = sorted(set(phi) & set(scores), key=site_order)
    if len(sites) < 2:
        raise DataError("need at least two shared sites to correlate")
    a = [phi[s] for s in sites]
    b = [scores[s] for s in sites]
    return {
        "spearman_vs_pilora": float(stats.spearmanr(a, b).statistic),
        "kendall_vs_pilora": float(stats.kendalltau(a, b).statistic),
        "n_modules": len(sites),
    }


def report_csv(values: Mapping[str, Mapping[Site, float]]) -> str:
    """``mode,module,phi`` rows for each mode's values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "module", "phi"])
    for mode, phi in values.items():
        for s in sorted(phi, key=site_order):
            w.writerow([mode, site_key(s), repr(float(phi[s]))])
    return buf.getvalue()


def write_report(out_dir, values: Mapping[str, Mapping[Site, float]], corr: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "shapley.csv").write_text(report_csv(values))
    if corr is not None:
        (out / "shapley_correlation.json").write_text(json.dumps(corr, indent=2, sort_keys=True) + "\n")
