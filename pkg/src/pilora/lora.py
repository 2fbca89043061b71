"""Low-rank adapters attached beside the frozen linear maps of a backbone."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pilora.autodiff import Tensor
from pilora.backbone import SITE_NAMES, Backbone, forward
from pilora.exceptions import ConfigError, DataError

Site = tuple[int, str]


def site_key(site: Site) -> str:
    return f"{site[0]}.{site[1]}"


def parse_site_key(key: str) -> Site:
    layer, name = key.split(".", 1)
    return int(layer), name


def site_order(site: Site) -> tuple[int, int]:
    """Deterministic ordering: layer ascending, then site name lexicographic."""
    return site[0], sorted(SITE_NAMES).index(site[1])


@dataclass
class LoraModule:
    """``delta W = B @ A`` with ``A`` of shape ``(r, d_in)`` and ``B`` of ``(d_out, r)``."""

    site: Site
    A: Tensor
    B: Tensor
    active: bool = True

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def size(self) -> int:
        return self.A.data.size + self.B.data.size

    def delta(self) -> np.ndarray:
        """``B @ A``, shape ``(d_out, d_in)``; zero when inactive."""
        if not self.active:
            return np.zeros((self.B.shape[0], self.A.shape[1]))
        return self.B.data @ self.A.data

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


@dataclass
class AdapterSet:
    modules: dict[Site, LoraModule] = field(default_factory=dict)
    rank: int = 4
    seed: int = 0
    alpha: float = 1.0
    scale_mode: str = "parameters"

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.scale_mode not in ("parameters", "output"):
            raise ConfigError(f"scale_mode must be 'parameters' or 'output', got {self.scale_mode!r}")

    @property
    def sites(self) -> list[Site]:
        return sorted(self.modules, key=site_order)

    @property
    def active_sites(self) -> list[Site]:
        return [s for s in self.sites if self.modules[s].active]

    def parameters(self) -> list[Tensor]:
        return [p for s in self.active_sites for p in self.modules[s].parameters()]

    def zero_grad(self) -> None:
        for m in self.modules.values():
            m.A.zero_grad()
            m.B.zero_grad()

    def leaves(self, alpha: float | None = None) -> dict[Site, tuple[Tensor, Tensor]]:
        """Tensors to feed the forward pass at each active site.

        With ``alpha`` given, every adapter entry is multiplied by it into fresh
        leaf tensors; their gradients are then the loss gradient evaluated at the
        scaled point. Stored parameters are untouched.
        """
        if alpha is None:
            return {s: (m.A, m.B) for s, m in self.modules.items() if m.active}
        alpha = check_alpha(alpha)
        out = {}
        for s, m in self.modules.items():
            if not m.active:
                continue
            a_scale = alpha if self.scale_mode == "parameters" else 1.0
            out[s] = (Tensor(m.A.data * a_scale, requires_grad=True), Tensor(m.B.data * alpha, requires_grad=True))
        return out

    def snapshot(self) -> "AdapterSet":
        return copy.deepcopy(self)

    # -- (de)serialization of trained weights --------------------------
    def state_dict(self) -> dict:
        return {
            site_key(s): {"A": m.A.data.tolist(), "B": m.B.data.tolist(), "active": m.active}
            for s, m in sorted(self.modules.items(), key=lambda kv: site_order(kv[0]))
        }

    def load_state_dict(self, state: dict) -> None:
        for key, entry in state.items():
            m = self.modules[parse_site_key(key)]
            m.A.data = np.asarray(entry["A"], dtype=np.float64)
            m.B.data = np.asarray(entry["B"], dtype=np.float64)
            m.active = bool(entry["active"])


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha


def attach(model: Backbone, sites, rank: int = 4, seed: int = 0, scale_mode: str = "parameters") -> AdapterSet:
    """``A ~ N(0, 0.02)`` from ``seed``, ``B = 0``: the adapted model starts equal to the backbone."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    cfg = model.config
    sites = [tuple(s) for s in sites]
    seen = set()
    for s in sites:
        if s in seen:
            raise ConfigError(f"duplicate site {s}")
        seen.add(s)
        if not (0 <= s[0] < cfg.n_layers) or s[1] not in SITE_NAMES:
            raise ConfigError(f"site {s} is not valid for a {cfg.n_layers}-layer backbone")
    rng = np.random.default_rng(seed)
    modules = {}
    for s in sorted(sites, key=site_order):
        d_in, d_out = cfg.site_shape(s[1])
        A = Tensor(rng.normal(0.0, 0.02, (rank, d_in)), requires_grad=True)
        B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        modules[s] = LoraModule(s, A, B)
    return AdapterSet(modules, rank=rank, seed=seed, scale_mode=scale_mode)


def scaled_forward(model: Backbone, adapters: AdapterSet, alpha: float, tokens) -> tuple[Tensor, dict]:
    """Logits with every adapter entry scaled by ``alpha`` for this pass only.

    Returns ``(logits, leaves)``; after ``backward`` the leaves hold
    the gradient at the scaled point.
    """
    leaves = adapters.leaves(alpha)
    return forward(model, tokens, leaves=leaves), leaves


def prune(adapters: AdapterSet, keep) -> AdapterSet:
    """Deactivate, permanently, every module whose site is not in ``keep``."""
    keep = {tuple(s) for s in keep}
    unknown = keep - set(adapters.modules)
    if unknown:
        raise ConfigError(f"unknown sites in keep: {sorted(unknown)}")
    for s, m in adapters.modules.items():
        if s not in keep:
            m.active = False
            m.A.zero_grad()
            m.B.zero_grad()
    return adapters


# -- allocation file ---------------------------------------------------------


def write_allocation(path, sites_kept, rank: int, seed: int, scores: dict) -> None:
    doc = {
        "sites_kept": [[int(l), n] for l, n in sorted((tuple(s) for s in sites_kept), key=site_order)],
        "rank": int(rank),
        "seed": int(seed),
        "scores": {site_key(s): float(v) for s, v in sorted(scores.items(), key=lambda kv: site_order(kv[0]))},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_allocation(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"allocation file not found: {p}")
    doc = json.loads(p.read_text())
    for key in ("sites_kept", "rank", "seed", "scores"):
        if key not in doc:
            raise DataError(f"{p}: missing field {key!r}")
    doc["sites_kept"] = [(int(l), str(n)) for l, n in doc["sites_kept"]]
    doc["scores"] = {parse_site_key(k): float(v) for k, v in doc["scores"].items()}
    return doc
