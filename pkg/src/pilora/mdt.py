"""Medical decision trees: nodes, pre-order / level-order codecs and metrics.

A tree is a full binary tree. Condition nodes ("C") are exactly the inner
nodes; the left child is taken when the condition holds. Decision nodes ("D")
are the leaves. Trees are stored as their pre-order node list.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from pilora.exceptions import DataError, StructureError, TreeValidationError

RELATIONS = (
    "clinical manifestations",
    "therapeutic drugs",
    "usage and dosage",
    "treatment plan",
    "prohibited drugs",
    "basic situation",
)
ROLES = ("C", "D")
LOGICAL_RELS = ("and", "or", "null")


def _norm(s: str) -> str:
    return " ".join(str(s).split())


@dataclass(frozen=True, order=True)
class Triplet:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        object.__setattr__(self, "subject", _norm(self.subject))
        object.__setattr__(self, "object", _norm(self.object))
        rel = _norm(self.relation).lower()
        object.__setattr__(self, "relation", rel)

    def sort_key(self) -> tuple[str, str, str]:
        return self.relation, self.subject, self.object

    def problems(self) -> list[str]:
        out = []
        if not self.subject or not self.object or not self.relation:
            out.append(f"triplet {self.as_tuple()} has an empty field")
        if self.relation not in RELATIONS:
            out.append(f"relation {self.relation!r} is not one of the {len(RELATIONS)} categories")
        return out

    def as_tuple(self) -> tuple[str, str, str]:
        return self.subject, self.relation, self.object


def as_triplet(t) -> Triplet:
    if isinstance(t, Triplet):
        return t
    sub, rel, obj = t
    return Triplet(sub, rel, obj)


@dataclass(frozen=True)
class MdtNode:
    role: str
    triplets: tuple[Triplet, ...] = ()
    logical_rel: str = "null"

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(as_triplet(t) for t in self.triplets))
        object.__setattr__(self, "role", str(self.role).strip().upper())
        object.__setattr__(self, "logical_rel", str(self.logical_rel).strip().lower())

    def canonical(self) -> tuple:
        return (self.role, self.logical_rel, tuple(sorted(t.sort_key() for t in self.triplets)))

    def canonicalized(self) -> "MdtNode":
        return MdtNode(self.role, tuple(sorted(self.triplets, key=Triplet.sort_key)), self.logical_rel)

    def problems(self) -> list[str]:
        out = []
        if self.role not in ROLES:
            out.append(f"role {self.role!r} is not C or D")
        if self.logical_rel not in LOGICAL_RELS:
            out.append(f"logical_rel {self.logical_rel!r} is not and/or/null")
        n = len(self.triplets)
        if n == 0:
            out.append("node has no triplets")
        if n <= 1 and self.logical_rel != "null":
            out.append(f"logical_rel must be null for {n} triplet(s), got {self.logical_rel!r}")
        if n > 1 and self.logical_rel == "null":
            out.append(f"logical_rel is null but the node has {n} triplets")
        for t in self.triplets:
            out.extend(t.problems())
        return out


@dataclass(frozen=True)
class MdtTree:
    """Pre-order node list of a full binary tree."""

    nodes: tuple[MdtNode, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    def __len__(self) -> int:
        return len(self.nodes)

    def children(self) -> list[tuple[int, int] | None]:
        """Per pre-order index, ``(left, right)`` indices or None for leaves.

        Raises :class:`StructureError` when the role pattern is not a full binary pre-order.
        """
        return _preorder_children([n.role for n in self.nodes])

    def canonical(self) -> tuple:
        return tuple(n.canonical() for n in self.nodes)

    def canonicalized(self) -> "MdtTree":
        return MdtTree(tuple(n.canonicalized() for n in self.nodes))

    def triplets(self) -> list[Triplet]:
        """All triplets in pre-order (document order), first occurrence kept."""
        seen, out = set(), []
        for n in self.nodes:
            for t in n.canonicalized().triplets:
                if t not in seen:
                    seen.add(t)
                    out.append(t)
        return out

    def depth(self) -> int:
        kids = self.children()

        def d(i):
            return 1 if kids[i] is None else 1 + max(d(kids[i][0]), d(kids[i][1]))

        return d(0) if self.nodes else 0

    # -- JSON -------------------------------------------------------------
    def to_dict(self, order: str = "preorder") -> dict:
        nodes = self.nodes if order == "preorder" else tuple(breadth_first_encode(self))
        return {
            "nodes": [
                {"role": n.role, "logical_rel": n.logical_rel, "triplets": [list(t.as_tuple()) for t in n.triplets]}
                for n in nodes
            ],
            "order": order,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MdtTree":
        try:
            nodes = [MdtNode(n["role"], tuple(tuple(t) for t in n["triplets"]), n["logical_rel"]) for n in doc["nodes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed tree document: {exc}") from None
        order = doc.get("order", "preorder")
        if order == "preorder":
            return cls(tuple(nodes))
        if order == "bfs":
            return breadth_first_decode(nodes)
        raise DataError(f"unknown tree order {order!r}")

    def to_json(self, order: str = "preorder") -> str:
        return json.dumps(self.to_dict(order), sort_keys=True)


def _preorder_children(roles: Sequence[str]) -> list[tuple[int, int] | None]:
    n = len(roles)
    if n == 0:
        raise StructureError("empty node list", 0)
    kids: list = [None] * n
    pos = 0

    def build() -> int:
        nonlocal pos
        if pos >= n:
            raise StructureError("node list ends before every condition has two children", pos)
        i = pos
        pos += 1
        if roles[i] == "C":
            left = build()
            right = build()
            kids[i] = (left, right)
        return i

    build()
    if pos != n:
        raise StructureError(f"{n - pos} node(s) left over after the tree closed", pos)
    return kids


def validate(tree: MdtTree) -> list[str]:
    """Violations of the tree rules; an empty list means valid. Never raises."""
    out: list[str] = []
    if not tree.nodes:
        return ["tree has no nodes"]
    for i, node in enumerate(tree.nodes):
        out.extend(f"node {i}: {p}" for p in node.problems())
    roles = [n.role for n in tree.nodes]
    try:
        _preorder_children(roles)
    except StructureError as exc:
        # name the concrete rule that failed
        if roles[-1] == "C":
            out.append(f"node {len(roles) - 1}: condition node has no children (condition leaf)")
        out.append(f"not a full binary pre-order: {exc}")
    return out


def check_valid(tree: MdtTree) -> MdtTree:
    problems = validate(tree)
    if problems:
        raise TreeValidationError(problems)
    return tree


# ---------------------------------------------------------------- codecs


def preorder_encode(tree: MdtTree) -> list[MdtNode]:
    return list(tree.nodes)


def preorder_decode(nodes: Sequence[MdtNode]) -> MdtTree:
    _preorder_children([n.role for n in nodes])
    return MdtTree(tuple(nodes))


def breadth_first_encode(tree: MdtTree) -> list[MdtNode]:
    kids = tree.children()
    out, queue = [], deque([0])
    while queue:
        i = queue.popleft()
        out.append(tree.nodes[i])
        if kids[i] is not None:
            queue.extend(kids[i])
    return out


def breadth_first_decode(nodes: Sequence[MdtNode]) -> MdtTree:
    """Rebuild a tree from its level-order list; raises :class:`StructureError`."""
    nodes = list(nodes)
    n = len(nodes)
    if n == 0:
        raise StructureError("empty node list", 0)
    kids: list = [None] * n
    queue = deque([0])
    nxt = 1
    while queue:
        i = queue.popleft()
        if nodes[i].role == "C":
            if nxt + 2 > n:
                raise StructureError("node list ends before every condition has two children", nxt)
            kids[i] = (nxt, nxt + 1)
            queue.extend((nxt, nxt + 1))
            nxt += 2
    if nxt != n:
        raise StructureError(f"{n - nxt} node(s) left over after the tree closed", nxt)
    order: list[MdtNode] = []

    def walk(i):
        order.append(nodes[i])
        if kids[i] is not None:
            walk(kids[i][0])
            walk(kids[i][1])

    walk(0)
    return MdtTree(tuple(order))


# ---------------------------------------------------------------- metrics


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance over arbitrary hashable tokens (unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def levenshtein_ratio(a: Sequence, b: Sequence) -> float:
    """``1 - distance / max(len)``; two empty sequences score 1."""
    m = max(len(a), len(b))
    if m == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / m


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def triplet_counts(pred: Iterable, gold: Iterable) -> tuple[int, int, int]:
    """``(matched, n_pred, n_gold)`` after normalization and de-duplication."""
    ps = {as_triplet(t) for t in pred}
    gs = {as_triplet(t) for t in gold}
    return len(ps & gs), len(ps), len(gs)


def prf_from_counts(matched: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gold if n_gold else 0.0
    return p, r, _f1(p, r)


def triplet_prf(pred: Iterable, gold: Iterable) -> tuple[float, float, float]:
    return prf_from_counts(*triplet_counts(pred, gold))


Grouping = Sequence[tuple[Sequence, str]]


def grouping_of(tree: MdtTree) -> list[tuple[tuple[Triplet, ...], str]]:
    """Node grouping of a tree in document (pre-order) order."""
    return [(n.triplets, n.logical_rel) for n in tree.nodes]


def _group_symbol(group) -> tuple:
    triplets, rel = group
    return (str(rel).strip().lower(), tuple(sorted(as_triplet(t).sort_key() for t in triplets)))


def ng_lr(pred: Grouping, gold: Grouping) -> float:
    """Levenshtein ratio between node-grouping sequences, one symbol per group."""
    return levenshtein_ratio([_group_symbol(g) for g in pred], [_group_symbol(g) for g in gold])


def decision_paths(tree: MdtTree) -> list[tuple]:
    kids = tree.children()
    canon = [n.canonical() for n in tree.nodes]
    paths = []

    def walk(i, prefix):
        if kids[i] is None:
            paths.append(prefix + (canon[i],))
            return
        walk(kids[i][0], prefix + ((canon[i], "Y"),))
        walk(kids[i][1], prefix + ((canon[i], "N"),))

    walk(0, ())
    return paths


def tree_tokens(tree: MdtTree) -> list:
    """Flattened pre-order token sequence used by Tree_LR."""
    out: list = []
    for n in tree.nodes:
        c = n.canonical()
        out.append((c[0], c[1]))
        out.extend(c[2])
    return out


def tree_metrics(pred: MdtTree, gold: MdtTree) -> tuple[float, float, float]:
    """``(Tree_Acc, DP_F1, Tree_LR)`` for one pair of valid trees."""
    check_valid(pred)
    check_valid(gold)
    acc = float(pred.canonical() == gold.canonical())
    pp, gp = set(decision_paths(pred)), set(decision_paths(gold))
    hit = len(pp & gp)
    dp = _f1(hit / len(pp), hit / len(gp))
    lr = levenshtein_ratio(tree_tokens(pred), tree_tokens(gold))
    return acc, dp, lr


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    ng_lr: float
    tree_acc: float
    dp_f1: float
    tree_lr: float
    n: int
    n_invalid: int = 0

    def as_dict(self) -> dict:
        return {
            "Prec": self.precision,
            "Rec": self.recall,
            "F1": self.f1,
            "NG_LR": self.ng_lr,
            "Tree_Acc": self.tree_acc,
            "DP_F1": self.dp_f1,
            "Tree_LR": self.tree_lr,
            "n": self.n,
            "n_invalid": self.n_invalid,
        }


def evaluate_trees(preds: Sequence[MdtTree | None], golds: Sequence[MdtTree]) -> MetricReport:
    """Corpus-level report.

    Triplet P/R/F1 are micro-averaged over all triplets; the tree metrics and
    NG_LR are averaged per example. A prediction that is None or invalid scores
    zero on every tree metric and contributes no predicted triplets.
    """
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions for {len(golds)} gold trees")
    m = np_ = ng = 0
    accs, dps, lrs, ngs = [], [], [], []
    invalid = 0
    for pred, gold in zip(preds, golds):
        gold_trip = gold.triplets()
        ng += len(set(gold_trip))
        if pred is None or validate(pred):
            invalid += 1
            accs.append(0.0)
            dps.append(0.0)
            lrs.append(0.0)
            ngs.append(0.0)
            continue
        a, b, c = triplet_counts(pred.triplets(), gold_trip)
        m += a
        np_ += b
        acc, dp, lr = tree_metrics(pred, gold)
        accs.append(acc)
        dps.append(dp)
        lrs.append(lr)
        ngs.append(ng_lr(grouping_of(pred), grouping_of(gold)))
    p, r, f = prf_from_counts(m, np_, ng)
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    return MetricReport(p, r, f, mean(ngs), mean(accs), mean(dps), mean(lrs), len(golds), invalid)
