"""Seeded synthetic Text2MDT corpus.

Texts are a deterministic realization of the gold tree::

    If <condition>, then <yes-branch>, otherwise <no-branch>.

where branches nest the same way and node triplets are joined by the node's
logical relation. The grammar is prefix-unambiguous, so distinct canonical
trees always realize to distinct texts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pilora.exceptions import ConfigError, DataError
from pilora.mdt import MdtNode, MdtTree, Triplet, check_valid

# relation -> verb phrase used in the realized text
VERBS = {
    "clinical manifestations": " shows ",
    "basic situation": " has ",
    "therapeutic drugs": " takes ",
    "usage and dosage": " is dosed ",
    "treatment plan": " undergoes ",
    "prohibited drugs": " avoids ",
}
CONDITION_RELATIONS = ("clinical manifestations", "basic situation")
DECISION_RELATIONS = ("therapeutic drugs", "usage and dosage", "treatment plan", "prohibited drugs")

SUBJECTS = ("patient", "child", "adult", "woman")
OBJECTS = {
    "clinical manifestations": ("fever", "cough", "rash", "nausea", "headache", "fatigue", "edema", "wheezing"),
    "basic situation": ("diabetes", "pregnancy", "asthma", "hypertension", "allergy", "infection", "obesity", "anemia"),
    "therapeutic drugs": ("aspirin", "insulin", "penicillin", "ibuprofen", "heparin", "metformin", "warfarin", "steroids"),
    "usage and dosage": ("low dose", "high dose", "daily", "weekly", "hourly", "single dose", "twice daily", "bolus"),
    "treatment plan": ("surgery", "dialysis", "rest", "oxygen", "observation", "transfusion", "rehydration", "splinting"),
    "prohibited drugs": ("codeine", "opioids", "sedatives", "nsaids", "alcohol", "caffeine", "antacids", "diuretics"),
}
JOINERS = {"and": " and ", "or": " or "}


@dataclass(frozen=True)
class GenSpec:
    seed: int = 7
    n_trees: int = 500
    max_depth: int = 3
    triplets_per_node: tuple[int, int] = (1, 2)
    n_subjects: int = 2
    n_objects: int = 6
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    p_branch: float = 0.55

    def __post_init__(self):
        if self.max_depth < 1 or self.max_depth > 4:
            raise ConfigError(f"max_depth must be in [1, 4], got {self.max_depth}")
        lo, hi = self.triplets_per_node
        if not (1 <= lo <= hi <= 3):
            raise ConfigError(f"triplets_per_node must satisfy 1 <= lo <= hi <= 3, got {self.triplets_per_node}")
        if not (1 <= self.n_subjects <= len(SUBJECTS)):
            raise ConfigError(f"n_subjects must be in [1, {len(SUBJECTS)}]")
        if not (2 <= self.n_objects <= 8):
            raise ConfigError("n_objects must be in [2, 8]")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(s < 0 for s in self.split):
            raise ConfigError(f"split ratios must be nonnegative and sum to 1, got {self.split}")
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if not 0.0 <= self.p_branch <= 1.0:
            raise ConfigError("p_branch must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "GenSpec":
        doc = dict(doc)
        for k in ("triplets_per_node", "split"):
            if k in doc:
                doc[k] = tuple(doc[k])
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GenSpec field(s): {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["triplets_per_node"] = list(self.triplets_per_node)
        d["split"] = list(self.split)
        return d


def vocabulary(spec: GenSpec) -> dict[str, tuple[str, ...]]:
    """Entity strings the generator can emit, keyed by role."""
    return {
        "subjects": SUBJECTS[: spec.n_subjects],
        **{rel: objs[: spec.n_objects] for rel, objs in OBJECTS.items()},
    }


@dataclass
class Example:
    text: str
    tree: MdtTree

    def to_json(self) -> str:
        return json.dumps({"text": self.text, "tree": self.tree.to_dict("preorder")}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Example":
        doc = json.loads(line)
        return cls(doc["text"], MdtTree.from_dict(doc["tree"]))


@dataclass
class Corpus:
    train: list[Example] = field(default_factory=list)
    dev: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, exs in self.splits().items():
            h.update(name.encode())
            for ex in exs:
                h.update(ex.to_json().encode())
        return h.hexdigest()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, exs in self.splits().items():
            (d / f"{name}.jsonl").write_text("".join(ex.to_json() + "\n" for ex in exs))

    @classmethod
    def load(cls, directory) -> "Corpus":
        d = Path(directory)
        out = {}
        for name in ("train", "dev", "test"):
            p = d / f"{name}.jsonl"
            if not p.exists():
                raise DataError(f"corpus file not found: {p}")
            out[name] = [Example.from_json(line) for line in p.read_text().splitlines() if line.strip()]
        return cls(**out)


def _triplet_phrase(t: Triplet) -> str:
    return f"{t.subject}{VERBS[t.relation]}{t.object}"


def _node_phrase(node: MdtNode) -> str:
    parts = [_triplet_phrase(t) for t in node.canonicalized().triplets]
    return JOINERS.get(node.logical_rel, "").join(parts) if len(parts) > 1 else parts[0]


def realize_text(tree: MdtTree) -> str:
    kids = tree.children()

    def walk(i: int, top: bool) -> str:
        node = tree.nodes[i]
        if kids[i] is None:
            return _node_phrase(node)
        left, right = kids[i]
        lead = "If " if top else "if "
        return f"{lead}{_node_phrase(node)}, then {walk(left, False)}, otherwise {walk(right, False)}"

    return walk(0, True) + "."


def _sample_node(rng: np.random.Generator, spec: GenSpec, role: str, used: set) -> MdtNode:
    vocab = vocabulary(spec)
    rels = CONDITION_RELATIONS if role == "C" else DECISION_RELATIONS
    lo, hi = spec.triplets_per_node
    n = int(rng.integers(lo, hi + 1))
    triplets = []
    while len(triplets) < n:
        rel = rels[int(rng.integers(len(rels)))]
        t = Triplet(
            vocab["subjects"][int(rng.integers(len(vocab["subjects"])))],
            rel,
            vocab[rel][int(rng.integers(len(vocab[rel])))],
        )
        if t not in used:
            used.add(t)
            triplets.append(t)
    rel = "null" if n == 1 else ("and", "or")[int(rng.integers(2))]
    return MdtNode(role, tuple(sorted(triplets, key=Triplet.sort_key)), rel)


def sample_tree(rng: np.random.Generator, spec: GenSpec) -> MdtTree:
    nodes: list[MdtNode] = []
    used: set = set()

    def grow(depth: int) -> None:
        if depth < spec.max_depth and rng.random() < spec.p_branch:
            nodes.append(_sample_node(rng, spec, "C", used))
            grow(depth + 1)
            grow(depth + 1)
        else:
            nodes.append(_sample_node(rng, spec, "D", used))

    grow(1)
    return MdtTree(tuple(nodes))


def gen_corpus(spec: GenSpec | None = None) -> Corpus:
    """Distinct trees, split train/dev/test in generation order."""
    spec = spec or GenSpec()
    rng = np.random.default_rng(spec.seed)
    seen: set = set()
    examples: list[Example] = []
    attempts = 0
    while len(examples) < spec.n_trees:
        attempts += 1
        if attempts > 200 * spec.n_trees:
            raise DataError(f"could not draw {spec.n_trees} distinct trees from this vocabulary")
        tree = sample_tree(rng, spec)
        key = tree.canonical()
        if key in seen:
            continue
        seen.add(key)
        check_valid(tree)
        examples.append(Example(realize_text(tree), tree))
    n_train = int(round(spec.split[0] * spec.n_trees))
    n_dev = int(round(spec.split[1] * spec.n_trees))
    return Corpus(examples[:n_train], examples[n_train : n_train + n_dev], examples[n_train + n_dev :])
