"""Prompt rendering and strict response parsing for the four Text2MDT subtasks.

Templates live as literal assets in ``pilora/templates``. Response templates
are split into a header (which may itself hold slots) and one repeated item
line; the parser is driven by the same literal fragments, so anything it
accepts re-renders to the identical string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Protocol, Sequence

from pilora.exceptions import ParseError, StructureError, TreeValidationError
from pilora.mdt import (
    LOGICAL_RELS,
    RELATIONS,
    MdtNode,
    MdtTree,
    Triplet,
    as_triplet,
    breadth_first_decode,
    breadth_first_encode,
    check_valid,
    grouping_of,
)

SUBTASKS = ("triplets", "grouping", "assembling", "cot-gen-3")
_SLOT = re.compile(r"\[(Text|triplets|nodes|node_idx|role|logical_rel)\]")
_FIELD_FORBIDDEN = set(",()[]\n")


@lru_cache(maxsize=None)
def template(subtask: str, kind: str) -> str:
    """Raw template text; ``kind`` is ``"prompt"`` or ``"response"``."""
    if subtask not in SUBTASKS:
        raise ValueError(f"unknown subtask {subtask!r}; expected one of {SUBTASKS}")
    return resources.files("pilora.templates").joinpath(f"{subtask}.{kind}.txt").read_text()


@dataclass(frozen=True)
class _ResponseShape:
    header: str  # may contain [triplets]
    item: str  # one repeated line, or "" when there is no repeated part
    sep: str


@lru_cache(maxsize=None)
def _response_shape(subtask: str) -> _ResponseShape:
    text = template(subtask, "response")
    lines = text.split("\n")
    idx = [i for i, line in enumerate(lines) if "[logical_rel]" in line]
    if not idx:
        return _ResponseShape(text, "", "")
    first, second = idx[0], idx[1]
    header = "\n".join(lines[:first]) + "\n"
    sep = "\n" * (second - first)
    return _ResponseShape(header, lines[first], sep)


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class PromptInstance:
    subtask: str
    slots: dict

    def render(self) -> str:
        return render(self.subtask, self.slots)


def render(subtask: str, slots: dict) -> str:
    """Fill every ``[placeholder]`` of the prompt template by plain replacement."""
    text = template(subtask, "prompt")
    needed = sorted(set(_SLOT.findall(text)))
    missing = [name for name in needed if name not in slots]
    if missing:
        raise KeyError(f"missing slot(s) for {subtask} prompt: {', '.join('[' + m + ']' for m in missing)}")
    for name in needed:
        text = text.replace(f"[{name}]", str(slots[name]))
    return text


def format_triplet(t) -> str:
    t = as_triplet(t)
    return f"({t.subject}, {t.relation}, {t.object})"


def format_triplets(triplets: Sequence) -> str:
    return "[" + ", ".join(format_triplet(t) for t in triplets) + "]"


def _fill(line: str, values: dict) -> str:
    return _SLOT.sub(lambda m: values[m.group(1)], line)


def format_nodes(grouping: Sequence[tuple[Sequence, str]]) -> str:
    """Node grouping as the body of a grouping response (used for the ``[nodes]`` slot)."""
    shape = _response_shape("grouping")
    return shape.sep.join(_fill(shape.item, {"triplets": format_triplets(ts), "logical_rel": rel}) for ts, rel in grouping)


@dataclass(frozen=True)
class CotPayload:
    triplets: tuple[Triplet, ...]
    tree: MdtTree


def _tree_lines(subtask: str, tree: MdtTree) -> str:
    shape = _response_shape(subtask)
    return shape.sep.join(
        _fill(
            shape.item,
            {"node_idx": str(i), "role": n.role, "logical_rel": n.logical_rel, "triplets": format_triplets(n.triplets)},
        )
        for i, n in enumerate(breadth_first_encode(tree), 1)
    )


def render_response(subtask: str, payload) -> str:
    shape = _response_shape(subtask)
    if subtask == "triplets":
        return shape.header.replace("[triplets]", format_triplets(payload))
    if subtask == "grouping":
        return shape.header + format_nodes(payload)
    if subtask == "assembling":
        return shape.header + _tree_lines(subtask, payload)
    if subtask == "cot-gen-3":
        if isinstance(payload, MdtTree):
            payload = CotPayload(tuple(payload.triplets()), payload)
        return shape.header.replace("[triplets]", format_triplets(payload.triplets)) + _tree_lines(subtask, payload.tree)
    raise ValueError(f"unknown subtask {subtask!r}")


def prompt_for(subtask: str, text: str, triplets=None, grouping=None) -> str:
    slots = {"Text": text}
    if triplets is not None:
        slots["triplets"] = format_triplets(triplets)
    if grouping is not None:
        slots["nodes"] = format_nodes(grouping)
    return render(subtask, slots)


# ---------------------------------------------------------------- parsing


@dataclass(frozen=True)
class ParsedResponse:
    subtask: str
    payload: object


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    @property
    def line(self) -> int:
        return self.text.count("\n", 0, self.pos) + 1

    def fail(self, message: str, expected: str) -> ParseError:
        return ParseError(message, self.line, expected)

    def literal(self, lit: str, production: str) -> None:
        if not self.text.startswith(lit, self.pos):
            got = self.text[self.pos : self.pos + max(len(lit), 1)]
            raise self.fail(f"unexpected text {got!r}", f"{production} {lit!r}")
        self.pos += len(lit)

    def at(self, lit: str) -> bool:
        return self.text.startswith(lit, self.pos)

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def field(self, production: str) -> str:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in _FIELD_FORBIDDEN:
            self.pos += 1
        value = self.text[start : self.pos]
        if not value or value != " ".join(value.split()):
            self.pos = start
            raise self.fail(f"bad {production} {value!r}", f"{production} (non-empty, single-spaced)")
        return value

    def one_of(self, options: Sequence[str], production: str) -> str:
        for opt in sorted(options, key=len, reverse=True):
            if self.text.startswith(opt, self.pos):
                self.pos += len(opt)
                return opt
        raise self.fail(f"unexpected text {self.text[self.pos:self.pos + 12]!r}", f"{production} in {list(options)}")

    def integer(self, production: str) -> int:
        m = re.compile(r"[1-9][0-9]*").match(self.text, self.pos)
        if not m:
            raise self.fail("missing integer", production)
        self.pos = m.end()
        return int(m.group())


def _parse_triplet(cur: _Cursor) -> Triplet:
    cur.literal("(", "triplet")
    sub = cur.field("subject")
    cur.literal(", ", "triplet separator")
    rel = cur.one_of(RELATIONS, "relation")
    cur.literal(", ", "triplet separator")
    obj = cur.field("object")
    cur.literal(")", "triplet end")
    return Triplet(sub, rel, obj)


def _parse_triplet_list(cur: _Cursor) -> list[Triplet]:
    cur.literal("[", "triplet list")
    out = []
    if cur.at("]"):
        cur.pos += 1
        return out
    out.append(_parse_triplet(cur))
    while cur.at(", "):
        cur.pos += 2
        out.append(_parse_triplet(cur))
    cur.literal("]", "triplet list end")
    return out


def _parse_line(cur: _Cursor, line_template: str) -> dict:
    """Match one templated line; returns parsed slot values."""
    values: dict = {}
    pieces = _SLOT.split(line_template)
    # split alternates literal, slot-name, literal, ...
    for k, piece in enumerate(pieces):
        if k % 2 == 0:
            if piece:
                cur.literal(piece, "literal")
            continue
        if piece == "triplets":
            values[piece] = _parse_triplet_list(cur)
        elif piece == "node_idx":
            values[piece] = cur.integer("node index")
        elif piece == "role":
            values[piece] = cur.one_of(("C", "D"), "role")
        elif piece == "logical_rel":
            values[piece] = cur.one_of(LOGICAL_RELS, "logical_rel")
        else:
            raise ValueError(f"unexpected slot {piece!r} in response template")
    return values


def _parse_items(cur: _Cursor, shape: _ResponseShape) -> list[dict]:
    items = [_parse_line(cur, shape.item)]
    while not cur.at_end():
        cur.literal(shape.sep, "item separator")
        items.append(_parse_line(cur, shape.item))
    return items


def _node_from(values: dict) -> MdtNode:
    return MdtNode(values["role"], tuple(values["triplets"]), values["logical_rel"])


def _tree_from_items(cur: _Cursor, items: list[dict]) -> MdtTree:
    for k, values in enumerate(items, 1):
        if values["node_idx"] != k:
            raise ParseError(f"node index {values['node_idx']} out of sequence", None, f"node index {k}")
    tree = breadth_first_decode([_node_from(v) for v in items])
    return check_valid(tree)


def parse(subtask: str, text: str) -> ParsedResponse:
    """Strict parse of a response.

    Raises :class:`ParseError` for grammar violations, :class:`StructureError`
    when the node roles cannot close a full binary tree and
    :class:`TreeValidationError` for semantic rule violations.
    """
    shape = _response_shape(subtask)
    cur = _Cursor(text)
    if subtask == "triplets":
        values = _parse_line(cur, shape.header)
        if not cur.at_end():
            raise cur.fail("trailing text", "end of response")
        return ParsedResponse(subtask, values["triplets"])
    if subtask == "grouping":
        cur.literal(shape.header, "header")
        items = _parse_items(cur, shape)
        grouping = []
        for v in items:
            problems = MdtNode("C", tuple(v["triplets"]), v["logical_rel"]).problems()
            if problems:
                raise TreeValidationError(problems)
            grouping.append((tuple(v["triplets"]), v["logical_rel"]))
        return ParsedResponse(subtask, grouping)
    if subtask == "assembling":
        cur.literal(shape.header, "header")
        return ParsedResponse(subtask, _tree_from_items(cur, _parse_items(cur, shape)))
    if subtask == "cot-gen-3":
        head = _parse_line(cur, shape.header)
        tree = _tree_from_items(cur, _parse_items(cur, shape))
        return ParsedResponse(subtask, CotPayload(tuple(head["triplets"]), tree))
    raise ValueError(f"unknown subtask {subtask!r}")


# ---------------------------------------------------------------- runners


class Generator(Protocol):
    def __call__(self, prompt: str) -> str: ...


class TruncationError(RuntimeError):
    """Generation hit the length limit before the end-of-sequence marker."""

    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"generation truncated after {len(raw)} characters")


@dataclass
class Diagnostic:
    """A failed run: the stage that failed, the error, and the raw generation."""

    stage: str
    error: str
    raw: str

    def __bool__(self) -> bool:
        return False


def _run(generate: Generator, subtask: str, prompt: str, truncation: str):
    try:
        raw = generate(prompt)
    except TruncationError as exc:
        if truncation == "raise":
            raise
        return None, Diagnostic(subtask, str(exc), exc.raw)
    try:
        return parse(subtask, raw), None
    except (ParseError, StructureError, TreeValidationError) as exc:
        return None, Diagnostic(subtask, f"{type(exc).__name__}: {exc}", raw)


def end2end_run(generate: Generator, text: str, truncation: str = "raise") -> MdtTree | Diagnostic:
    """One COT-Gen-3 prompt; returns the parsed tree or a :class:`Diagnostic`."""
    parsed, diag = _run(generate, "cot-gen-3", prompt_for("cot-gen-3", text), truncation)
    return diag if diag is not None else parsed.payload.tree


def pipeline_run(generate: Generator, text: str, truncation: str = "raise") -> MdtTree | Diagnostic:
    """Triplet extraction, then node grouping, then tree assembling."""
    parsed, diag = _run(generate, "triplets", prompt_for("triplets", text), truncation)
    if diag is not None:
        return diag
    triplets = parsed.payload
    parsed, diag = _run(generate, "grouping", prompt_for("grouping", text, triplets=triplets), truncation)
    if diag is not None:
        return diag
    grouping = parsed.payload
    parsed, diag = _run(generate, "assembling", prompt_for("assembling", text, grouping=grouping), truncation)
    return diag if diag is not None else parsed.payload


def gold_generator(text_to_tree: dict[str, MdtTree]) -> Callable[[str], str]:
    """Teacher-forced generator answering every subtask with gold responses."""
    by_prompt: dict[str, str] = {}
    for text, tree in text_to_tree.items():
        trip = tree.triplets()
        grouping = grouping_of(tree)
        by_prompt[prompt_for("triplets", text)] = render_response("triplets", trip)
        by_prompt[prompt_for("grouping", text, triplets=trip)] = render_response("grouping", grouping)
        by_prompt[prompt_for("assembling", text, grouping=grouping)] = render_response("assembling", tree)
        by_prompt[prompt_for("cot-gen-3", text)] = render_response("cot-gen-3", tree)
    return lambda prompt: by_prompt[prompt]
