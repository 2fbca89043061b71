"""Input checks shared by the estimator classes."""

from __future__ import annotations

import math
from typing import Sequence

from sklearn.utils.validation import check_consistent_length

from pilora.exceptions import DataError
from pilora.mdt import MdtTree, check_valid


def check_texts(X) -> list[str]:
    """A non-empty sequence of non-empty strings."""
    if isinstance(X, str):
        raise DataError("expected a sequence of texts, got a single string")
    try:
        texts = list(X)
    except TypeError:
        raise DataError(f"expected a sequence of texts, got {type(X).__name__}") from None
    if not texts:
        raise DataError("no texts given")
    for i, t in enumerate(texts):
        if not isinstance(t, str) or not t.strip():
            raise DataError(f"text {i} is empty or not a string")
    return texts


def check_trees(y, allow_none: bool = False) -> list[MdtTree | None]:
    trees = list(y)
    for i, t in enumerate(trees):
        if t is None and allow_none:
            continue
        if not isinstance(t, MdtTree):
            raise DataError(f"target {i} is not an MdtTree")
        check_valid(t)
    return trees


def check_xy(X, y) -> tuple[list[str], list[MdtTree]]:
    texts = check_texts(X)
    trees = check_trees(y)
    try:
        check_consistent_length(texts, trees)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return texts, trees


def holdout_split(n: int, fraction: float) -> tuple[Sequence[int], Sequence[int]]:
    """Deterministic tail split: the last ``ceil(fraction * n)`` rows (at least one) are held out."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"validation_fraction must lie in (0, 1), got {fraction}")
    if n < 2:
        raise DataError("need at least two examples to hold one out")
    k = max(1, min(n - 1, math.ceil(fraction * n)))
    return range(n - k), range(n - k, n)
