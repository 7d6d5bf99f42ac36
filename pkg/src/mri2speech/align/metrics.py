"""Levenshtein distance and the character / word error rates built on it."""

from __future__ import annotations

from typing import Sequence


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def char_units(text: str) -> list[str]:
    return list("".join(text.split()))


def word_units(text: str) -> list[str]:
    return text.split()


def char_errors(ref: str, hyp: str) -> tuple[int, int]:
    r = char_units(ref)
    return edit_distance(r, char_units(hyp)), len(r)


def word_errors(ref: str, hyp: str) -> tuple[int, int]:
    r = word_units(ref)
    return edit_distance(r, word_units(hyp)), len(r)


def cer(ref: str, hyp: str) -> float:
    dist, n = char_errors(ref, hyp)
    if n == 0:
        raise ValueError("reference is empty")
    return dist / n


def wer(ref: str, hyp: str) -> float:
    dist, n = word_errors(ref, hyp)
    if n == 0:
        raise ValueError("reference is empty")
    return dist / n
