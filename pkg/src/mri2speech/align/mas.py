"""Monotonic alignment search between text positions and acoustic frames."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import InfeasibleError


@dataclass(frozen=True)
class AlignmentPath:
    """Text index (1-based) assigned to each frame; monotone and surjective."""

    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        if a.size == 0:
            raise ValueError("empty alignment")
        steps = np.diff(a)
        if a[0] != 1 or np.any((steps != 0) & (steps != 1)):
            raise ValueError("alignment must start at 1 and advance by 0 or +1 per frame")
        object.__setattr__(self, "assignment", a)

    @property
    def num_text(self) -> int:
        return int(self.assignment[-1])

    @property
    def num_frames(self) -> int:
        return int(self.assignment.size)


def monotonic_alignment_search(loglike) -> AlignmentPath:
    """Best monotone surjective alignment of ``Tx`` text rows onto ``Ty`` frame columns.

    ``loglike`` is ``[Tx, Ty]``.  When staying on the current text index and
    advancing from the previous one score the same, the path stays.
    """
    ll = np.asarray(loglike, dtype=np.float64)
    if ll.ndim != 2:
        raise ValueError(f"loglike must be 2-D, got shape {ll.shape}")
    Tx, Ty = ll.shape
    if Tx < 1 or Ty < Tx:
        raise InfeasibleError(f"cannot align {Tx} text positions onto {Ty} frames")
    Q = np.full((Tx, Ty), -np.inf)
    Q[0, 0] = ll[0, 0]
    for j in range(1, Ty):
        stay = Q[:, j - 1]
        adv = np.concatenate(([-np.inf], Q[:-1, j - 1]))
        Q[:, j] = ll[:, j] + np.maximum(stay, adv)
    a = np.empty(Ty, dtype=np.int64)
    i = Tx - 1
    for j in range(Ty - 1, 0, -1):
        a[j] = i
        if i > 0 and (i == j or Q[i - 1, j - 1] > Q[i, j - 1]):
            i -= 1
    a[0] = i
    return AlignmentPath(a + 1)


def path_score(loglike, path: AlignmentPath) -> float:
    ll = np.asarray(loglike, dtype=np.float64)
    s = 0.0
    for j, i in enumerate(path.assignment):
        s = s + ll[i - 1, j]
    return s


def mas_exhaustive(loglike) -> tuple[float, AlignmentPath]:
    """Brute-force maximum over all C(Ty-1, Tx-1) monotone surjective paths."""
    ll = np.asarray(loglike, dtype=np.float64)
    Tx, Ty = ll.shape
    if Tx < 1 or Ty < Tx:
        raise InfeasibleError(f"cannot align {Tx} text positions onto {Ty} frames")
    best = (-np.inf, None)
    for advances in itertools.combinations(range(1, Ty), Tx - 1):
        a = np.ones(Ty, dtype=np.int64)
        for j in advances:
            a[j:] += 1
        path = AlignmentPath(a)
        score = path_score(ll, path)
        if score > best[0]:
            best = (score, path)
    return best


def alignment_to_durations(path: AlignmentPath, num_text: int | None = None) -> np.ndarray:
    """Frames per text index; sums to the frame count, every entry >= 1."""
    num_text = path.num_text if num_text is None else num_text
    if num_text != path.num_text:
        raise ValueError(f"path covers {path.num_text} text positions, expected {num_text}")
    return np.bincount(path.assignment - 1, minlength=num_text).astype(np.int64)
