"""Connectionist temporal classification in log space.

``ctc_nll`` runs the forward recursion over the blank-extended label sequence;
``ctc_nll_and_grad`` adds the backward pass for the gradient with respect to
the per-frame log-probabilities.  ``ctc_enumeration_oracle`` is the brute-force
counterpart that sums over every frame-level path explicitly.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InfeasibleError, StateError
from ..text import BOS, NGramLM, TokenAlphabet

NEG_FLOOR = -1e10


@dataclass(frozen=True)
class FramePosterior:
    log_probs: np.ndarray  # [T, K]
    alphabet: TokenAlphabet

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[1] != len(self.alphabet):
            raise ValueError(f"log_probs must be [T, {len(self.alphabet)}], got {lp.shape}")
        norms = np.logaddexp.reduce(lp, axis=1)
        if lp.shape[0] and np.max(np.abs(norms)) > 1e-5:
            raise ValueError("each frame's log-probabilities must log-sum-exp to 0")
        object.__setattr__(self, "log_probs", lp)

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def blank(self) -> int:
        return self.alphabet.blank_index


def collapse(path: Sequence[int], blank: int = 0) -> list[int]:
    """Merge repeated symbols, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def min_frames(labels: Sequence[int]) -> int:
    """Fewest frames that can emit ``labels``: one per label plus a blank per repeat."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _unpack(post, blank):
    if isinstance(post, FramePosterior):
        return post.log_probs, post.blank
    return np.asarray(post, dtype=np.float64), blank


def _check_labels(labels, T, K, blank):
    labels = [int(l) for l in labels]
    if any(l == blank for l in labels):
        raise ValueError("labels may not contain the blank token")
    if any(not 0 <= l < K for l in labels):
        raise ValueError("label id outside the alphabet")
    if min_frames(labels) > T:
        raise InfeasibleError(f"{len(labels)} labels need at least {min_frames(labels)} frames, got {T}")
    return labels


def _extend(labels, blank):
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(len(ext), dtype=bool)
    for s in range(2, len(ext)):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    return ext, skip


def _forward(lp, ext, skip):
    T, S = lp.shape[0], len(ext)
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]
    return alpha


def _backward(lp, ext, skip):
    """beta[t, s]: log-prob of emitting the rest after frame t, given state s at t."""
    T, S = lp.shape[0], len(ext)
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


def _total(alpha):
    S = alpha.shape[1]
    return np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if S > 1 else alpha[-1, -1]


def ctc_nll(post, labels: Sequence[int], blank: int = 0) -> float:
    """-log sum over all frame paths collapsing to ``labels``."""
    lp, blank = _unpack(post, blank)
    T, K = lp.shape
    labels = _check_labels(labels, T, K, blank)
    lp = np.maximum(lp, NEG_FLOOR)
    ext, skip = _extend(labels, blank)
    return float(-_total(_forward(lp, ext, skip)))


def ctc_nll_and_grad(post, labels: Sequence[int], blank: int = 0) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. every entry of ``log_probs``.

    Entries are treated as free variables (no softmax coupling), so the
    gradient is minus the posterior occupancy of each (frame, token) pair.
    """
    lp, blank = _unpack(post, blank)
    T, K = lp.shape
    labels = _check_labels(labels, T, K, blank)
    lp = np.maximum(lp, NEG_FLOOR)
    ext, skip = _extend(labels, blank)
    alpha = _forward(lp, ext, skip)
    beta = _backward(lp, ext, skip)
    logp = _total(alpha)
    occ = np.exp(alpha + beta - logp)  # [T, S]
    grad = np.zeros((T, K))
    for s, k in enumerate(ext):
        grad[:, k] -= occ[:, s]
    return float(-logp), grad


def ctc_enumeration_oracle(post, labels: Sequence[int], blank: int = 0, max_paths: int = 10**6) -> float:
    """Brute-force CTC: enumerate all K**T paths.  Returns +inf when no path collapses to ``labels``."""
    lp, blank = _unpack(post, blank)
    T, K = lp.shape
    if K ** T > max_paths:
        raise ValueError(f"K**T = {K ** T} paths exceeds the enumeration limit {max_paths}")
    target = [int(l) for l in labels]
    if any(l == blank for l in target):
        raise ValueError("labels may not contain the blank token")
    total = 0.0
    for path in itertools.product(range(K), repeat=T):
        if collapse(path, blank) == target:
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def ctc_greedy_decode(post, blank: int = 0) -> list[int]:
    lp, blank = _unpack(post, blank)
    return collapse(np.argmax(lp, axis=1).tolist(), blank)


def ctc_beam_decode(post, lm: NGramLM | None = None, beam: int | None = 16, lm_weight: float = 0.0,
                    blank: int = 0) -> list[int]:
    """CTC prefix beam search with optional n-gram shallow fusion.

    Prefixes are ranked by ``log P_ctc(prefix) + lm_weight * log P_lm(prefix)``;
    the language model is applied every time a token is appended.  ``beam=None``
    disables pruning, which makes the search exact.
    """
    lp, blank = _unpack(post, blank)
    if beam is not None and beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    use_lm = lm is not None and lm_weight != 0.0
    if use_lm and not lm.trained:
        raise StateError("language model has not been trained")
    ninf = -np.inf
    lp = np.maximum(lp, NEG_FLOOR)
    T, K = lp.shape
    pad = (BOS,) * (lm.order - 1) if use_lm else ()
    lm_cache: dict[tuple, float] = {(): 0.0}

    def lm_of(prefix):
        if prefix not in lm_cache:
            parent = prefix[:-1]
            lm_cache[prefix] = lm_of(parent) + lm.cond_logprob(pad + parent, prefix[-1])
        return lm_cache[prefix]

    def rank(prefix, scores):
        ac = np.logaddexp(*scores)
        return ac + (lm_weight * lm_of(prefix) if use_lm else 0.0)

    beams: dict[tuple, tuple[float, float]] = {(): (0.0, ninf)}  # prefix -> (ends in blank, ends in symbol)
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [ninf, ninf])
        for prefix, (pb, pnb) in beams.items():
            last = prefix[-1] if prefix else None
            for k in range(K):
                p = row[k]
                if k == blank:
                    e = nxt[prefix]
                    e[0] = np.logaddexp(e[0], np.logaddexp(pb, pnb) + p)
                    continue
                new = prefix + (k,)
                e = nxt[new]
                if k == last:
                    e[1] = np.logaddexp(e[1], pb + p)
                    stay = nxt[prefix]
                    stay[1] = np.logaddexp(stay[1], pnb + p)
                else:
                    e[1] = np.logaddexp(e[1], np.logaddexp(pb, pnb) + p)
        items = [(pre, (s[0], s[1])) for pre, s in nxt.items()]
        items.sort(key=lambda it: (-rank(it[0], it[1]), it[0]))
        if beam is not None:
            items = items[:beam]
        beams = dict(items)
    best = min(beams.items(), key=lambda it: (-rank(it[0], it[1]), it[0]))
    return list(best[0])
