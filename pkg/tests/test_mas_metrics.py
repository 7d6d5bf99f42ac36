import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mri2speech.align import (AlignmentPath, alignment_to_durations, cer, char_errors, edit_distance, mas_exhaustive,
                              monotonic_alignment_search, path_score, wer, word_errors)
from mri2speech.errors import InfeasibleError


def test_mas_small_example():
    path = monotonic_alignment_search(np.array([[0.0, -1.0, -1.0], [-5.0, 0.0, 0.0]]))
    assert path.assignment.tolist() == [1, 2, 2]
    assert alignment_to_durations(path).tolist() == [1, 2]


def test_mas_square_is_diagonal():
    path = monotonic_alignment_search(np.zeros((4, 4)))
    assert path.assignment.tolist() == [1, 2, 3, 4]


def test_mas_ties_stay():
    # backtracking from the last frame keeps the current text index on ties
    path = monotonic_alignment_search(np.zeros((2, 4)))
    assert path.assignment.tolist() == [1, 2, 2, 2]


def test_mas_errors():
    with pytest.raises(InfeasibleError):
        monotonic_alignment_search(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        AlignmentPath(np.array([1, 3]))
    with pytest.raises(ValueError):
        AlignmentPath(np.array([2, 2]))


def test_mas_matches_exhaustive(rng):
    for _ in range(300):
        Tx = int(rng.integers(1, 6))
        Ty = int(rng.integers(Tx, 9))
        ll = rng.normal(size=(Tx, Ty))
        path = monotonic_alignment_search(ll)
        best, _ = mas_exhaustive(ll)
        assert path_score(ll, path) == best
        d = alignment_to_durations(path, Tx)
        assert d.sum() == Ty and d.min() >= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 10**6))
def test_mas_invariants(Tx, extra, seed):
    ll = np.random.default_rng(seed).normal(size=(Tx, Tx + extra))
    a = monotonic_alignment_search(ll).assignment
    assert a[0] == 1 and a[-1] == Tx
    assert set(np.diff(a).tolist()) <= {0, 1}


def test_metrics_known_values():
    assert edit_distance("kitten", "sitting") == 3
    assert wer("the cat sat", "the cat sit") == pytest.approx(1 / 3)
    assert cer("abc", "abc") == 0.0
    assert char_errors("ab cd", "abcd") == (0, 4)
    assert word_errors("a b", "") == (2, 2)
    with pytest.raises(ValueError):
        cer("", "x")
    with pytest.raises(ValueError):
        wer("  ", "x")


def _dp_oracle(a, b):
    """Full-matrix Wagner-Fischer, written independently of the library."""
    D = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    D[:, 0] = np.arange(len(a) + 1)
    D[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            D[i, j] = min(D[i - 1, j] + 1, D[i, j - 1] + 1, D[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(D[-1, -1])


@settings(max_examples=100, deadline=None)
@given(st.text("ab c", min_size=1, max_size=15).filter(lambda s: s.strip()), st.text("ab c", max_size=15))
def test_metrics_match_oracle(ref, hyp):
    r, h = "".join(ref.split()), "".join(hyp.split())
    assert cer(ref, hyp) == _dp_oracle(r, h) / len(r)
    assert wer(ref, hyp) == _dp_oracle(ref.split(), hyp.split()) / len(ref.split())
