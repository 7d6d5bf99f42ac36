import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mri2speech.align import (FramePosterior, collapse, ctc_beam_decode, ctc_enumeration_oracle, ctc_greedy_decode,
                              ctc_nll, ctc_nll_and_grad, min_frames)
from mri2speech.errors import InfeasibleError, StateError
from mri2speech.text import BOS, NGramLM, TokenAlphabet


def log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def random_post(rng, T, K):
    return log_softmax(rng.normal(size=(T, K)) * 2.0)


def test_closed_forms():
    uniform = np.log(np.full((2, 2), 0.5))
    # T=2, K=2 uniform, label [1]: paths (1,1), (0,1), (1,0) -> 3/4
    assert ctc_nll(uniform, [1]) == pytest.approx(-math.log(0.75), abs=1e-12)
    # one frame, certain emission
    assert ctc_nll(np.log(np.array([[1e-300, 1.0]])), [1]) == pytest.approx(0.0, abs=1e-12)
    # T=3 uniform over {blank, a}, label [a]: 6 of 8 paths collapse to 'a' ... and only those
    p = np.log(np.full((3, 2), 0.5))
    count = sum(collapse(path) == [1] for path in itertools.product(range(2), repeat=3))
    assert ctc_nll(p, [1]) == pytest.approx(-math.log(count / 8))


def test_collapse_and_min_frames():
    assert collapse([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 1, 2]
    assert min_frames([1, 1, 2]) == 4
    assert min_frames([]) == 0


def test_infeasible_and_bad_labels():
    p = np.log(np.full((2, 3), 1 / 3))
    with pytest.raises(InfeasibleError):
        ctc_nll(p, [1, 1])
    with pytest.raises(ValueError):
        ctc_nll(p, [0])
    assert ctc_enumeration_oracle(p, [1, 1]) == math.inf


def test_oracle_agreement_small_grid(rng):
    for _ in range(200):
        T, K = rng.integers(1, 6), rng.integers(2, 4)
        n = rng.integers(0, 4)
        labels = rng.integers(1, K, size=n).tolist()
        lp = random_post(rng, T, K)
        ref = ctc_enumeration_oracle(lp, labels)
        if math.isinf(ref):
            with pytest.raises(InfeasibleError):
                ctc_nll(lp, labels)
        else:
            assert abs(ctc_nll(lp, labels) - ref) < 1e-9


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(5)
    for T in range(1, 5):
        for K in (2, 3):
            lp = random_post(rng, T, K)
            total = 0.0
            for n in range(0, T + 1):
                for labels in itertools.product(range(1, K), repeat=n):
                    if min_frames(labels) <= T:
                        total += math.exp(-ctc_nll(lp, list(labels)))
            assert total == pytest.approx(1.0, abs=1e-6)


def test_gradient_matches_finite_differences(rng):
    for _ in range(10):
        T, K = 5, 3
        lp = random_post(rng, T, K)
        labels = [1, 2]
        _, grad = ctc_nll_and_grad(lp, labels)
        h = 1e-5
        num = np.zeros_like(lp)
        for t in range(T):
            for k in range(K):
                e = np.zeros_like(lp)
                e[t, k] = h
                num[t, k] = (ctc_nll(lp + e, labels) - ctc_nll(lp - e, labels)) / (2 * h)
        assert np.max(np.abs(num - grad)) / max(np.max(np.abs(num)), 1e-12) < 1e-4


def test_frame_posterior_validation():
    alpha = TokenAlphabet.for_ctc(["A", "B"])
    with pytest.raises(ValueError):
        FramePosterior(np.zeros((3, 3)), alpha)
    fp = FramePosterior(np.log(np.full((4, 3), 1 / 3)), alpha)
    assert fp.T == 4 and fp.blank == 0
    assert ctc_nll(fp, [1]) == pytest.approx(ctc_nll(fp.log_probs, [1]))


def test_greedy_decode():
    lp = np.log(np.array([[0.1, 0.8, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]))
    assert ctc_greedy_decode(lp) == [1, 1, 2]


def _brute_best(lp, K, max_len):
    best, arg = -math.inf, None
    for n in range(0, max_len + 1):
        for labels in itertools.product(range(1, K), repeat=n):
            if min_frames(labels) > lp.shape[0]:
                continue
            s = -ctc_nll(lp, list(labels))
            if s > best:
                best, arg = s, list(labels)
    return arg


def test_exact_beam_finds_most_probable_labeling(rng):
    for _ in range(20):
        lp = random_post(rng, 4, 3)
        assert ctc_beam_decode(lp, beam=None) == _brute_best(lp, 3, 4)


def test_greedy_and_beam_agree_on_peaked_posteriors(rng):
    for _ in range(20):
        T, K = 8, 4
        path = rng.integers(0, K, size=T)
        lp = np.log(np.full((T, K), 0.01 / (K - 1)))
        lp[np.arange(T), path] = np.log(0.99)
        assert ctc_greedy_decode(lp) == ctc_beam_decode(lp, beam=64)


def test_lm_fusion_breaks_acoustic_ties():
    # acoustics cannot tell tokens 1 and 2 apart, so the LM decides the order
    lp = np.log(np.array([[0.02, 0.49, 0.49], [0.98, 0.01, 0.01], [0.02, 0.49, 0.49]]))
    for seq in ([2, 1], [1, 2], [2, 2]):
        lm = NGramLM.train([seq] * 20, [1, 2], order=2)
        assert ctc_beam_decode(lp, lm=lm, beam=8, lm_weight=1.0) == seq
    assert ctc_beam_decode(lp, beam=8) in ([1, 1], [1, 2], [2, 1], [2, 2])


def test_beam_errors():
    lp = np.log(np.full((3, 3), 1 / 3))
    with pytest.raises(ValueError):
        ctc_beam_decode(lp, beam=0)
    with pytest.raises(StateError):
        ctc_beam_decode(lp, lm=NGramLM(2, [1, 2]), lm_weight=0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 3), st.lists(st.integers(1, 2), max_size=3), st.integers(0, 10**6))
def test_oracle_property(T, K, labels, seed):
    labels = [min(l, K - 1) for l in labels]
    lp = random_post(np.random.default_rng(seed), T, K)
    ref = ctc_enumeration_oracle(lp, labels)
    if math.isfinite(ref):
        assert abs(ctc_nll(lp, labels) - ref) < 1e-9
