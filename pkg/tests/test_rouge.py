"""ROUGE fixtures and the exhaustive-subsequence LCS oracle."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixlab.rouge import (
    lcs_length,
    rouge_l,
    rouge_n,
    score_corpus,
    score_pair,
    tokenize,
)


def brute_force_lcs(a, b):
    """Enumerate all subsequences of the shorter side; keep the longest common."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)

    def is_subseq(sub, seq):
        it = iter(seq)
        return all(tok in it for tok in sub)

    best = 0
    for r in range(len(short), 0, -1):
        for combo in itertools.combinations(short, r):
            if is_subseq(combo, long_):
                return r
    return best


class TestTokenize:
    def test_lowercase_and_punctuation_boundaries(self):
        assert tokenize("The cat, sat!") == ["the", "cat", "sat"]
        assert tokenize("don't-stop") == ["don", "t", "stop"]

    def test_trailing_whitespace_invariance(self):
        assert tokenize("a b  ") == tokenize("a b")


class TestRougeN:
    def test_identical_sequences(self):
        score = rouge_n("the cat sat", "the cat sat", 1)
        assert score.precision == score.recall == score.f1 == 1.0

    def test_disjoint_vocabularies(self):
        score = rouge_n("aa bb", "cc dd", 1)
        assert score.f1 == 0.0

    def test_hand_counted_fixture(self):
        # cand {the, cat, sat} vs ref {the, cat, ran}: 2 of 3 unigrams match
        one = rouge_n("the cat sat", "the cat ran", 1)
        assert one.precision == pytest.approx(2 / 3)
        assert one.recall == pytest.approx(2 / 3)
        assert one.f1 == pytest.approx(2 / 3)
        # bigrams: {the cat} of {the cat, cat sat} -> 1/2
        two = rouge_n("the cat sat", "the cat ran", 2)
        assert two.precision == pytest.approx(1 / 2)
        assert two.recall == pytest.approx(1 / 2)
        assert two.f1 == pytest.approx(1 / 2)

    def test_clipping(self):
        # candidate repeats a token more often than the reference holds it
        score = rouge_n("a a a", "a b", 1)
        assert score.precision == pytest.approx(1 / 3)
        assert score.recall == pytest.approx(1 / 2)

    def test_empty_reference_warns_and_scores_zero(self):
        with pytest.warns(UserWarning):
            assert rouge_n("abc", "", 1).f1 == 0.0

    def test_case_invariance(self):
        assert rouge_n("The CAT", "the cat", 1).f1 == 1.0

    @given(st.lists(st.sampled_from("abc"), min_size=1, max_size=8))
    def test_self_similarity_is_one(self, tokens):
        assert rouge_n(tokens, tokens, 1).f1 == 1.0


class TestRougeL:
    def test_identical(self):
        assert rouge_l("x y z", "x y z").f1 == 1.0

    def test_crossed_order_fixture(self):
        # LCS("a b c d", "a c b d") = 3 ("a b d" or "a c d")
        score = rouge_l("a b c d", "a c b d")
        assert score.precision == pytest.approx(3 / 4)
        assert score.recall == pytest.approx(3 / 4)

    def test_empty_candidate(self):
        assert rouge_l("", "a b").f1 == 0.0

    def test_exhaustive_pairs_up_to_length_4(self):
        alphabet = "abc"
        seqs = [seq for r in range(5)
                for seq in itertools.product(alphabet, repeat=r)]
        for a in seqs:
            for b in seqs:
                assert lcs_length(a, b) == brute_force_lcs(a, b)

    @settings(max_examples=150)
    @given(st.lists(st.sampled_from("abc"), min_size=0, max_size=8),
           st.lists(st.sampled_from("abc"), min_size=0, max_size=8))
    def test_lcs_matches_brute_force(self, a, b):
        assert lcs_length(a, b) == brute_force_lcs(a, b)


class TestCorpus:
    def test_score_pair_keys(self):
        scores = score_pair("a b", "a c")
        assert set(scores) == {"rouge1", "rouge2", "rougeL"}

    def test_corpus_mean(self):
        means = score_corpus(["a b", "x"], ["a b", "x"])
        assert means["rouge1"] == 1.0 and means["rougeL"] == 1.0

    def test_token_id_sequences_supported(self):
        assert rouge_l([5, 6, 7], [5, 6, 7]).f1 == 1.0
        assert rouge_n([1, 2], [2, 1], 2).f1 == 0.0

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            score_corpus(["a"], ["a", "b"])
