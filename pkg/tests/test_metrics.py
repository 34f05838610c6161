import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lcs, levenshtein, rouge_n_bruteforce, skip_bigram_recall
from peftkit import metrics
from peftkit.errors import UndefinedMetricError

WORDS = st.lists(st.sampled_from("abcde"), max_size=12)


class TestTokenize:
    def test_basic(self):
        assert metrics.tokenize("The cat, sat.") == ["the", "cat", "sat"]

    def test_inner_punctuation_kept(self):
        assert metrics.tokenize("l'arbre «vert» don't") == ["l'arbre", "vert", "don't"]

    def test_punctuation_only_tokens_dropped(self):
        assert metrics.tokenize("a -- b ...") == ["a", "b"]

    def test_unicode_whitespace(self):
        assert metrics.tokenize("a b\tc\nd") == ["a", "b", "c", "d"]

    def test_options(self):
        assert metrics.tokenize("A, b", lowercase=False, strip_punct=False) == ["A,", "b"]


class TestRougeN:
    def test_identity(self):
        for n in (1, 2, 3):
            assert metrics.rouge_n("x y z", ["x y z"], n).value == 1.0

    def test_example(self):
        assert metrics.rouge_n("the cat sat", ["the cat ran"], 1).value == pytest.approx(2 / 3)

    def test_clipping(self):
        assert metrics.rouge_n("a a", ["a a a"], 1).value == pytest.approx(2 / 3)

    def test_bare_string_reference(self):
        assert metrics.rouge_n("a b", "a b", 2).value == 1.0

    def test_undefined(self):
        with pytest.raises(UndefinedMetricError):
            metrics.rouge_n("a b c", ["a"], 2)

    def test_short_references_skipped(self):
        assert metrics.rouge_n("a b", ["a", "a b"], 2).value == 1.0

    def test_bad_n(self):
        with pytest.raises(ValueError):
            metrics.rouge_n("a", ["a"], 0)

    @settings(max_examples=300, deadline=None)
    @given(WORDS, WORDS.filter(lambda r: len(r) >= 1), st.integers(1, 3))
    def test_matches_bruteforce(self, cand, ref, n):
        if len(ref) < n:
            with pytest.raises(UndefinedMetricError):
                metrics.rouge_n(cand, [ref], n)
            return
        score = metrics.rouge_n(cand, [ref], n).value
        assert score == rouge_n_bruteforce(cand, ref, n)
        assert 0.0 <= score <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(WORDS, st.lists(WORDS.filter(lambda r: len(r) >= 2), min_size=1, max_size=4))
    def test_multi_reference_mean(self, cand, refs):
        singles = [metrics.rouge_n(cand, [r], 2).value for r in refs]
        assert metrics.rouge_n(cand, refs, 2).value == pytest.approx(sum(singles) / len(singles))


class TestRougeL:
    def test_identity(self):
        assert metrics.rouge_l("a b c", "a b c").value == 1.0

    def test_example(self):
        assert metrics.rouge_l("a c b", "a b c").value == pytest.approx(2 / 3)

    def test_disjoint(self):
        assert metrics.rouge_l("x y", "a b c").value == 0.0

    def test_empty_reference(self):
        with pytest.raises(UndefinedMetricError):
            metrics.rouge_l("a", "")

    @settings(max_examples=200, deadline=None)
    @given(WORDS, WORDS)
    def test_lcs_matches_recursion(self, a, b):
        assert metrics.lcs_length(a, b) == lcs(a, b)

    @settings(max_examples=100, deadline=None)
    @given(WORDS, WORDS.filter(bool), st.lists(st.sampled_from(["x", "y"]), max_size=4), st.data())
    def test_foreign_insertions_do_not_matter(self, cand, ref, extra, data):
        longer = list(cand)
        for tok in extra:
            longer.insert(data.draw(st.integers(0, len(longer))), tok)
        assert metrics.rouge_l(longer, ref).value == metrics.rouge_l(cand, ref).value


class TestRougeS:
    def test_identity(self):
        assert metrics.rouge_s("a b c d", "a b c d").value == 1.0

    def test_example(self):
        assert metrics.rouge_s("a c", "a b c").value == pytest.approx(1 / 3)

    def test_order_matters(self):
        assert metrics.rouge_s("b a", "a b").value == 0.0

    def test_short_reference(self):
        with pytest.raises(UndefinedMetricError):
            metrics.rouge_s("a b", "a")

    def test_skip_bigram_count(self):
        assert sum(metrics.skip_bigrams(list("abcde")).values()) == 10

    @settings(max_examples=200, deadline=None)
    @given(WORDS, WORDS.filter(lambda r: len(r) >= 2))
    def test_matches_bruteforce(self, cand, ref):
        assert metrics.rouge_s(cand, ref).value == pytest.approx(skip_bigram_recall(cand, ref), abs=1e-15)


class TestWer:
    def test_identity(self):
        b = metrics.wer("a b c", "a b c")
        assert (b.substitutions, b.deletions, b.insertions, b.wer) == (0, 0, 0, 0.0)

    def test_substitution(self):
        b = metrics.wer("a b c", "a x c")
        assert (b.substitutions, b.deletions, b.insertions) == (1, 0, 0)
        assert b.wer == pytest.approx(1 / 3)

    def test_insertions_exceed_one(self):
        b = metrics.wer("a", "a b c")
        assert (b.insertions, b.wer) == (2, 2.0)

    def test_deletions(self):
        b = metrics.wer("a b c d", "a d")
        assert (b.substitutions, b.deletions, b.insertions) == (0, 2, 0)

    def test_empty_hypothesis(self):
        assert metrics.wer("a b", "").deletions == 2

    def test_empty_reference(self):
        with pytest.raises(UndefinedMetricError):
            metrics.wer("", "a")

    def test_tie_prefers_substitution(self):
        # "a b" -> "b c": two substitutions or one deletion + one insertion, both cost 2
        b = metrics.wer("a b", "b c")
        assert b.edits == 2 and b.substitutions == 2

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.sampled_from("abc"), min_size=1, max_size=8), st.lists(st.sampled_from("abc"), max_size=8))
    def test_matches_recursive_levenshtein(self, ref, hyp):
        b = metrics.wer(ref, hyp)
        assert b.edits == levenshtein(ref, hyp)
        # the breakdown is a consistent alignment: lengths add up
        assert len(ref) - b.deletions + b.insertions == len(hyp)
        assert b.substitutions + b.deletions <= len(ref)


def test_scores_are_floats():
    assert isinstance(float(metrics.rouge_l("a", "a")), float)
    assert np.isfinite(metrics.wer("a b", "c").wer)
