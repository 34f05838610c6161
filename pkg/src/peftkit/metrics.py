"""Recall-oriented ROUGE variants and word error rate.

All metrics take token lists; plain strings are tokenized with
:func:`tokenize` (lowercase, whitespace split, surrounding punctuation
stripped).
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence, Union

import numpy as np

from . import kernels
from .errors import UndefinedMetricError

TokenSequence = Union[str, Sequence[str]]


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str, lowercase: bool = True, strip_punct: bool = True) -> list[str]:
    tokens = []
    for raw in text.split():
        tok = raw.lower() if lowercase else raw
        if strip_punct:
            start, end = 0, len(tok)
            while start < end and _is_punct(tok[start]):
                start += 1
            while end > start and _is_punct(tok[end - 1]):
                end -= 1
            tok = tok[start:end]
        if tok:
            tokens.append(tok)
    return tokens


def as_tokens(seq: TokenSequence) -> list[str]:
    if isinstance(seq, str):
        return tokenize(seq)
    return [t for t in seq if t]


def _ids(*seqs: list[str]) -> list[np.ndarray]:
    vocab: dict[str, int] = {}
    return [np.array([vocab.setdefault(t, len(vocab)) for t in s], dtype=np.int64) for s in seqs]


@dataclass(frozen=True)
class RougeScore:
    value: float
    variant: str  # "rouge-<n>", "rouge-l" or "rouge-s"

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.edits / self.reference_length


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _overlap_recall(cand: Counter, ref: Counter) -> float:
    matched = sum(min(count, cand[gram]) for gram, count in ref.items())
    return matched / sum(ref.values())


def rouge_n(candidate: TokenSequence, references: Sequence[TokenSequence], n: int) -> RougeScore:
    """Clipped n-gram recall, averaged over the references that have n-grams.

    ``references`` is a list; a bare string is treated as one reference.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if isinstance(references, str):
        references = [references]
    cand = ngram_counts(as_tokens(candidate), n)
    scores = []
    for ref in references:
        ref_counts = ngram_counts(as_tokens(ref), n)
        if ref_counts:
            scores.append(_overlap_recall(cand, ref_counts))
    if not scores:
        raise UndefinedMetricError(f"ROUGE-{n} undefined: no reference has {n} or more tokens")
    return RougeScore(sum(scores) / len(scores), f"rouge-{n}")


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    ia, ib = _ids(list(a), list(b))
    return int(kernels.lcs_length(ia, ib))


def rouge_l(candidate: TokenSequence, reference: TokenSequence) -> RougeScore:
    """LCS length over reference length."""
    ref = as_tokens(reference)
    if not ref:
        raise UndefinedMetricError("ROUGE-L undefined for an empty reference")
    return RougeScore(lcs_length(as_tokens(candidate), ref) / len(ref), "rouge-l")


def skip_bigrams(tokens: Sequence[str]) -> Counter:
    """All in-order token pairs, any gap, counted with multiplicity."""
    return Counter(combinations(tokens, 2))


def rouge_s(candidate: TokenSequence, reference: TokenSequence) -> RougeScore:
    ref = as_tokens(reference)
    if len(ref) < 2:
        raise UndefinedMetricError("ROUGE-S undefined for a reference shorter than 2 tokens")
    return RougeScore(_overlap_recall(skip_bigrams(as_tokens(candidate)), skip_bigrams(ref)), "rouge-s")


def wer(reference: TokenSequence, hypothesis: TokenSequence) -> WerBreakdown:
    """Minimum-edit alignment with unit costs and its edit breakdown.

    On ties the backtrace prefers match, then substitution, deletion,
    insertion, so breakdowns are reproducible.
    """
    ref = as_tokens(reference)
    hyp = as_tokens(hypothesis)
    if not ref:
        raise UndefinedMetricError("WER undefined for an empty reference")
    r_ids, h_ids = _ids(ref, hyp)
    d = kernels.edit_table(r_ids, h_ids)
    i, j = len(ref), len(hyp)
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and r_ids[i - 1] == h_ids[j - 1] and d[i, j] == d[i - 1, j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(subs, dels, ins, len(ref))
