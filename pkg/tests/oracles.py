"""Slow, obviously-correct reference implementations used by the tests."""

from functools import lru_cache


def rouge_n_bruteforce(candidate, reference, n):
    ref = [tuple(reference[i:i + n]) for i in range(len(reference) - n + 1)]
    cand = [tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
    matched = 0
    pool = list(cand)
    for gram in ref:
        if gram in pool:
            pool.remove(gram)
            matched += 1
    return matched / len(ref)


def levenshtein(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def f(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + f(i + 1, j + 1)
        return max(f(i + 1, j), f(i, j + 1))

    return f(0, 0)


def skip_bigram_recall(candidate, reference):
    ref = [(reference[i], reference[j]) for i in range(len(reference)) for j in range(i + 1, len(reference))]
    pool = [(candidate[i], candidate[j]) for i in range(len(candidate)) for j in range(i + 1, len(candidate))]
    matched = 0
    for pair in ref:
        if pair in pool:
            pool.remove(pair)
            matched += 1
    return matched / len(ref)
