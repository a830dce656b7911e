"""Reference ROUGE-1/2/L scorer.

Tokenization lowercases and splits on whitespace and punctuation
boundaries with no stemming, so scores are invariant to case and trailing
whitespace. The scorers also accept pre-tokenized sequences (any hashable
tokens), which is how decoded id sequences are scored.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, n_candidate: int, n_reference: int) -> "RougeScore":
        p = overlap / n_candidate if n_candidate else 0.0
        r = overlap / n_reference if n_reference else 0.0
        f1 = 2.0 * p * r / (p + r) if p + r > 0.0 else 0.0
        return cls(p, r, f1)


RougeScore.ZERO = RougeScore(0.0, 0.0, 0.0)


def _as_tokens(seq) -> list:
    if isinstance(seq, str):
        return tokenize(seq)
    return list(seq)


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _as_tokens(candidate)
    ref = _as_tokens(reference)
    if not ref:
        warnings.warn("empty reference in rouge_n; scoring 0", stacklevel=2)
        return RougeScore.ZERO
    cand_grams = _ngrams(cand, n)
    ref_grams = _ngrams(ref, n)
    overlap = sum(min(count, ref_grams[gram]) for gram, count in cand_grams.items())
    return RougeScore.from_counts(overlap, sum(cand_grams.values()),
                                  sum(ref_grams.values()))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Longest common subsequence length via dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> RougeScore:
    """Longest-common-subsequence precision/recall/F1."""
    cand = _as_tokens(candidate)
    ref = _as_tokens(reference)
    if not ref:
        warnings.warn("empty reference in rouge_l; scoring 0", stacklevel=2)
        return RougeScore.ZERO
    length = lcs_length(cand, ref)
    return RougeScore.from_counts(length, len(cand), len(ref))


def score_pair(candidate, reference) -> dict[str, RougeScore]:
    return {
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l(candidate, reference),
    }


def score_corpus(candidates, references) -> dict[str, float]:
    """Mean F1 per metric over aligned candidate/reference lists."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        raise ValueError("empty corpus")
    totals = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0}
    for cand, ref in zip(candidates, references):
        for name, item in score_pair(cand, ref).items():
            totals[name] += item.f1
    return {name: total / len(candidates) for name, total in totals.items()}
