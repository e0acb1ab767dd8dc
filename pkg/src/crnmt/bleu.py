"""Corpus-level BLEU-4 with brevity penalty.

Scoring convention: whitespace tokens of detokenized text, case preserved.
Clipped n-gram counts are aggregated over the whole corpus, one reference per
hypothesis. Optional smoothing adds 1 to numerator and denominator of the
n >= 2 precisions (useful for tiny validation sets where 4-gram matches are
rare). Pure function, safe for concurrent use.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

Tokens = Sequence[str]


@dataclass(frozen=True)
class BleuBreakdown:
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    score: float
    smoothed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4,
                smoothing: bool = False) -> BleuBreakdown:
    """Corpus BLEU over token sequences; raises if the counts differ."""
    if len(hyps) != len(refs):
        raise ValueError(f"hypothesis/reference count mismatch {len(hyps)} vs {len(refs)}")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    precisions = []
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if smoothing and n >= 2:
            m, t = m + 1, t + 1
        precisions.append(m / t if t > 0 else 0.0)

    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))

    if any(p == 0.0 for p in precisions) or hyp_len == 0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n) * 100.0
    return BleuBreakdown(
        precisions=tuple(precisions),
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
        score=score,
        smoothed=smoothing,
    )


def bleu_lines(hyp_lines: Sequence[str], ref_lines: Sequence[str],
               smoothing: bool = False) -> BleuBreakdown:
    """Convenience wrapper: whitespace-split each line, then score."""
    return corpus_bleu([h.split() for h in hyp_lines],
                       [r.split() for r in ref_lines], smoothing=smoothing)
