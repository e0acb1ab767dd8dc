"""Source-side augmentation strategies.

All four strategies operate on whitespace words (before subword splitting)
and are deterministic given (input, config, seed). Strategies are pure given
an explicit RNG; callers parallelizing across sentences should derive one
seeded RNG per sentence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

STRATEGIES = ("round_trip", "word_dropout", "synonym", "word_order")


@dataclass(frozen=True)
class AugmentConfig:
    strategy: str = "word_dropout"
    drop_p: float = 0.2
    sub_p: float = 0.2
    lexicon_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.drop_p < 1.0:
            raise ValueError(f"drop_p must be in [0, 1), got {self.drop_p}")
        if self.strategy == "synonym" and not self.lexicon_path:
            raise ValueError("synonym strategy requires a lexicon file")


def word_dropout(words: Sequence[str], drop_p: float, rng: np.random.Generator) -> list[str]:
    """Drop each token independently with probability drop_p.

    If every token would drop, one uniformly chosen token is retained, so the
    output never goes empty.
    """
    if not words:
        raise ValueError("word_dropout needs a non-empty sentence")
    if drop_p == 0.0:
        return list(words)
    keep = rng.random(len(words)) >= drop_p
    if not keep.any():
        keep[rng.integers(len(words))] = True
    return [w for w, k in zip(words, keep) if k]


def word_order_swap(words: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Swap one uniformly chosen adjacent pair; length < 2 is returned unchanged."""
    out = list(words)
    if len(out) < 2:
        return out
    i = int(rng.integers(len(out) - 1))
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def load_lexicon(path) -> dict[str, list[str]]:
    """Parse a synonym lexicon: one "word<TAB>syn1,syn2,..." entry per line."""
    lexicon: dict[str, list[str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        word, syns = line.split("\t")
        lexicon[word] = [s for s in syns.split(",") if s]
    return lexicon


def synonym_substitute(words: Sequence[str], lexicon: dict[str, list[str]],
                       sub_p: float, rng: np.random.Generator) -> list[str]:
    """Replace lexicon words, each with probability sub_p, by a uniform synonym.

    Words without an entry pass through untouched and consume no randomness.
    Output length always equals input length.
    """
    out = []
    for w in words:
        syns = lexicon.get(w)
        if syns and rng.random() < sub_p:
            out.append(syns[int(rng.integers(len(syns)))])
        else:
            out.append(w)
    return out


def round_trip(words: Sequence[str], fwd, rev, decode_cfg=None) -> list[str]:
    """Translate source -> target -> source to obtain a paraphrase.

    ``fwd`` and ``rev`` are Translator-like objects with compatible vocabs.
    Greedy decoding by default (beam configurable through the translators).
    """
    sentence = " ".join(words)
    pivot = fwd.translate(sentence)
    back = rev.translate(pivot)
    return back.split()


def augment_sentence(words: Sequence[str], cfg: AugmentConfig,
                     rng: np.random.Generator, lexicon=None,
                     fwd=None, rev=None) -> list[str]:
    """Dispatch one sentence through the configured strategy."""
    if cfg.strategy == "word_dropout":
        return word_dropout(words, cfg.drop_p, rng)
    if cfg.strategy == "word_order":
        return word_order_swap(words, rng)
    if cfg.strategy == "synonym":
        if lexicon is None:
            lexicon = load_lexicon(cfg.lexicon_path)
        return synonym_substitute(words, lexicon, cfg.sub_p, rng)
    if fwd is None or rev is None:
        raise ValueError("round_trip strategy requires fwd and rev translators")
    return round_trip(words, fwd, rev)


def sentence_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sentence stream so augmentation parallelizes deterministically."""
    return np.random.default_rng([seed, index])
