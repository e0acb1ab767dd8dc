"""Byte-pair encoding: learn merges, apply them, and build id vocabularies.

Merges are learned over the bare characters of whitespace words; the
end-of-word marker ``</w>`` is attached to a word's final token when merges
are applied, which keeps detokenization exact. Merge learning is greedy by
pair frequency with lexicographic tie-breaking, so two runs on the same
corpus produce identical tables.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EOW = "</w>"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

MERGE_FILE_VERSION = "#version 1"


@dataclass(frozen=True)
class MergeTable:
    """Ordered BPE merge rules; order is significant and stable."""

    merges: tuple[tuple[str, str], ...]

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    def save(self, path) -> None:
        lines = [MERGE_FILE_VERSION]
        lines += [f"{left} {right}" for left, right in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MergeTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != MERGE_FILE_VERSION:
            raise ValueError(f"bad merge table header in {path}")
        merges = []
        for line in lines[1:]:
            if not line:
                continue
            left, right = line.split(" ")
            merges.append((left, right))
        return cls(tuple(merges))


def learn_bpe(corpus: Iterable[str], num_merges: int) -> MergeTable:
    """Learn ``num_merges`` greedy pair merges from whitespace-tokenized sentences.

    Highest-frequency pair first; ties broken by lexicographic order of the
    (left, right) pair. Stops early when no pair occurs within any word.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freq: Counter[tuple[str, ...]] = Counter()
    for sentence in corpus:
        for word in sentence.split():
            word_freq[tuple(word)] += 1
    if not word_freq:
        raise ValueError("empty corpus")

    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_counts: Counter[tuple[str, str]] = Counter()
        for symbols, freq in word_freq.items():
            for i in range(len(symbols) - 1):
                pair_counts[(symbols[i], symbols[i + 1])] += freq
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merges.append(best)
        word_freq = Counter(
            {_merge_symbols(symbols, best): freq for symbols, freq in word_freq.items()})
    return MergeTable(tuple(merges))


def _merge_symbols(symbols: Sequence[str], pair: tuple[str, str]) -> tuple[str, ...]:
    left, right = pair
    out: list[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def apply_bpe(sentence: str, table: MergeTable) -> list[str]:
    """Split a sentence into subword tokens.

    Each word is split to characters, merges run in table order, then ``</w>``
    is attached to the word's final token. Unknown characters pass through as
    single-character tokens.
    """
    tokens: list[str] = []
    for word in sentence.split():
        symbols: Sequence[str] = tuple(word)
        for pair in table.merges:
            if len(symbols) == 1:
                break
            symbols = _merge_symbols(symbols, pair)
        tokens.extend(symbols[:-1])
        tokens.append(symbols[-1] + EOW)
    return tokens


def detokenize(subwords: Sequence[str]) -> str:
    """Invert apply_bpe: join subwords, ending a word at each ``</w>`` marker."""
    words: list[str] = []
    current: list[str] = []
    for token in subwords:
        if token.endswith(EOW):
            current.append(token[: -len(EOW)])
            words.append("".join(current))
            current = []
        else:
            current.append(token)
    if current:  # trailing fragment without a marker (e.g. truncated decode)
        words.append("".join(current))
    return " ".join(words)


@dataclass
class Vocab:
    """Token-to-id mapping with reserved pad/bos/eos/unk at ids 0-3."""

    token_to_id: dict[str, int]
    id_to_token: list[str] = field(init=False)

    def __post_init__(self):
        self.id_to_token = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.token_to_id)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def encode(self, subwords: Sequence[str]) -> list[int]:
        return [self.id(t) for t in subwords]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for tok, i in self.token_to_id.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        mapping: dict[str, int] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, idx = line.split("\t")
            mapping[tok] = int(idx)
        return cls(mapping)


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    """Build a Vocab from BPE-applied sentences.

    Reserved tokens come first; the rest are ordered by (frequency desc,
    token asc), with tokens below ``min_freq`` excluded.
    """
    freq: Counter[str] = Counter()
    for subwords in corpus:
        freq.update(subwords)
    mapping = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    kept = sorted((t for t, c in freq.items() if c >= min_freq and t not in mapping),
                  key=lambda t: (-freq[t], t))
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocab(mapping)
