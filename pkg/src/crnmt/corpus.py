"""Parallel-text ingestion, numericalization, and token-budget batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .subword import BOS, EOS, PAD, MergeTable, Vocab, apply_bpe

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SentencePair:
    """One bitext line pair; both sides are non-empty after ingestion."""

    src: str
    tgt: str
    id: int


@dataclass(frozen=True)
class EncodedPair:
    """Numericalized pair: src ends with eos; target framed for teacher forcing."""

    id: int
    src: tuple[int, ...]
    tgt_in: tuple[int, ...]   # [bos, y1..yn]
    tgt_out: tuple[int, ...]  # [y1..yn, eos]


@dataclass(frozen=True)
class Batch:
    """Padded id matrices plus pad masks; token_count sums non-pad target tokens."""

    src: np.ndarray        # [B, S] int64
    src_mask: np.ndarray   # [B, S] bool, True at real tokens
    tgt_in: np.ndarray     # [B, T]
    tgt_out: np.ndarray    # [B, T]
    tgt_mask: np.ndarray   # [B, T] bool over tgt_out
    token_count: int
    pair_ids: tuple[int, ...]


@dataclass(frozen=True)
class EncodedAugExample:
    """Numericalized consistency example: clean source, augmented source, shared target."""

    id: int
    x_src: tuple[int, ...]
    u_src: tuple[int, ...]
    tgt_in: tuple[int, ...]
    tgt_out: tuple[int, ...]


@dataclass(frozen=True)
class AugBatch:
    """A padded batch of consistency examples."""

    x_src: np.ndarray
    x_mask: np.ndarray
    u_src: np.ndarray
    u_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    token_count: int
    pair_ids: tuple[int, ...]


def load_parallel(src_path, tgt_path) -> list[SentencePair]:
    """Pair up two one-sentence-per-line UTF-8 files.

    Lines empty on either side are dropped (count logged). A line-count
    mismatch raises with both counts named.
    """
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"line count mismatch {len(src_lines)} vs {len(tgt_lines)}")
    pairs = []
    dropped = 0
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        if not s.strip() or not t.strip():
            dropped += 1
            continue
        pairs.append(SentencePair(src=s.strip(), tgt=t.strip(), id=i))
    if dropped:
        log.info("dropped %d empty-sided line pairs from %s / %s", dropped, src_path, tgt_path)
    return pairs


def numericalize(pair: SentencePair, src_vocab: Vocab, tgt_vocab: Vocab,
                 table: MergeTable) -> EncodedPair:
    """BPE + id-encode one pair. OOV subwords map to unk."""
    src_ids = src_vocab.encode(apply_bpe(pair.src, table)) + [EOS]
    tgt_ids = tgt_vocab.encode(apply_bpe(pair.tgt, table))
    return EncodedPair(
        id=pair.id,
        src=tuple(src_ids),
        tgt_in=tuple([BOS] + tgt_ids),
        tgt_out=tuple(tgt_ids + [EOS]),
    )


def _pad_matrix(rows: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def pack_by_length(lengths: Sequence[int], max_tokens: int) -> list[list[int]]:
    """Greedy length-sorted packing of example indices under a token budget.

    An example longer than the budget gets its own batch. Deterministic:
    Python's sort is stable, so equal lengths keep input order.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    order = sorted(range(len(lengths)), key=lambda i: lengths[i])
    groups: list[list[int]] = []
    current: list[int] = []
    current_tokens = 0
    for i in order:
        if current and current_tokens + lengths[i] > max_tokens:
            groups.append(current)
            current, current_tokens = [], 0
        current.append(i)
        current_tokens += lengths[i]
    if current:
        groups.append(current)
    return groups


def numericalize_augmented(x: str, u: str, y: str, ex_id: int, src_vocab: Vocab,
                           tgt_vocab: Vocab, table: MergeTable) -> EncodedAugExample:
    """BPE + id-encode one (clean, augmented, target) triple."""
    x_ids = src_vocab.encode(apply_bpe(x, table)) + [EOS]
    u_ids = src_vocab.encode(apply_bpe(u, table)) + [EOS]
    tgt_ids = tgt_vocab.encode(apply_bpe(y, table))
    return EncodedAugExample(
        id=ex_id,
        x_src=tuple(x_ids),
        u_src=tuple(u_ids),
        tgt_in=tuple([BOS] + tgt_ids),
        tgt_out=tuple(tgt_ids + [EOS]),
    )


def make_batches(pairs: Sequence[EncodedPair], max_tokens: int,
                 seed: int) -> list[Batch]:
    """Token-budget batches: sort by target length, pack greedily, shuffle order.

    The budget counts non-pad target-side tokens. Batch contents depend only
    on the corpus and budget; the seed permutes batch order.
    """
    if not pairs:
        return []
    groups = pack_by_length([len(p.tgt_out) for p in pairs], max_tokens)
    rng = np.random.default_rng(seed)
    batches = []
    for gi in rng.permutation(len(groups)):
        members = [pairs[i] for i in groups[gi]]
        src = _pad_matrix([p.src for p in members])
        tgt_in = _pad_matrix([p.tgt_in for p in members])
        tgt_out = _pad_matrix([p.tgt_out for p in members])
        batches.append(Batch(
            src=src,
            src_mask=src != PAD,
            tgt_in=tgt_in,
            tgt_out=tgt_out,
            tgt_mask=tgt_out != PAD,
            token_count=int((tgt_out != PAD).sum()),
            pair_ids=tuple(p.id for p in members),
        ))
    return batches


def make_aug_batches(examples: Sequence[EncodedAugExample], max_tokens: int,
                     seed: int) -> list[AugBatch]:
    """Same pack-then-shuffle scheme as make_batches, for consistency examples."""
    if not examples:
        return []
    groups = pack_by_length([len(e.tgt_out) for e in examples], max_tokens)
    rng = np.random.default_rng(seed)
    batches = []
    for gi in rng.permutation(len(groups)):
        members = [examples[i] for i in groups[gi]]
        x_src = _pad_matrix([e.x_src for e in members])
        u_src = _pad_matrix([e.u_src for e in members])
        tgt_in = _pad_matrix([e.tgt_in for e in members])
        tgt_out = _pad_matrix([e.tgt_out for e in members])
        batches.append(AugBatch(
            x_src=x_src, x_mask=x_src != PAD,
            u_src=u_src, u_mask=u_src != PAD,
            tgt_in=tgt_in, tgt_out=tgt_out, tgt_mask=tgt_out != PAD,
            token_count=int((tgt_out != PAD).sum()),
            pair_ids=tuple(e.id for e in members),
        ))
    return batches
