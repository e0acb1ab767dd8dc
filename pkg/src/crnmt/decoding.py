"""Greedy and beam-search decoding with GNMT length penalty.

Decoding is read-only over parameters, so sentences may decode concurrently.
The beam engine is factored over a step-scores callback so tests can drive it
with hand-set tables and exhaustive oracles can share the exact semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .corpus import _pad_matrix
from .model import TransformerParams, decode_logits, encode
from .subword import BOS, EOS, PAD, MergeTable, Vocab, apply_bpe, detokenize


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    length_penalty: float = 0.6
    max_len_factor: float = 2.0  # cap = max_len_factor * src_len + 10

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be >= 0")

    def max_len(self, src_len: int) -> int:
        return int(self.max_len_factor * src_len) + 10


def length_penalty(n: int, alpha: float) -> float:
    """GNMT normalizer ((5+n)/6)^alpha; identity when alpha == 0."""
    return ((5.0 + n) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # generated ids, eos stripped
    log_prob: float
    hit_cap: bool = False
    score: float = field(default=0.0)


def greedy_decode(params: TransformerParams, src_ids: Sequence[int],
                  cfg: DecodeConfig = DecodeConfig()) -> Hypothesis:
    """Argmax token per step until eos or the length cap; ties pick the lowest id."""
    (hyp,) = greedy_decode_batch(
        params, np.asarray([list(src_ids)], dtype=np.int64),
        np.ones((1, len(src_ids)), bool), cfg)
    return hyp


def greedy_decode_batch(params: TransformerParams, src: np.ndarray,
                        src_mask: np.ndarray,
                        cfg: DecodeConfig = DecodeConfig()) -> list[Hypothesis]:
    """Vectorized greedy decode of a padded source batch (eval mode)."""
    B = src.shape[0]
    src_lens = src_mask.sum(axis=1).astype(int)
    caps = np.array([cfg.max_len(int(n)) for n in src_lens])
    with tc.no_grad():
        enc = encode(params, src, src_mask)
        tgt = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, bool)   # emitted eos
        lengths = np.zeros(B, dtype=int)  # generated tokens, filler excluded
        log_probs = np.zeros(B)
        for step in range(int(caps.max())):
            active = ~done & (lengths < caps)
            if not active.any():
                break
            logits = decode_logits(params, enc, src_mask, tgt).data[:, -1, :]
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            nxt = logp.argmax(axis=-1)
            nxt = np.where(active, nxt, PAD)  # filler for settled rows
            log_probs = np.where(active, log_probs + logp[np.arange(B), nxt], log_probs)
            lengths = np.where(active, lengths + 1, lengths)
            tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
            done |= active & (nxt == EOS)
    out = []
    for i in range(B):
        row = tgt[i, 1: 1 + lengths[i]].tolist()
        if done[i]:
            row = row[:-1]  # strip the terminal eos
        out.append(Hypothesis(tuple(row), float(log_probs[i]),
                              hit_cap=not done[i] and lengths[i] >= caps[i]))
    return out


StepScores = Callable[[list[tuple[int, ...]]], np.ndarray]
"""Maps a list of prefixes (generated ids so far, no bos) to [n, V] log-probs."""


def beam_search_engine(step_scores: StepScores, vocab_size: int, beam_size: int,
                       alpha: float, max_len: int, eos: int = EOS) -> Hypothesis:
    """Beam search over log-probabilities with length-penalized final scores.

    Finished hypotheses score logprob / lp(n) with n counting generated tokens
    including eos; live hypotheses at the cap are scored the same way and
    flagged. Ties break by higher score, then shorter length, then
    lexicographic ids.
    """
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    done: list[Hypothesis] = []
    for _ in range(max_len):
        scores = step_scores([p for p, _ in live])  # [n_live, V]
        cands: list[tuple[tuple[int, ...], float]] = []
        for (prefix, lp), row in zip(live, scores):
            for v in range(vocab_size):
                cands.append((prefix + (v,), lp + float(row[v])))
        cands.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for seq, lp in cands[: beam_size]:
            if seq[-1] == eos:
                n = len(seq)
                done.append(Hypothesis(seq[:-1], lp, hit_cap=False,
                                       score=lp / length_penalty(n, alpha)))
            else:
                live.append((seq, lp))
        if not live:
            break
    for seq, lp in live:  # cap reached without eos
        done.append(Hypothesis(seq, lp, hit_cap=True,
                               score=lp / length_penalty(len(seq), alpha)))
    best = min(done, key=lambda h: (-h.score, len(h.tokens), h.tokens))
    return best


def beam_search(params: TransformerParams, src_ids: Sequence[int],
                cfg: DecodeConfig = DecodeConfig()) -> Hypothesis:
    """Beam decode of one sentence; beam_size 1 reduces to greedy_decode."""
    src = np.asarray([list(src_ids)], dtype=np.int64)
    src_mask = np.ones((1, len(src_ids)), bool)
    with tc.no_grad():
        enc = encode(params, src, src_mask)
        vocab = params.tgt_vocab_size

        def step_scores(prefixes: list[tuple[int, ...]]) -> np.ndarray:
            rows = [[BOS] + list(p) for p in prefixes]
            tgt_in = _pad_matrix(rows)
            n = len(rows)
            enc_rep = tc.Tensor(np.repeat(enc.data, n, axis=0))
            mask_rep = np.repeat(src_mask, n, axis=0)
            logits = decode_logits(params, enc_rep, mask_rep, tgt_in).data
            lengths = [len(r) for r in rows]
            last = logits[np.arange(n), np.array(lengths) - 1, :]
            shifted = last - last.max(axis=-1, keepdims=True)
            return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

        return beam_search_engine(step_scores, vocab, cfg.beam_size,
                                  cfg.length_penalty, cfg.max_len(len(src_ids)))


@dataclass
class Translator:
    """Bundle of everything needed to translate word sentences."""

    params: TransformerParams
    merge_table: MergeTable
    src_vocab: Vocab
    tgt_vocab: Vocab
    decode_cfg: DecodeConfig = DecodeConfig()

    def encode_source(self, sentence: str) -> list[int]:
        return self.src_vocab.encode(apply_bpe(sentence, self.merge_table)) + [EOS]

    def translate(self, sentence: str) -> str:
        if not sentence.strip():
            return ""
        ids = self.encode_source(sentence)
        if self.decode_cfg.beam_size == 1:
            hyp = greedy_decode(self.params, ids, self.decode_cfg)
        else:
            hyp = beam_search(self.params, ids, self.decode_cfg)
        return detokenize(self.tgt_vocab.decode(hyp.tokens))

    def translate_batch(self, sentences: Sequence[str]) -> list[str]:
        """Greedy-decode many sentences at once (used for validation BLEU)."""
        nonempty = [i for i, s in enumerate(sentences) if s.strip()]
        out = [""] * len(sentences)
        if not nonempty:
            return out
        rows = [self.encode_source(sentences[i]) for i in nonempty]
        src = _pad_matrix(rows)
        src_mask = src != PAD
        hyps = greedy_decode_batch(self.params, src, src_mask, self.decode_cfg)
        for i, hyp in zip(nonempty, hyps):
            out[i] = detokenize(self.tgt_vocab.decode(hyp.tokens))
        return out
