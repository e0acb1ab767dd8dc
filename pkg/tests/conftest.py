"""Shared fixtures: a tiny copy-task model trained once per session."""

from dataclasses import dataclass

import numpy as np
import pytest

from crnmt.corpus import SentencePair, numericalize
from crnmt.decoding import DecodeConfig, Translator
from crnmt.model import TransformerConfig, TransformerParams
from crnmt.objective import LossWeights
from crnmt.subword import MergeTable, Vocab, apply_bpe, build_vocab, learn_bpe
from crnmt.trainer import TrainConfig, TrainData, train

COPY_WORDS = [f"w{i}" for i in range(10)]


def copy_sentence(rng) -> str:
    n = int(rng.integers(3, 7))
    return " ".join(rng.choice(COPY_WORDS, size=n))


@dataclass
class CopyModel:
    params: TransformerParams
    merge_table: MergeTable
    src_vocab: Vocab
    tgt_vocab: Vocab

    def translator(self, beam_size: int = 1) -> Translator:
        return Translator(self.params, self.merge_table, self.src_vocab,
                          self.tgt_vocab, DecodeConfig(beam_size=beam_size))


@pytest.fixture(scope="session")
def copy_model() -> CopyModel:
    """Model trained to copy its input (validation BLEU 100 on this recipe)."""
    rng = np.random.default_rng(0)
    pairs = [SentencePair(s, s, i)
             for i, s in enumerate(copy_sentence(rng) for _ in range(400))]
    valid = [SentencePair(s, s, i)
             for i, s in enumerate(copy_sentence(rng) for _ in range(30))]
    table = learn_bpe([p.src for p in pairs], 20)
    sv = build_vocab([apply_bpe(p.src, table) for p in pairs])
    tv = build_vocab([apply_bpe(p.tgt, table) for p in pairs])
    labeled = [numericalize(p, sv, tv, table) for p in pairs]
    data = TrainData(labeled=labeled, valid=valid, merge_table=table,
                     src_vocab=sv, tgt_vocab=tv)
    model_cfg = TransformerConfig(num_blocks=1, num_heads=4, d_model=48, d_ffn=128,
                                  dropout=0.0, max_positions=64)
    train_cfg = TrainConfig(epochs=60, max_tokens=300, avg_last_k=5, warmup_steps=60,
                            lr_peak=0.002, weights=LossWeights(1.0, 0.0), seed=7)
    result = train(model_cfg, train_cfg, data)
    return CopyModel(result.averaged, table, sv, tv)
