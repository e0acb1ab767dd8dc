"""Synthetic noisy copy-translation benchmark.

Sources are random sentences over a small word inventory; the target is the
word-for-word translation through a fixed bijection (s07 -> t07). Clean
training data, with robustness probed on word-dropout-corrupted test inputs:
the benchmark for whether consistency training buys anything that plain
supervised training does not.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import word_dropout
from .corpus import SentencePair
from .filtering import EmbeddingProvider

VOCAB_SIZE = 20
MIN_LEN = 4
MAX_LEN = 9


def source_word(i: int) -> str:
    return f"s{i:02d}"


def target_word(i: int) -> str:
    return f"t{i:02d}"


def make_pairs(n: int, seed: int, vocab_size: int = VOCAB_SIZE) -> list[SentencePair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        length = int(rng.integers(MIN_LEN, MAX_LEN + 1))
        idx = rng.integers(0, vocab_size, size=length)
        src = " ".join(source_word(j) for j in idx)
        tgt = " ".join(target_word(j) for j in idx)
        pairs.append(SentencePair(src=src, tgt=tgt, id=i))
    return pairs


def corrupt_sources(pairs: list[SentencePair], drop_p: float,
                    seed: int) -> list[SentencePair]:
    """Word-dropout each source (targets untouched); the robustness probe."""
    out = []
    for i, p in enumerate(pairs):
        rng = np.random.default_rng([seed, i])
        out.append(SentencePair(src=" ".join(word_dropout(p.src.split(), drop_p, rng)),
                                tgt=p.tgt, id=p.id))
    return out


def toy_embedding_provider(vocab_size: int = VOCAB_SIZE, dim: int = 8,
                           seed: int = 11) -> EmbeddingProvider:
    """Random unit vectors per source word; enough for the cosine filter."""
    rng = np.random.default_rng(seed)
    vectors = {}
    for i in range(vocab_size):
        v = rng.standard_normal(dim)
        vectors[source_word(i)] = v / np.linalg.norm(v)
    return EmbeddingProvider(vectors, dim)


def write_vector_file(provider: EmbeddingProvider, path) -> None:
    lines = [f"d {provider.dim}"]
    for word, vec in provider.vectors.items():
        lines.append(word + " " + " ".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ToyDataset:
    train: list[SentencePair]
    valid: list[SentencePair]
    test: list[SentencePair]
    test_corrupted: list[SentencePair]
    provider: EmbeddingProvider


def build_dataset(n_train: int = 2000, n_valid: int = 200, n_test: int = 200,
                  seed: int = 0, corrupt_p: float = 0.2) -> ToyDataset:
    return ToyDataset(
        train=make_pairs(n_train, seed),
        valid=make_pairs(n_valid, seed + 1),
        test=make_pairs(n_test, seed + 2),
        test_corrupted=corrupt_sources(make_pairs(n_test, seed + 2), corrupt_p,
                                       seed + 3),
        provider=toy_embedding_provider(),
    )


def write_bitext(pairs: list[SentencePair], src_path, tgt_path) -> None:
    Path(src_path).write_text("\n".join(p.src for p in pairs) + "\n", encoding="utf-8")
    Path(tgt_path).write_text("\n".join(p.tgt for p in pairs) + "\n", encoding="utf-8")


def write_dataset(dataset: ToyDataset, root) -> dict[str, str]:
    """Materialize all splits plus the vector file; returns the path map."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, pairs in (("train", dataset.train), ("valid", dataset.valid),
                        ("test", dataset.test),
                        ("test_corrupted", dataset.test_corrupted)):
        src, tgt = root / f"{name}.src", root / f"{name}.tgt"
        write_bitext(pairs, src, tgt)
        paths[f"{name}_src"] = str(src)
        paths[f"{name}_tgt"] = str(tgt)
    vec = root / "vectors.txt"
    write_vector_file(dataset.provider, vec)
    paths["vectors"] = str(vec)
    return paths
