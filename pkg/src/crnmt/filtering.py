"""Quality filtering for augmented pairs: dedup, length-ratio window, and
semantic-similarity threshold, in that order.

Each rejection is attributed to exactly one stage, and the report counts
satisfy inputs == kept + sum(rejections). Stage functions are pure; the
pipeline preserves input order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, augment_sentence, sentence_rng
from .corpus import SentencePair


@dataclass(frozen=True)
class FilterConfig:
    alpha1: float = 0.7
    alpha2: float = 1.4
    sim_threshold: float = 0.5
    mu: float = 1.0  # augmented-to-labeled mixing ratio, consumed by the trainer

    def __post_init__(self):
        if not 0 < self.alpha1 <= self.alpha2:
            raise ValueError(f"need 0 < alpha1 <= alpha2, got {self.alpha1}, {self.alpha2}")
        if not -1.0 <= self.sim_threshold <= 1.0:
            raise ValueError(f"sim_threshold must be in [-1, 1], got {self.sim_threshold}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


@dataclass(frozen=True)
class AugmentedExample:
    """Clean source x, augmented source u, shared target y; word-count ratio
    and cosine similarity filled in by the pipeline stages."""

    x: str
    u: str
    y: str
    id: int
    ratio: float = 0.0
    sim: float = 0.0


class EmbeddingProvider:
    """Mean-of-word-vectors sentence embedder with zero-vector OOV fallback.

    Word-vector file format: first line "d <dim>", then "word v1 ... vd".
    Pluggable: anything with ``embed(sentence) -> 1-D array`` works in its
    place.
    """

    def __init__(self, vectors: dict[str, np.ndarray], dim: int):
        self.dim = dim
        self.vectors = vectors
        for w, v in vectors.items():
            if v.shape != (dim,):
                raise ValueError(f"vector for {w!r} has dimension {v.shape}, expected ({dim},)")
        self._zero = np.zeros(dim)

    @classmethod
    def load(cls, path) -> "EmbeddingProvider":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("d "):
            raise ValueError(f"word-vector file {path} must start with 'd <dim>'")
        dim = int(lines[0].split()[1])
        vectors = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            parts = line.split()
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        return cls(vectors, dim)

    def embed(self, sentence: str) -> np.ndarray:
        words = sentence.split()
        if not words:
            return self._zero
        acc = np.zeros(self.dim)
        for w in words:
            acc += self.vectors.get(w, self._zero)
        return acc / len(words)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a||b|), defined as 0 when either norm is 0.

    The denominator is computed as sqrt(|a|^2 * |b|^2) in one square root.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"cosine: dimension mismatch {a.shape} vs {b.shape}")
    nn = float(a @ a) * float(b @ b)
    if nn == 0.0:
        return 0.0
    return float(a @ b) / float(np.sqrt(nn))


def length_ratio_keep(x: str, u: str, cfg: FilterConfig) -> bool:
    """True iff alpha1 <= len(x)/len(u) <= alpha2, lengths in words, bounds inclusive.

    An empty augmented side is a rejection (ratio undefined).
    """
    nx, nu = len(x.split()), len(u.split())
    if nu == 0:
        return False
    ratio = nx / nu
    return cfg.alpha1 <= ratio <= cfg.alpha2


def semantic_keep(x: str, u: str, provider: EmbeddingProvider, cfg: FilterConfig) -> bool:
    """True iff cosine of the sentence embeddings clears the threshold (inclusive)."""
    return cosine(provider.embed(x), provider.embed(u)) >= cfg.sim_threshold


def dedup(examples: Sequence[AugmentedExample],
          original_sources: Sequence[str]) -> list[AugmentedExample]:
    """Keep the first occurrence of each (x, u) pair; drop any example whose u
    duplicates a clean source from the original corpus."""
    originals = set(original_sources)
    seen: set[tuple[str, str]] = set()
    kept = []
    for ex in examples:
        key = (ex.x, ex.u)
        if key in seen or ex.u in originals:
            seen.add(key)
            continue
        seen.add(key)
        kept.append(ex)
    return kept


@dataclass
class FilterReport:
    """Per-stage kept/rejected counts, emitted as JSON lines."""

    stages: list[dict] = field(default_factory=list)

    def add(self, stage: str, kept: int, rejected: int) -> None:
        self.stages.append({"stage": stage, "kept": kept, "rejected": rejected})

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(s) for s in self.stages) + "\n"

    @property
    def inputs(self) -> int:
        return self.stages[0]["kept"] + self.stages[0]["rejected"] if self.stages else 0

    @property
    def kept(self) -> int:
        return self.stages[-1]["kept"] if self.stages else 0

    @property
    def total_rejected(self) -> int:
        return sum(s["rejected"] for s in self.stages)


def filter_examples(examples: Sequence[AugmentedExample],
                    filter_cfg: FilterConfig,
                    provider: EmbeddingProvider,
                    original_sources: Sequence[str]) -> tuple[list[AugmentedExample], FilterReport]:
    """dedup -> length ratio -> semantic similarity, attributing each rejection."""
    report = FilterReport()
    report.add("augment", len(examples), 0)

    after_dedup = dedup(examples, original_sources)
    report.add("dedup", len(after_dedup), len(examples) - len(after_dedup))

    after_ratio = []
    for ex in after_dedup:
        if length_ratio_keep(ex.x, ex.u, filter_cfg):
            ratio = len(ex.x.split()) / len(ex.u.split())
            after_ratio.append(AugmentedExample(ex.x, ex.u, ex.y, ex.id,
                                                ratio=ratio, sim=ex.sim))
    report.add("length_ratio", len(after_ratio), len(after_dedup) - len(after_ratio))

    kept = []
    for ex in after_ratio:
        sim = cosine(provider.embed(ex.x), provider.embed(ex.u))
        if sim >= filter_cfg.sim_threshold:
            kept.append(AugmentedExample(ex.x, ex.u, ex.y, ex.id, ratio=ex.ratio, sim=sim))
    report.add("semantic", len(kept), len(after_ratio) - len(kept))
    return kept, report


def run_pipeline(pairs: Sequence[SentencePair], augment_cfg: AugmentConfig,
                 filter_cfg: FilterConfig, provider: EmbeddingProvider,
                 lexicon=None, fwd=None, rev=None
                 ) -> tuple[list[AugmentedExample], FilterReport]:
    """Augment each clean source, then run the three filter stages.

    Deterministic: sentence i draws from a stream keyed (seed, i). Output
    order follows input order.
    """
    examples = []
    for i, pair in enumerate(pairs):
        u_words = augment_sentence(pair.src.split(), augment_cfg,
                                   sentence_rng(augment_cfg.seed, i),
                                   lexicon=lexicon, fwd=fwd, rev=rev)
        examples.append(AugmentedExample(x=pair.src, u=" ".join(u_words),
                                         y=pair.tgt, id=pair.id))
    return filter_examples(examples, filter_cfg, provider,
                           [p.src for p in pairs])


def save_examples(examples: Sequence[AugmentedExample], path) -> None:
    """Write kept examples as "x<TAB>u<TAB>y" lines."""
    lines = [f"{ex.x}\t{ex.u}\t{ex.y}" for ex in examples]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_examples(path) -> list[AugmentedExample]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        x, u, y = line.split("\t")
        out.append(AugmentedExample(x=x, u=u, y=y, id=i))
    return out
