"""Training loop: Adam with decoupled weight decay, inverse-sqrt schedule with
linear warmup, labeled/augmented batch mixing at ratio mu, per-epoch
validation BLEU, checkpointing, and last-k checkpoint averaging.

All randomness fans out from one seed through fixed streams, so a run is
fully determined by (seed, configs, corpora): batch shuffles, supervised
dropout, and student-branch dropout each draw from their own stream. That
also makes the lambda2=0 run bit-identical to the CE-only baseline (the
consistency branch consumes no randomness when disabled).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .bleu import bleu_lines
from .corpus import (
    AugBatch, Batch, EncodedAugExample, EncodedPair, SentencePair,
    make_aug_batches, make_batches,
)
from .decoding import DecodeConfig, Translator
from .model import (
    TransformerConfig, TransformerParams, forward_teacher_forced, init_params,
    save_checkpoint,
)
from .objective import (
    ConsistencyConfig, LossWeights, consistency_kl_loss, consistency_pass,
    label_smoothed_ce,
)
from .subword import MergeTable, Vocab

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,step,lr,ce,kl,total,valid_bleu"

# rng stream tags (first element after the seed)
_STREAM_BATCH = 0
_STREAM_AUG_BATCH = 1
_STREAM_SUP_DROPOUT = 2
_STREAM_AUG_DROPOUT = 3


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 0.0005
    lr_init: float = 1e-7
    warmup_steps: int = 4000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.0001
    epochs: int = 30
    max_tokens: int = 3000
    avg_last_k: int = 10
    label_smoothing: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    mu: float = 1.0
    seed: int = 1
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)

    def __post_init__(self):
        for name in ("lr_peak", "lr_init", "adam_eps", "mu"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.avg_last_k > self.epochs:
            raise ValueError(
                f"avg_last_k {self.avg_last_k} exceeds epochs {self.epochs}")


def inv_sqrt_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_init to lr_peak, then lr_peak * sqrt(warmup/step)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if step <= cfg.warmup_steps:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / cfg.warmup_steps
    return cfg.lr_peak * math.sqrt(cfg.warmup_steps / step)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: TransformerParams) -> "AdamState":
        return cls(m={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.tensors.items()})


def adam_step(params: TransformerParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction.

    Decoupled weight decay (theta <- theta - lr*wd*theta) is applied before
    the moment update. A NaN gradient aborts the step with a diagnostic.
    """
    for name, g in grads.items():
        if np.isnan(g).any():
            raise RuntimeError(f"NaN gradient in {name} at adam step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, tensor in params.tensors.items():
        g = grads.get(name)
        if cfg.weight_decay:
            tensor.data *= 1.0 - lr * cfg.weight_decay
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass
class Checkpoint:
    params: TransformerParams
    epoch: int
    valid_bleu: float


def snapshot(params: TransformerParams) -> TransformerParams:
    return TransformerParams(
        params.config, params.src_vocab_size, params.tgt_vocab_size,
        {n: tc.Tensor(t.data.copy(), requires_grad=True)
         for n, t in params.tensors.items()})


def average_checkpoints(checkpoints: Sequence[Checkpoint], k: int) -> TransformerParams:
    """Elementwise mean of the last k parameter snapshots."""
    if len(checkpoints) < k:
        raise ValueError(f"need at least {k} checkpoints, have {len(checkpoints)}")
    last = checkpoints[-k:]
    first = last[0].params
    for ckpt in last[1:]:
        if ckpt.params.config != first.config or \
           ckpt.params.src_vocab_size != first.src_vocab_size or \
           ckpt.params.tgt_vocab_size != first.tgt_vocab_size:
            raise ValueError("checkpoint config mismatch")
    out = snapshot(first)
    # mean as first + mean(differences): bit-exact when all snapshots coincide
    for name, tensor in out.tensors.items():
        acc = np.zeros_like(tensor.data)
        for ckpt in last[1:]:
            acc += ckpt.params.tensors[name].data - first.tensors[name].data
        tensor.data = first.tensors[name].data + acc / k
    return out


@dataclass
class TrainData:
    """Corpora plus the subword machinery needed for validation decoding."""

    labeled: list[EncodedPair]
    valid: list[SentencePair]
    merge_table: MergeTable
    src_vocab: Vocab
    tgt_vocab: Vocab
    augmented: list[EncodedAugExample] | None = None


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    metrics_rows: list[str]
    averaged: TransformerParams | None

    def metrics_csv(self) -> str:
        return "\n".join([METRICS_HEADER, *self.metrics_rows]) + "\n"


def _stream(seed: int, tag: int, *rest: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *rest])


def train(model_cfg: TransformerConfig, train_cfg: TrainConfig, data: TrainData,
          run_dir=None) -> TrainResult:
    """Run the full recipe and return per-epoch checkpoints plus the metrics log.

    Each step draws one labeled batch and, when consistency training is
    active (lambda2 > 0 and an augmented corpus is present), ceil(mu)
    augmented batches whose mean KL joins the loss. One checkpoint and one
    metrics row per epoch; when ``run_dir`` is set, artifacts are written
    there (metrics.csv, ckpt-epoch-<n>.bin, ckpt-avg.bin).
    """
    if not data.labeled:
        raise ValueError("empty labeled corpus")
    if not data.valid:
        raise ValueError("empty validation corpus")
    weights = train_cfg.weights
    use_consistency = weights.lambda2 > 0 and bool(data.augmented)
    if weights.lambda2 > 0 and data.augmented is None:
        raise ValueError("lambda2 > 0 requires an augmented corpus")

    params = init_params(model_cfg, len(data.src_vocab), len(data.tgt_vocab),
                         train_cfg.seed)
    state = AdamState.init(params)
    n_aug_per_step = math.ceil(train_cfg.mu)
    valid_src = [p.src for p in data.valid]
    valid_ref = [p.tgt for p in data.valid]
    greedy = DecodeConfig(beam_size=1)

    checkpoints: list[Checkpoint] = []
    rows: list[str] = []
    global_step = 0
    lr = train_cfg.lr_init
    for epoch in range(1, train_cfg.epochs + 1):
        batches = make_batches(data.labeled, train_cfg.max_tokens,
                               seed=_seed_for(train_cfg.seed, _STREAM_BATCH, epoch))
        aug_iter = None
        if use_consistency:
            aug_batches = make_aug_batches(data.augmented, train_cfg.max_tokens,
                                           seed=_seed_for(train_cfg.seed, _STREAM_AUG_BATCH, epoch))
            aug_iter = _cycle(aug_batches)
        ce_sum = kl_sum = total_sum = 0.0
        for batch in batches:
            global_step += 1
            lr = inv_sqrt_lr(global_step, train_cfg)
            loss, ce_val, kl_val = _step_loss(
                params, batch, aug_iter, n_aug_per_step, train_cfg, global_step)
            grads = tc.backward(loss)
            named = {name: grads[t] for name, t in params.tensors.items() if t in grads}
            adam_step(params, named, state, lr, train_cfg)
            ce_sum += ce_val
            kl_sum += kl_val
            total_sum += loss.item()
        n = len(batches)
        translator = Translator(params, data.merge_table, data.src_vocab,
                                data.tgt_vocab, greedy)
        hyp_lines = translator.translate_batch(valid_src)
        valid_bleu = bleu_lines(hyp_lines, valid_ref, smoothing=True).score
        rows.append(f"{epoch},{global_step},{lr!r},{ce_sum / n!r},{kl_sum / n!r},"
                    f"{total_sum / n!r},{valid_bleu!r}")
        ckpt = Checkpoint(snapshot(params), epoch, valid_bleu)
        checkpoints.append(ckpt)
        log.info("epoch %d: ce %.4f kl %.4f valid_bleu %.2f",
                 epoch, ce_sum / n, kl_sum / n, valid_bleu)

    averaged = None
    if len(checkpoints) >= train_cfg.avg_last_k:
        averaged = average_checkpoints(checkpoints, train_cfg.avg_last_k)
    result = TrainResult(checkpoints, rows, averaged)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
        for ckpt in checkpoints:
            save_checkpoint(ckpt.params, run_dir / f"ckpt-epoch-{ckpt.epoch}.bin")
        if averaged is not None:
            save_checkpoint(averaged, run_dir / "ckpt-avg.bin")
    return result


def _seed_for(seed: int, tag: int, *rest: int) -> int:
    # make_batches takes an int seed; derive one from the stream key
    return int(np.random.SeedSequence([seed, tag, *rest]).generate_state(1)[0])


def _cycle(batches: list[AugBatch]):
    while True:
        yield from batches


def _step_loss(params, batch: Batch, aug_iter, n_aug: int, cfg: TrainConfig,
               step: int):
    """Build the combined loss tensor for one step; returns (loss, ce, kl)."""
    rng_sup = _stream(cfg.seed, _STREAM_SUP_DROPOUT, step)
    logits = forward_teacher_forced(params, batch.src, batch.src_mask,
                                    batch.tgt_in, train_mode=True, rng=rng_sup)
    ce = label_smoothed_ce(logits, batch.tgt_out, cfg.label_smoothing)
    loss = tc.scale(ce, cfg.weights.lambda1)
    kl_val = 0.0
    if aug_iter is not None:
        kl_terms = []
        for j in range(n_aug):
            aug_batch = next(aug_iter)
            rng_aug = _stream(cfg.seed, _STREAM_AUG_DROPOUT, step, j)
            branches = consistency_pass(params, aug_batch, cfg.consistency,
                                        train_mode=True, rng=rng_aug)
            if branches is not None:
                kl_terms.append(consistency_kl_loss(branches, cfg.consistency))
        if kl_terms:
            kl = kl_terms[0]
            for term in kl_terms[1:]:
                kl = tc.add(kl, term)
            kl = tc.scale(kl, 1.0 / len(kl_terms))
            kl_val = kl.item()
            loss = tc.add(loss, tc.scale(kl, cfg.weights.lambda2))
    return loss, ce.item(), kl_val
