"""Training objective: label-smoothed cross-entropy, token-level KL
consistency between a clean-source teacher branch and an augmented-source
student branch, and their weighted combination.

The teacher branch runs without gradient recording (its distributions act as
soft pseudo-labels); the student branch records. Both loss terms are per-token
means over non-pad positions, so the lambda balance is insensitive to batch
shape. The direction/detach/decoder-input/normalization choices are switches
on ``ConsistencyConfig``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .corpus import AugBatch
from .model import TransformerParams, forward_teacher_forced
from .subword import BOS, PAD
from .tensorcore import Tensor

KL_PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(KL_PROB_FLOOR)


@dataclass(frozen=True)
class LossWeights:
    """lambda1 weighs the supervised CE term, lambda2 the KL consistency term."""

    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ConsistencyConfig:
    """Switches for the two-branch pass (defaults follow the pseudo-labeling reading)."""

    mode: str = "forced"              # "forced": decoder input [bos, y]; "pseudo": [bos, greedy(x)]
    kl_direction: str = "teacher_to_student"  # or "student_to_teacher"
    detach_teacher: bool = True
    normalization: str = "token"      # or "sentence"

    def __post_init__(self):
        if self.mode not in ("forced", "pseudo"):
            raise ValueError(f"unknown consistency mode {self.mode!r}")
        if self.kl_direction not in ("teacher_to_student", "student_to_teacher"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.normalization not in ("token", "sentence"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class TokenDistributionSeq:
    """Per-position probability rows over the vocabulary, with a validity mask."""

    probs: np.ndarray  # [..., T, V], unmasked rows on the simplex
    mask: np.ndarray   # [..., T] bool

    def __post_init__(self):
        if self.probs.shape[:-1] != self.mask.shape:
            raise ValueError(
                f"probs/mask shape mismatch {self.probs.shape} vs {self.mask.shape}")


def label_smoothed_ce(logits: Tensor, tgt_out: np.ndarray, epsilon: float,
                      pad_id: int = PAD) -> Tensor:
    """Mean per-token loss -sum_v q(v) log p(v), q = (1-eps)*onehot + eps/V.

    Averaged over non-pad target tokens; differentiable through ``logits``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    valid = tgt_out != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid tokens")
    V = logits.shape[-1]
    logp = tc.log_softmax(logits)
    # gather positions need in-range ids even at pads; pads are masked out below
    safe_ids = np.where(valid, tgt_out, 0)
    gold = tc.gather_last(logp, safe_ids)
    uniform = tc.reduce_sum(logp, axis=logp.ndim - 1)
    per_tok = tc.add(tc.scale(gold, 1.0 - epsilon), tc.scale(uniform, epsilon / V))
    masked = tc.mul(per_tok, Tensor(valid.astype(per_tok.data.dtype)))
    return tc.scale(tc.reduce_sum(masked), -1.0 / n_valid)


def token_kl(teacher: TokenDistributionSeq, student: TokenDistributionSeq) -> float:
    """Mean over unmasked positions of KL(teacher_t || student_t), in nats.

    Student probabilities are floored at 1e-12 inside the log.
    """
    if teacher.probs.shape != student.probs.shape:
        raise ValueError(
            f"distribution shape mismatch {teacher.probs.shape} vs {student.probs.shape}")
    if not np.array_equal(teacher.mask, student.mask):
        raise ValueError("teacher/student masks differ")
    p = teacher.probs
    logq = np.log(np.maximum(student.probs, KL_PROB_FLOOR))
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    kl_pos = (plogp - p * logq).sum(axis=-1)
    n = int(teacher.mask.sum())
    if n == 0:
        return 0.0
    return float(kl_pos[teacher.mask].sum() / n)


def combined_loss(ce, kl, weights: LossWeights):
    """lambda1*ce + lambda2*kl; works on floats or tensorcore Tensors."""
    if isinstance(ce, Tensor) or isinstance(kl, Tensor):
        ce_t = ce if isinstance(ce, Tensor) else Tensor(np.asarray(float(ce)))
        kl_t = kl if isinstance(kl, Tensor) else Tensor(np.asarray(float(kl)))
        return tc.add(tc.scale(ce_t, weights.lambda1), tc.scale(kl_t, weights.lambda2))
    return weights.lambda1 * ce + weights.lambda2 * kl


@dataclass
class ConsistencyBranches:
    """Output of one two-branch pass.

    The logits tensors carry gradient graphs where recording was enabled
    (student always during training; teacher only when not detached).
    ``teacher``/``student`` are plain distribution snapshots.
    """

    teacher: TokenDistributionSeq
    student: TokenDistributionSeq
    student_logits: Tensor
    teacher_logits: Tensor
    skipped: int = 0


def consistency_pass(params: TransformerParams, batch: AugBatch,
                     cfg: ConsistencyConfig = ConsistencyConfig(),
                     train_mode: bool = False, rng=None,
                     decode_cfg=None) -> ConsistencyBranches | None:
    """Run the clean (teacher) and augmented (student) branches.

    Teacher: forward on x without gradient recording, dropout off. Student:
    forward on u, recording, dropout per ``train_mode``. The decoder input is
    [bos, y] in forced mode, or [bos, greedy(x)] in pseudo mode (cap-hit
    decodes are skipped; returns None if every example was skipped).
    """
    if cfg.mode == "pseudo":
        from .decoding import DecodeConfig, greedy_decode_batch
        dcfg = decode_cfg or DecodeConfig(beam_size=1)
        with tc.no_grad():
            hyps = greedy_decode_batch(params, batch.x_src, batch.x_mask, dcfg)
        keep_rows = [i for i, h in enumerate(hyps) if not h.hit_cap]
        skipped = len(hyps) - len(keep_rows)
        if not keep_rows:
            return None
        rows = [[BOS] + list(hyps[i].tokens) for i in keep_rows]
        width = max(len(r) for r in rows)
        tgt_in = np.full((len(rows), width), PAD, dtype=np.int64)
        for j, r in enumerate(rows):
            tgt_in[j, : len(r)] = r
        tgt_mask = tgt_in != PAD
        idx = np.asarray(keep_rows)
        x_src, x_mask = batch.x_src[idx], batch.x_mask[idx]
        u_src, u_mask = batch.u_src[idx], batch.u_mask[idx]
    else:
        tgt_in, tgt_mask, skipped = batch.tgt_in, batch.tgt_mask, 0
        x_src, x_mask = batch.x_src, batch.x_mask
        u_src, u_mask = batch.u_src, batch.u_mask

    if cfg.detach_teacher:
        with tc.no_grad():
            teacher_logits = forward_teacher_forced(params, x_src, x_mask, tgt_in,
                                                    train_mode=False, rng=None)
    else:
        teacher_logits = forward_teacher_forced(params, x_src, x_mask, tgt_in,
                                                train_mode=False, rng=None)
    student_logits = forward_teacher_forced(params, u_src, u_mask, tgt_in,
                                            train_mode=train_mode, rng=rng)
    with tc.no_grad():
        teacher_probs = tc.softmax(teacher_logits).data
        student_probs = tc.softmax(student_logits).data

    teacher = TokenDistributionSeq(teacher_probs.copy(), tgt_mask)
    student = TokenDistributionSeq(student_probs.copy(), tgt_mask)
    return ConsistencyBranches(teacher, student, student_logits, teacher_logits, skipped)


def consistency_kl_loss(branches: ConsistencyBranches,
                        cfg: ConsistencyConfig = ConsistencyConfig()) -> Tensor:
    """Differentiable KL term matching ``token_kl`` on the branch snapshots.

    The reference distribution (the one inside the log on the right-hand
    side) is floored at 1e-12. When the teacher was detached its logits carry
    no graph, so the teacher contribution is constant by construction.
    """
    mask = branches.teacher.mask
    dtype = branches.student_logits.data.dtype
    if cfg.normalization == "token":
        denom = max(int(mask.sum()), 1)
        weights = mask.astype(dtype) / denom
    else:
        per_sent = np.maximum(mask.sum(axis=-1, keepdims=True), 1)
        weights = mask.astype(dtype) / per_sent / mask.shape[0]

    if cfg.kl_direction == "teacher_to_student":
        ref, other = branches.student_logits, branches.teacher_logits
    else:
        ref, other = branches.teacher_logits, branches.student_logits
    log_ref = tc.clip_min(tc.log_softmax(ref), _LOG_FLOOR)
    p = tc.softmax(other)
    log_p = tc.log_softmax(other)
    # sum_v p*(log p - log ref); p underflowing to 0 contributes exactly 0
    diff = tc.add(log_p, tc.scale(log_ref, -1.0))
    kl_pos = tc.reduce_sum(tc.mul(p, diff), axis=diff.ndim - 1)
    return tc.reduce_sum(tc.mul(kl_pos, Tensor(weights)))
