import math

import numpy as np
import pytest

import crnmt.tensorcore as tc
from crnmt.corpus import AugBatch
from crnmt.model import TransformerConfig, init_params
from crnmt.objective import (
    ConsistencyConfig, LossWeights, TokenDistributionSeq, combined_loss,
    consistency_kl_loss, consistency_pass, label_smoothed_ce, token_kl,
)
from crnmt.subword import BOS, EOS, PAD
from crnmt.tensorcore import Tensor

TINY = TransformerConfig(num_blocks=1, num_heads=2, d_model=8, d_ffn=16,
                         dropout=0.0, max_positions=32)


def logits_for_probs(probs):
    return Tensor(np.log(np.asarray(probs, dtype=float)))


# ---------------------------------------------------------------------------
# label-smoothed cross-entropy


def test_ce_epsilon_zero_is_nll():
    probs = np.array([[[0.7, 0.2, 0.1]]])
    loss = label_smoothed_ce(logits_for_probs(probs), np.array([[0]]), epsilon=0.0,
                             pad_id=99)
    assert loss.item() == pytest.approx(-math.log(0.7), abs=1e-12)


def test_ce_uniform_logits_is_log_v():
    for eps in (0.0, 0.1, 0.5):
        logits = Tensor(np.zeros((2, 3, 7)))
        tgt = np.full((2, 3), 4)
        loss = label_smoothed_ce(logits, tgt, epsilon=eps)
        assert loss.item() == pytest.approx(math.log(7), abs=1e-12)


def test_ce_hand_value():
    # V=2, p=(0.9, 0.1), target 0, eps=0.1 -> -(0.95 ln 0.9 + 0.05 ln 0.1)
    expected = -(0.95 * math.log(0.9) + 0.05 * math.log(0.1))
    loss = label_smoothed_ce(logits_for_probs([[[0.9, 0.1]]]), np.array([[0]]),
                             epsilon=0.1, pad_id=99)
    assert loss.item() == pytest.approx(expected, abs=1e-9)
    assert loss.item() == pytest.approx(0.2152, abs=1e-4)


def test_ce_all_pad_errors():
    with pytest.raises(ValueError, match="no valid tokens"):
        label_smoothed_ce(Tensor(np.zeros((1, 2, 4))), np.array([[PAD, PAD]]),
                          epsilon=0.1)


def test_ce_pad_positions_excluded():
    logits = Tensor(np.log(np.array([[[0.5, 0.5], [0.9, 0.1]]])))
    full = label_smoothed_ce(logits, np.array([[1, 1]]), epsilon=0.0, pad_id=99)
    masked = label_smoothed_ce(logits, np.array([[1, PAD]]), epsilon=0.0)
    assert masked.item() == pytest.approx(-math.log(0.5), abs=1e-12)
    assert full.item() != masked.item()


def test_ce_epsilon_validation():
    with pytest.raises(ValueError, match="epsilon"):
        label_smoothed_ce(Tensor(np.zeros((1, 1, 4))), np.array([[1]]), epsilon=1.0)


# ---------------------------------------------------------------------------
# token KL


def dist(probs, mask=None):
    probs = np.asarray(probs, dtype=float)
    mask = np.ones(probs.shape[:-1], bool) if mask is None else np.asarray(mask)
    return TokenDistributionSeq(probs, mask)


def test_kl_identical_is_zero():
    d = dist([[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]])
    assert token_kl(d, d) < 1e-12


def test_kl_hand_value():
    p = dist([[0.5, 0.5]])
    q = dist([[0.25, 0.75]])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert token_kl(p, q) == pytest.approx(expected, abs=1e-12)
    assert token_kl(p, q) == pytest.approx(0.1438, abs=1e-4)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.integers(2, 6)
        p = rng.dirichlet(np.ones(v))[None, :]
        q = rng.dirichlet(np.ones(v))[None, :]
        assert token_kl(dist(p), dist(q)) >= 0.0


def test_kl_shape_mismatch_errors():
    with pytest.raises(ValueError, match="shape mismatch"):
        token_kl(dist([[0.5, 0.5]]), dist([[0.3, 0.3, 0.4]]))


def test_kl_masked_positions_excluded():
    p = dist([[0.5, 0.5], [0.1, 0.9]], mask=[True, False])
    q = dist([[0.25, 0.75], [0.9, 0.1]], mask=[True, False])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert token_kl(p, q) == pytest.approx(expected, abs=1e-12)


def test_kl_single_class_vocab_is_zero():
    ones = dist(np.ones((3, 1)))
    assert token_kl(ones, ones) == 0.0


def test_kl_student_floor():
    p = dist([[1.0, 0.0]])
    q = dist([[0.0, 1.0]])  # log floored at 1e-12
    assert token_kl(p, q) == pytest.approx(-math.log(1e-12), abs=1e-9)


def test_distribution_seq_validates_mask_shape():
    with pytest.raises(ValueError, match="mismatch"):
        TokenDistributionSeq(np.ones((2, 3, 4)), np.ones((2, 4), bool))


# ---------------------------------------------------------------------------
# combined loss


def test_combined_loss_reduces_to_ce():
    assert combined_loss(2.5, 99.0, LossWeights(1.0, 0.0)) == 2.5


def test_combined_loss_arithmetic():
    assert combined_loss(2.0, 0.4, LossWeights(0.5, 0.5)) == pytest.approx(1.2)


def test_combined_loss_affine_in_lambda1():
    ce, kl = 1.7, 0.3
    vals = [combined_loss(ce, kl, LossWeights(l1, round(1 - l1, 1)))
            for l1 in [i / 10 for i in range(1, 10)]]
    diffs = np.diff(vals)
    np.testing.assert_allclose(diffs, diffs[0], atol=1e-12)


def test_combined_loss_on_tensors():
    ce = Tensor(np.asarray(2.0), requires_grad=False)
    kl = Tensor(np.asarray(0.4))
    out = combined_loss(ce, kl, LossWeights(0.5, 0.5))
    assert out.item() == pytest.approx(1.2)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.5)


# ---------------------------------------------------------------------------
# consistency pass


def make_aug_batch(x, u, tgt_len=3, seed=0):
    rng = np.random.default_rng(seed)
    B = x.shape[0]
    tgt = rng.integers(4, 9, size=(B, tgt_len))
    tgt_in = np.concatenate([np.full((B, 1), BOS), tgt], axis=1)
    tgt_out = np.concatenate([tgt, np.full((B, 1), EOS)], axis=1)
    return AugBatch(
        x_src=x, x_mask=x != PAD, u_src=u, u_mask=u != PAD,
        tgt_in=tgt_in, tgt_out=tgt_out, tgt_mask=tgt_out != PAD,
        token_count=int((tgt_out != PAD).sum()),
        pair_ids=tuple(range(B)),
    )


def test_identical_branches_give_zero_kl():
    params = init_params(TINY, 11, 9, 0)
    x = np.array([[4, 5, 6], [7, 8, EOS]])
    batch = make_aug_batch(x, x.copy())
    branches = consistency_pass(params, batch, train_mode=False)
    assert token_kl(branches.teacher, branches.student) < 1e-9
    assert consistency_kl_loss(branches).item() == pytest.approx(0.0, abs=1e-9)


def test_teacher_branch_is_stop_gradient():
    params = init_params(TINY, 11, 9, 1)
    x = np.array([[4, 5, 6]])
    u = np.array([[4, 6, 5]])
    batch = make_aug_batch(x, u)
    branches = consistency_pass(params, batch, train_mode=False)
    kl = consistency_kl_loss(branches)
    grads = tc.backward(kl)

    # oracle: gradient when the teacher is computed from an independent frozen copy
    frozen = init_params(TINY, 11, 9, 1)
    for name, t in frozen.tensors.items():
        t.data[...] = params[name].data
        t.requires_grad = False
    teacher_branch = consistency_pass(frozen, make_aug_batch(x, x), train_mode=False)
    student_branch = consistency_pass(params, batch, train_mode=False)
    mixed = type(branches)(teacher_branch.teacher, student_branch.student,
                           student_branch.student_logits, teacher_branch.teacher_logits)
    grads_frozen = tc.backward(consistency_kl_loss(mixed))
    for name, tensor in params.tensors.items():
        a = grads.get(tensor)
        b = grads_frozen.get(tensor)
        if a is None and b is None:
            continue
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_consistency_kl_matches_token_kl_value():
    params = init_params(TINY, 11, 9, 2)
    x = np.array([[4, 5, 6]])
    u = np.array([[6, 5, 4]])
    batch = make_aug_batch(x, u)
    branches = consistency_pass(params, batch, train_mode=False)
    loss = consistency_kl_loss(branches)
    assert loss.item() == pytest.approx(token_kl(branches.teacher, branches.student),
                                        abs=1e-9)


def test_consistency_pseudo_mode_runs_and_caps_skip():
    params = init_params(TINY, 11, 9, 3)
    x = np.array([[4, 5, 6]])
    u = np.array([[4, 6, 5]])
    batch = make_aug_batch(x, u)
    branches = consistency_pass(params, batch, ConsistencyConfig(mode="pseudo"),
                                train_mode=False)
    if branches is not None:  # decode may hit the cap on random params
        assert branches.teacher.probs.shape == branches.student.probs.shape
        assert branches.skipped + branches.teacher.probs.shape[0] == 1


def test_reverse_kl_direction_runs():
    params = init_params(TINY, 11, 9, 4)
    x = np.array([[4, 5, 6]])
    u = np.array([[6, 5, 4]])
    batch = make_aug_batch(x, u)
    branches = consistency_pass(params, batch, train_mode=False)
    fwd = consistency_kl_loss(branches, ConsistencyConfig()).item()
    rev = consistency_kl_loss(
        branches, ConsistencyConfig(kl_direction="student_to_teacher")).item()
    assert fwd >= 0 and rev >= 0
    assert fwd != pytest.approx(rev, abs=1e-12)  # directions genuinely differ


def test_consistency_config_validation():
    with pytest.raises(ValueError, match="mode"):
        ConsistencyConfig(mode="what")
    with pytest.raises(ValueError, match="kl_direction"):
        ConsistencyConfig(kl_direction="both")
    with pytest.raises(ValueError, match="normalization"):
        ConsistencyConfig(normalization="batch")
