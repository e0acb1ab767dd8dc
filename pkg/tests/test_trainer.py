import math

import numpy as np
import pytest

from crnmt.corpus import SentencePair, numericalize, numericalize_augmented
from crnmt.model import TransformerConfig, init_params, save_checkpoint
from crnmt.objective import LossWeights
from crnmt.subword import apply_bpe, build_vocab, learn_bpe
from crnmt.trainer import (
    METRICS_HEADER, AdamState, Checkpoint, TrainConfig, TrainData, TrainResult,
    adam_step, average_checkpoints, inv_sqrt_lr, snapshot, train,
)

TINY_MODEL = TransformerConfig(num_blocks=1, num_heads=2, d_model=16, d_ffn=32,
                               dropout=0.1, max_positions=64)


def tiny_cfg(**kw):
    base = dict(epochs=3, max_tokens=60, avg_last_k=2, warmup_steps=20,
                lr_peak=0.001, weights=LossWeights(1.0, 0.0), seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_at_warmup_is_peak_exactly():
    cfg = TrainConfig()
    assert inv_sqrt_lr(cfg.warmup_steps, cfg) == 0.0005


def test_lr_first_step_value():
    cfg = TrainConfig()
    expected = 1e-7 + (0.0005 - 1e-7) / 4000
    assert inv_sqrt_lr(1, cfg) == pytest.approx(expected, rel=1e-12)
    assert inv_sqrt_lr(1, cfg) == pytest.approx(2.25e-7, rel=1e-2)


def test_lr_quarter_decay():
    cfg = TrainConfig()
    assert inv_sqrt_lr(4 * cfg.warmup_steps, cfg) == pytest.approx(0.0005 / 2, rel=1e-15)


def test_lr_continuous_at_warmup():
    cfg = TrainConfig()
    before = inv_sqrt_lr(cfg.warmup_steps, cfg)
    after = cfg.lr_peak * math.sqrt(cfg.warmup_steps / (cfg.warmup_steps + 1e-9))
    assert abs(before - after) < 1e-12


def test_lr_rejects_step_zero():
    with pytest.raises(ValueError):
        inv_sqrt_lr(0, TrainConfig())


# ---------------------------------------------------------------------------
# Adam


def scalar_params():
    cfg = TransformerConfig(num_blocks=1, num_heads=1, d_model=1, d_ffn=1,
                            dropout=0.0)
    return init_params(cfg, 5, 5, 0)


def test_adam_zero_grads_no_decay_is_identity():
    params = scalar_params()
    before = params.copy_arrays()
    cfg = tiny_cfg(weight_decay=0.0)
    adam_step(params, {}, AdamState.init(params), lr=0.01, cfg=cfg)
    for name, arr in before.items():
        assert (params[name].data == arr).all()


def test_adam_first_step_magnitude():
    # single coordinate, g=1, t=1: bias-corrected m_hat/sqrt(v_hat) = 1
    params = scalar_params()
    name = "out_proj.bias"
    params[name].data[:] = 0.5
    cfg = tiny_cfg(weight_decay=0.0)
    state = AdamState.init(params)
    adam_step(params, {name: np.ones_like(params[name].data)}, state, lr=0.01, cfg=cfg)
    update = 0.5 - params[name].data
    assert update == pytest.approx(0.01, rel=1e-6)


def test_adam_decoupled_weight_decay_applied_before_update():
    params = scalar_params()
    name = "out_proj.bias"
    params[name].data[:] = 2.0
    cfg = tiny_cfg(weight_decay=0.1)
    adam_step(params, {}, AdamState.init(params), lr=0.5, cfg=cfg)
    # no grads: only the decay factor acts
    assert params[name].data[0] == pytest.approx(2.0 * (1 - 0.5 * 0.1))


def test_adam_nan_grad_aborts():
    params = scalar_params()
    bad = {"out_proj.bias": np.array([np.nan] * params["out_proj.bias"].data.size)}
    with pytest.raises(RuntimeError, match="NaN gradient in out_proj.bias"):
        adam_step(params, bad, AdamState.init(params), lr=0.01, cfg=tiny_cfg())


# ---------------------------------------------------------------------------
# checkpoint averaging


def test_average_identical_snapshots_is_identity():
    params = init_params(TINY_MODEL, 8, 8, 1)
    ckpts = [Checkpoint(snapshot(params), e, 0.0) for e in range(4)]
    avg = average_checkpoints(ckpts, 3)
    for name in params.tensors:
        np.testing.assert_array_equal(avg[name].data, params[name].data)


def test_average_k1_is_last_checkpoint():
    a = init_params(TINY_MODEL, 8, 8, 1)
    b = init_params(TINY_MODEL, 8, 8, 2)
    ckpts = [Checkpoint(a, 1, 0.0), Checkpoint(b, 2, 0.0)]
    avg = average_checkpoints(ckpts, 1)
    for name in b.tensors:
        np.testing.assert_array_equal(avg[name].data, b[name].data)


def test_average_elementwise_mean():
    a = init_params(TINY_MODEL, 8, 8, 1)
    b = snapshot(a)
    for name in a.tensors:
        a[name].data[:] = 0.0
        b[name].data[:] = 2.0
    avg = average_checkpoints([Checkpoint(a, 1, 0.0), Checkpoint(b, 2, 0.0)], 2)
    for name in a.tensors:
        assert (avg[name].data == 1.0).all()


def test_average_config_mismatch_errors():
    a = init_params(TINY_MODEL, 8, 8, 1)
    other_cfg = TransformerConfig(num_blocks=2, num_heads=2, d_model=16, d_ffn=32,
                                  dropout=0.1)
    b = init_params(other_cfg, 8, 8, 1)
    with pytest.raises(ValueError, match="config mismatch"):
        average_checkpoints([Checkpoint(a, 1, 0.0), Checkpoint(b, 2, 0.0)], 2)


def test_average_needs_k_checkpoints():
    a = init_params(TINY_MODEL, 8, 8, 1)
    with pytest.raises(ValueError, match="at least"):
        average_checkpoints([Checkpoint(a, 1, 0.0)], 2)


def test_train_config_validation():
    with pytest.raises(ValueError, match="avg_last_k"):
        TrainConfig(epochs=3, avg_last_k=10)
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(mu=0.0)


# ---------------------------------------------------------------------------
# the loop


def make_data(n=24, n_valid=6, with_aug=False, seed=0):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(8)]

    def sent():
        return " ".join(rng.choice(words, size=int(rng.integers(3, 6))))

    pairs = [SentencePair(s, s, i) for i, s in enumerate(sent() for _ in range(n))]
    valid = [SentencePair(s, s, i) for i, s in enumerate(sent() for _ in range(n_valid))]
    table = learn_bpe([p.src for p in pairs], 15)
    sv = build_vocab([apply_bpe(p.src, table) for p in pairs])
    tv = build_vocab([apply_bpe(p.tgt, table) for p in pairs])
    labeled = [numericalize(p, sv, tv, table) for p in pairs]
    augmented = None
    if with_aug:
        augmented = [numericalize_augmented(p.src, " ".join(p.src.split()[::-1]),
                                            p.tgt, p.id, sv, tv, table)
                     for p in pairs[: n // 2]]
    return TrainData(labeled=labeled, valid=valid, merge_table=table,
                     src_vocab=sv, tgt_vocab=tv, augmented=augmented)


def test_train_empty_corpora_error():
    data = make_data()
    with pytest.raises(ValueError, match="empty labeled"):
        train(TINY_MODEL, tiny_cfg(), TrainData([], data.valid, data.merge_table,
                                                data.src_vocab, data.tgt_vocab))
    with pytest.raises(ValueError, match="empty validation"):
        train(TINY_MODEL, tiny_cfg(), TrainData(data.labeled, [], data.merge_table,
                                                data.src_vocab, data.tgt_vocab))


def test_train_metrics_rows_equal_epochs(tmp_path):
    data = make_data()
    result = train(TINY_MODEL, tiny_cfg(), data, run_dir=tmp_path)
    assert len(result.metrics_rows) == 3
    csv = (tmp_path / "metrics.csv").read_text(encoding="utf-8")
    lines = csv.strip().splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 4
    assert (tmp_path / "ckpt-epoch-3.bin").exists()
    assert (tmp_path / "ckpt-avg.bin").exists()


def test_train_reproducible_byte_for_byte(tmp_path):
    data = make_data()
    r1 = train(TINY_MODEL, tiny_cfg(), data, run_dir=tmp_path / "a")
    r2 = train(TINY_MODEL, tiny_cfg(), data, run_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/ckpt-avg.bin").read_bytes() == (tmp_path / "b/ckpt-avg.bin").read_bytes()


def test_supervised_reduction_is_bit_identical(tmp_path):
    # lambda2=0 with an augmented corpus present == CE-only baseline (no corpus)
    data_aug = make_data(with_aug=True)
    data_plain = TrainData(data_aug.labeled, data_aug.valid, data_aug.merge_table,
                           data_aug.src_vocab, data_aug.tgt_vocab, augmented=None)
    cfg = tiny_cfg(weights=LossWeights(1.0, 0.0))
    r1 = train(TINY_MODEL, cfg, data_aug, run_dir=tmp_path / "with_aug")
    r2 = train(TINY_MODEL, cfg, data_plain, run_dir=tmp_path / "baseline")
    assert (tmp_path / "with_aug/metrics.csv").read_bytes() == \
        (tmp_path / "baseline/metrics.csv").read_bytes()
    for epoch in (1, 2, 3):
        assert (tmp_path / f"with_aug/ckpt-epoch-{epoch}.bin").read_bytes() == \
            (tmp_path / f"baseline/ckpt-epoch-{epoch}.bin").read_bytes()


def test_consistency_branch_changes_trajectory(tmp_path):
    data = make_data(with_aug=True)
    ce_only = train(TINY_MODEL, tiny_cfg(weights=LossWeights(1.0, 0.0)), data)
    mixed = train(TINY_MODEL, tiny_cfg(weights=LossWeights(0.5, 0.5)), data)
    assert ce_only.metrics_rows != mixed.metrics_rows
    kl_col = [float(row.split(",")[4]) for row in mixed.metrics_rows]
    assert any(k > 0 for k in kl_col)


def test_lambda2_without_augmented_corpus_errors():
    data = make_data(with_aug=False)
    with pytest.raises(ValueError, match="augmented"):
        train(TINY_MODEL, tiny_cfg(weights=LossWeights(0.5, 0.5)), data)


def test_mu_ceil_draws(tmp_path):
    # mu=1.5 -> 2 augmented batches per step; just verify it runs and logs kl
    data = make_data(with_aug=True)
    cfg = tiny_cfg(weights=LossWeights(0.5, 0.5), mu=1.5, epochs=2, avg_last_k=1)
    result = train(TINY_MODEL, cfg, data)
    assert len(result.metrics_rows) == 2
