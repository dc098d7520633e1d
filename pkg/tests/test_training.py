"""
Tests for the optimizer, clipping and the training loop
"""

import math

import numpy as np
import pandas as pd
import pytest

from conftest import tiny_network

from vti.core.errors import ContractViolation, TrainingError
from vti.engine import Tensor
from vti.schemas.config import TrainConfig
from vti.services.checkpoint_service import decode_checkpoint, encode_checkpoint
from vti.services.model_service import VtiModel
from vti.services.training_service import (
    AdamState,
    adam_step,
    clip_by_global_norm,
    evaluate_loss,
    fit,
    write_history,
)


# ============================================================================
# Optimizer
# ============================================================================

def test_adam_first_step_example():
    """Test g = 1 moves a zero parameter by -lr; g = 0 leaves it alone"""
    params = {"w": Tensor(np.zeros(2))}
    moments = AdamState.zeros(params)
    adam_step(params, {"w": np.array([1.0, 0.0], dtype=np.float32)}, moments, 1, TrainConfig(learning_rate=1e-3))
    assert params["w"].data[0] == pytest.approx(-1e-3, rel=1e-4)
    assert params["w"].data[1] == 0.0
    assert moments.m["w"][0] == pytest.approx(0.1)
    assert moments.v["w"][0] == pytest.approx(0.001)


def test_adam_non_finite_gradient():
    """Test a NaN gradient names its parameter and changes nothing"""
    params = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(3))}
    moments = AdamState.zeros(params)
    grads = {"a": np.ones(2, dtype=np.float32), "b": np.array([0.0, np.nan, 1.0], dtype=np.float32)}
    with pytest.raises(TrainingError) as info:
        adam_step(params, grads, moments, 1, TrainConfig())
    assert info.value.param_name == "b"
    assert np.all(params["a"].data == 1.0)
    assert np.all(moments.m["a"] == 0.0)


def test_adam_contracts():
    """Test step numbering and gradient shapes"""
    params = {"w": Tensor(np.zeros(2))}
    with pytest.raises(ContractViolation):
        adam_step(params, {"w": np.zeros(2)}, AdamState.zeros(params), 0, TrainConfig())
    with pytest.raises(ContractViolation):
        adam_step(params, {"w": np.zeros(3)}, AdamState.zeros(params), 1, TrainConfig())
    with pytest.raises(ContractViolation):
        adam_step(params, {"x": np.zeros(2)}, AdamState.zeros(params), 1, TrainConfig())


def test_clip_by_global_norm():
    """Test joint scaling to the bound, and no-ops below it or when disabled"""
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.allclose(grads["a"], 0.6) and np.allclose(grads["b"], 0.8)

    small = {"a": np.array([0.3, 0.4])}
    clip_by_global_norm(small, 1.0)
    assert np.allclose(small["a"], [0.3, 0.4])

    disabled = {"a": np.array([30.0, 40.0])}
    assert clip_by_global_norm(disabled, 0.0) == pytest.approx(50.0)
    assert np.allclose(disabled["a"], [30.0, 40.0])


# ============================================================================
# Fit
# ============================================================================

def test_fit_is_deterministic(tiny_cfg, examples, train_cfg):
    """Test same seeds give the same history and parameters"""
    runs = []
    for _ in range(2):
        model = VtiModel(tiny_cfg, seed=1)
        result = fit(model, examples[:6], examples[6:9], train_cfg)
        runs.append((result, model.state()))
    (a, state_a), (b, state_b) = runs
    assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]
    assert [h.val_loss for h in a.history] == [h.val_loss for h in b.history]
    assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)


def test_fit_changes_parameters_and_records_history(tiny_cfg, examples, train_cfg):
    """Test one run trains, validates and snapshots each epoch"""
    model = VtiModel(tiny_cfg, seed=1)
    before = model.state()
    seen = []
    result = fit(model, examples[:6], examples[6:9], train_cfg, on_epoch=lambda s, c: seen.append((s.epoch, c.epoch)))
    after = model.state()
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    assert len(result.history) == 2 and seen == [(1, 1), (2, 2)]
    assert result.last.step == 2 * math.ceil(6 / train_cfg.batch_size)
    assert result.best.best_val_loss == min(h.val_loss for h in result.history)
    assert result.last.config["train"]["seed"] == train_cfg.seed
    assert all(math.isfinite(h.train_loss) and h.beta >= 0 for h in result.history)


def test_early_stopping_with_frozen_parameters(tiny_cfg, examples):
    """Test a constant validation loss stops after patience + 1 epochs"""
    cfg = TrainConfig(learning_rate=0.0, batch_size=4, max_epochs=10, patience=2, dropout_rate=0.0, seed=3)
    result = fit(VtiModel(tiny_cfg), examples[:4], examples[4:6], cfg)
    assert result.stopped_early
    assert len(result.history) == cfg.patience + 1
    assert result.best.epoch == 1 and result.last.bad_epochs == cfg.patience


def test_max_steps_caps_training(tiny_cfg, examples, train_cfg):
    """Test max_steps ends the run mid-epoch"""
    cfg = train_cfg.model_copy(update={"max_steps": 1, "max_epochs": 5})
    result = fit(VtiModel(tiny_cfg), examples[:8], examples[8:10], cfg)
    assert result.last.step == 1 and len(result.history) == 1


def test_resume_matches_uninterrupted_run(tiny_cfg, examples, train_cfg):
    """Test stop after epoch 1 + resume reproduces a straight 2-epoch run"""
    train, val = examples[:6], examples[6:9]
    straight = VtiModel(tiny_cfg, seed=2)
    fit(straight, train, val, train_cfg)

    class Interrupt(Exception):
        pass

    saved = {}

    def stop_after_first(stats, checkpoint):
        saved["last"] = decode_checkpoint(encode_checkpoint(checkpoint))
        raise Interrupt

    with pytest.raises(Interrupt):
        fit(VtiModel(tiny_cfg, seed=2), train, val, train_cfg, on_epoch=stop_after_first)

    resumed = VtiModel(tiny_cfg, seed=99)
    result = fit(resumed, train, val, train_cfg, resume=saved["last"])
    assert [h.epoch for h in result.history] == [1, 2]
    a, b = straight.state(), resumed.state()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_divergence_raises_training_error(tiny_cfg, examples, train_cfg):
    """Test a NaN loss aborts with a training error"""
    model = VtiModel(tiny_cfg)
    model.out_proj.bias.data[0] = np.nan
    with pytest.raises(TrainingError, match="in epoch 1") as info:
        fit(model, examples[:4], examples[4:6], train_cfg)
    assert info.value.checkpoint is not None
    assert info.value.checkpoint.epoch == 0 and info.value.checkpoint.step == 0


def test_fit_needs_both_splits(tiny_cfg, examples, train_cfg):
    """Test empty splits are rejected"""
    with pytest.raises(ContractViolation):
        fit(VtiModel(tiny_cfg), [], examples[:2], train_cfg)
    with pytest.raises(ContractViolation):
        fit(VtiModel(tiny_cfg), examples[:2], [], train_cfg)


def test_evaluate_loss_is_repeatable(tiny_cfg, examples):
    """Test validation uses posterior means only"""
    model = VtiModel(tiny_cfg)
    first = evaluate_loss(model, examples[:3])
    assert first == evaluate_loss(model, examples[:3])
    loss, ce, kl, acc = first
    assert loss >= ce - 1e-6 and kl >= 0 and 0 <= acc <= 1


def test_write_history(tiny_cfg, examples, train_cfg, tmp_path):
    """Test the history CSV has one row per epoch"""
    result = fit(VtiModel(tiny_cfg), examples[:4], examples[4:6], train_cfg)
    frame = pd.read_csv(write_history(result.history, tmp_path / "history.csv"))
    assert len(frame) == 2
    assert {"epoch", "train_loss", "val_loss", "beta"} <= set(frame.columns)


@pytest.mark.slow
def test_overfits_sixteen_reports(vocab, examples):
    """Test the network can memorize 16 reports to 99% teacher-forced token accuracy"""
    net = tiny_network(len(vocab), d_v=32, d_h=32, d_z=16, d_e=32, d_hidden=32)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=4, max_epochs=500, max_steps=2000, patience=500,
                      dropout_rate=0.0, seed=5)
    model = VtiModel(net, seed=5)
    fit(model, examples[:16], examples[:16], cfg)
    _, _, _, accuracy = evaluate_loss(model, examples[:16])
    assert accuracy >= 0.99
