import math

import numpy as np
import pytest

from crackseg import backend
from crackseg.backend import Tensor
from crackseg.data import generate_synthetic
from crackseg.r2aunet import ModelConfig, build_model
from crackseg.training import (
    Adam,
    NonFiniteGradient,
    TrainConfig,
    dice_loss,
    evaluate,
    split_80_20,
    stack_samples,
    train,
    write_history_csv,
)
from helpers import central_diff, grad_close


# ---------------------------------------------------------------------------
# dice loss


def test_dice_loss_zero_for_identical_binary_masks():
    rng = np.random.default_rng(0)
    target = (rng.random((2, 1, 8, 8)) > 0.6).astype(np.float32)
    loss = dice_loss(Tensor(target.copy()), target, eps=1.0)
    assert loss.item() == 0.0


def test_dice_loss_disjoint_closed_form():
    n = 64
    target = np.zeros((1, 1, 8, 8), np.float32)
    target.reshape(-1)[: n // 2] = 1.0
    pred = 1.0 - target
    loss = dice_loss(Tensor(pred), target, eps=1.0)
    assert loss.item() == pytest.approx(1.0 - 1.0 / (n + 1.0))


def test_dice_loss_uniform_half_prediction():
    n = 4096
    target = np.zeros((1, 1, 64, 64), np.float32)
    target.reshape(-1)[: n // 2] = 1.0
    pred = np.full((1, 1, 64, 64), 0.5, np.float32)
    loss = dice_loss(Tensor(pred), target, eps=1e-9)
    # 1 - 2*(0.25 n) / (0.5 n + 0.5 n) = 0.5
    assert loss.item() == pytest.approx(0.5, abs=1e-6)


def test_dice_loss_range_and_gradcheck():
    rng = np.random.default_rng(1)
    target = (rng.random((1, 1, 6, 6)) > 0.5).astype(np.float32)
    pred = backend.param(rng.random((1, 1, 6, 6)).astype(np.float32), "pred")

    def make_loss():
        return dice_loss(backend.sigmoid(pred), target, eps=1.0)

    loss = make_loss()
    assert 0.0 <= loss.item() < 1.0
    backend.backward(loss)
    analytic = pred.grad.copy().reshape(-1)
    flat = pred.data.reshape(-1)
    for idx in rng.choice(flat.size, 10, replace=False):
        numeric = central_diff(lambda: make_loss().item(), flat, int(idx))
        assert grad_close(float(analytic[int(idx)]), numeric)


def test_dice_loss_shape_mismatch():
    with pytest.raises(backend.ContractViolation):
        dice_loss(Tensor(np.zeros((1, 1, 4, 4), np.float32)),
                  np.zeros((1, 1, 8, 8), np.float32))


# ---------------------------------------------------------------------------
# adam


def test_adam_zero_gradient_keeps_params():
    p = backend.param(np.array([1.0, -2.0], np.float32), "p")
    before = p.data.copy()
    Adam([p]).step(lr=1e-3)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_is_lr_sign():
    p = backend.param(np.array([0.0, 0.0], np.float32), "p")
    p.grad[...] = np.array([0.5, -0.25], np.float32)
    Adam([p]).step(lr=1e-3)
    np.testing.assert_allclose(p.data, [-1e-3, 1e-3], atol=1e-6)


def test_adam_constant_gradient_converges_to_lr_sign_steps():
    p = backend.param(np.zeros(2, np.float32), "p")
    opt = Adam([p])
    g = np.array([0.3, -0.7], np.float32)
    prev = p.data.copy()
    for _ in range(500):
        p.grad[...] = g
        prev = p.data.copy()
        opt.step(lr=1e-3)
    step = p.data - prev
    np.testing.assert_allclose(step, [-1e-3, 1e-3], atol=1e-3 * 1e-3 + 1e-6)


def test_adam_nonfinite_gradient_names_parameter():
    p = backend.param(np.zeros(2, np.float32), "enc1.u1.ff.weight")
    p.grad[...] = np.array([np.nan, 0.0], np.float32)
    with pytest.raises(NonFiniteGradient, match="enc1.u1.ff.weight"):
        Adam([p]).step(lr=1e-3)


# ---------------------------------------------------------------------------
# split


def test_split_paper_counts():
    dataset = list(range(4717))
    train_set, val_set = split_80_20(dataset, seed=0)
    assert (len(train_set), len(val_set)) == (3774, 943)


def test_split_small_and_boundaries():
    train_set, val_set = split_80_20(list(range(5)), seed=1)
    assert (len(train_set), len(val_set)) == (4, 1)
    with pytest.raises(ValueError, match="at least 5"):
        split_80_20([1, 2, 3, 4], seed=0)


def test_split_deterministic_disjoint_exhaustive():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(5, 200))
        dataset = list(range(n))
        a_train, a_val = split_80_20(dataset, seed=7)
        b_train, b_val = split_80_20(dataset, seed=7)
        assert a_train == b_train and a_val == b_val
        assert set(a_train) | set(a_val) == set(dataset)
        assert not set(a_train) & set(a_val)
        assert len(a_train) == (4 * n + 4) // 5


# ---------------------------------------------------------------------------
# schedule semantics


def schedule_cfg(**overrides):
    return TrainConfig(**{"epochs": 30, "batch_size": 2, "seed": 0, **overrides})


@pytest.fixture(scope="module")
def tiny_samples():
    return generate_synthetic(4, 32, seed=11)


def test_frozen_validation_decays_then_stops(tiny_samples):
    model = build_model(ModelConfig.tiny(), seed=0)
    cfg = schedule_cfg()
    _, history = train(model, tiny_samples, tiny_samples, cfg,
                       val_loss_fn=lambda m: 0.5)
    assert [r.epoch for r in history.records] == list(range(1, 11))
    assert history.decay_epochs == [5, 10]
    assert history.stop_reason == "early_stop"
    lrs = [r.lr for r in history.records]
    assert lrs[:5] == [1e-3] * 5
    assert lrs[5:10] == pytest.approx([1e-4] * 5)


def test_strictly_improving_validation_runs_all_epochs(tiny_samples):
    model = build_model(ModelConfig.tiny(), seed=1)
    losses = iter(np.linspace(0.9, 0.1, 40))
    cfg = schedule_cfg(epochs=12)
    _, history = train(model, tiny_samples, tiny_samples, cfg,
                       val_loss_fn=lambda m: next(losses))
    assert len(history.records) == 12
    assert history.decay_epochs == []
    assert history.stop_reason == "max_epochs"
    assert all(r.lr == 1e-3 for r in history.records)
    # lr sequence is non-increasing by contract
    assert all(a >= b for a, b in zip((r.lr for r in history.records),
                                      (r.lr for r in history.records[1:])))


def test_train_returns_best_epoch_weights(tiny_samples):
    # validation pretends epoch 3 was best; returned weights must reproduce
    # it (the first stub value is the pre-training baseline)
    model = build_model(ModelConfig.tiny(), seed=2)
    sequence = iter([0.9, 0.8, 0.6, 0.2, 0.7, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9])
    snapshots = {}

    def fake_val(m):
        value = next(sequence)
        snapshots[value] = m.copy_weights()
        return value

    cfg = schedule_cfg(epochs=12, early_stop_patience=6, plateau_patience=3)
    trained, history = train(model, tiny_samples, tiny_samples, cfg,
                             val_loss_fn=fake_val)
    assert history.best_epoch == 3
    assert history.best_val_loss == pytest.approx(0.2)
    best = snapshots[0.2]
    for name, arr in trained.state_arrays().items():
        np.testing.assert_array_equal(arr, best[name])


def test_train_loss_decreases_on_tiny_overfit(tiny_samples):
    model = build_model(ModelConfig.tiny(), seed=3)
    cfg = schedule_cfg(epochs=8, batch_size=4)
    _, history = train(model, tiny_samples, tiny_samples, cfg)
    assert history.records[-1].train_loss < history.records[0].train_loss
    assert history.stop_reason in ("max_epochs", "early_stop")
    # real validation pass fills the metric columns
    assert all(math.isfinite(r.val_dice) for r in history.records)


def test_history_bitwise_reproducible(tiny_samples):
    def run():
        model = build_model(ModelConfig.tiny(), seed=4)
        cfg = schedule_cfg(epochs=4, batch_size=4, seed=9)
        _, history = train(model, tiny_samples, tiny_samples, cfg)
        return [(r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_iou, r.lr)
                for r in history.records]

    assert run() == run()


def test_train_validates_preconditions(tiny_samples):
    model = build_model(ModelConfig.tiny(), seed=5)
    with pytest.raises(ValueError, match="non-empty"):
        train(model, [], tiny_samples, schedule_cfg())
    with pytest.raises(ValueError, match="batch_size"):
        train(model, tiny_samples, tiny_samples, schedule_cfg(batch_size=64))


def test_train_config_validation():
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(early_stop_patience=0).validate()
    with pytest.raises(ValueError, match="decay_factor"):
        TrainConfig(decay_factor=1.0).validate()
    with pytest.raises(ValueError, match="unknown train config"):
        TrainConfig.from_dict({"lr": 0.1})


def test_history_csv_roundtrip(tmp_path, tiny_samples):
    model = build_model(ModelConfig.tiny(), seed=6)
    _, history = train(model, tiny_samples, tiny_samples,
                       schedule_cfg(epochs=2, batch_size=4))
    path = tmp_path / "history.csv"
    write_history_csv(history, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_dice,val_iou,lr"
    assert len(lines) == 1 + len(history.records)


def test_evaluate_perfect_predictions():
    samples = generate_synthetic(2, 32, seed=12)
    images, masks = stack_samples(samples)

    class Oracle:
        def forward(self, x, training):
            idx = [np.where((images == xi).all(axis=(1, 2, 3)))[0][0]
                   for xi in x.data]
            return Tensor(masks[idx])

    loss, mean_dice, mean_iou = evaluate(Oracle(), images, masks, dice_eps=1.0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert mean_dice == 1.0 and mean_iou == 1.0
