import math

import numpy as np
import pytest

from psvit.autograd import Tensor, precision
from psvit.data import synthetic_blobs
from psvit.model import ParamStore, PsVit, preset
from psvit.train import (
    LrSchedule, OptimState, OptimizerError, TrainingError, adamw_step, evaluate, lr_at, train,
)


def store_with(value, name="w"):
    with precision(np.float64):
        t = Tensor([value], requires_grad=True)
    return ParamStore([(name, t)]), t


def test_adamw_matches_closed_form_recurrence():
    store, w = store_with(1.5)
    lr, wd, g = 0.01, 0.05, 0.3
    state = OptimState(weight_decay=wd)
    p = 1.5
    for _ in range(3):
        w.grad = np.array([g])
        adamw_step(store, state, lr)
        # with a constant gradient the bias-corrected moments are g and g^2 exactly
        p = p * (1 - lr * wd) - lr * g / (abs(g) + state.eps)
        assert abs(w.data[0] - p) < 1e-6
    assert state.step == 3


def test_adamw_general_recurrence(rng):
    store, w = store_with(0.2)
    lr, (b1, b2), eps, wd = 3e-3, (0.9, 0.999), 1e-8, 0.05
    state = OptimState(weight_decay=wd)
    p, m, v = 0.2, 0.0, 0.0
    for t in range(1, 6):
        g = float(rng.standard_normal())
        w.grad = np.array([g])
        adamw_step(store, state, lr)
        p *= 1 - lr * wd
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(w.data[0] - p) < 1e-9


def test_decay_only_step_with_zero_gradient():
    store, w = store_with(2.0)
    state = OptimState(weight_decay=0.1)
    for _ in range(4):
        w.grad = np.zeros(1)
        adamw_step(store, state, 0.5)
    assert abs(w.data[0] - 2.0 * 0.95**4) < 1e-12


def test_exempt_parameters_are_not_decayed():
    store, b = store_with(2.0, name="head.fc.bias")
    b.grad = np.zeros(1)
    adamw_step(store, OptimState(weight_decay=0.1), 0.5)
    assert b.data[0] == 2.0


def test_missing_gradient_on_decayed_parameter():
    store, _ = store_with(1.0)
    with pytest.raises(OptimizerError):
        adamw_step(store, OptimState(), 0.1)


def test_lr_schedule_points():
    s = LrSchedule(base_lr=1.0, warmup_epochs=5, total_epochs=25, steps_per_epoch=2)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5) == pytest.approx(0.5)
    assert lr_at(s, 10) == pytest.approx(1.0)
    assert lr_at(s, 30) == pytest.approx(0.5)
    assert lr_at(s, 50) == pytest.approx(0.0, abs=1e-12)
    assert lr_at(s, 500) == lr_at(s, 50)
    assert all(lr_at(s, k) <= lr_at(s, k - 1) for k in range(11, 50))
    with pytest.raises(ValueError):
        LrSchedule(1.0, warmup_epochs=10, total_epochs=10)


def toy2(seed=0):
    return PsVit(preset("toy", num_classes=2), seed=seed)


def test_training_is_deterministic():
    ds = synthetic_blobs(32, 16, 2, seed=0)
    runs = [train(toy2(), ds, LrSchedule(1e-3, 1, 3, 1), 3, seed=4) for _ in range(2)]
    assert runs[0] == runs[1]


def test_zero_lr_gives_flat_loss():
    ds = synthetic_blobs(32, 16, 2, seed=0)
    hist = train(toy2(), ds, LrSchedule(0.0, 1, 4, 1), 4, seed=0)
    assert len({round(h.loss, 6) for h in hist}) == 1


def test_loss_decreases_quickly():
    ds = synthetic_blobs(64, 16, 2, seed=3)
    hist = train(toy2(3), ds, LrSchedule(total_epochs=200, steps_per_epoch=2), 10, seed=3)
    assert hist[-1].loss < hist[0].loss


def test_class_count_mismatch():
    with pytest.raises(TrainingError):
        train(toy2(), synthetic_blobs(8, 16, 3), LrSchedule(total_epochs=10), 1)


def test_evaluate_top5_contains_top1(rng):
    model = PsVit(preset("toy", num_classes=8), seed=0)
    ds = synthetic_blobs(40, 16, 8, seed=1)
    res = evaluate(model, ds)
    assert res["top5"] >= res["top1"]
    assert res["count"] == 40


def test_untrained_model_is_near_chance():
    accs = [evaluate(toy2(seed), synthetic_blobs(64, 16, 2, seed=seed))["top1"] for seed in range(5)]
    assert abs(np.mean(accs) - 0.5) <= 0.2
