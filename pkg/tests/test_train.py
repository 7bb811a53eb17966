"""Optimizer oracle, lr schedule, reproducibility, and a training smoke run."""

import numpy as np
import pytest

from frontseg.errors import ConfigError
from frontseg.layers import Param
from frontseg.losses import LossWeights
from frontseg.model import ModelConfig
from frontseg.synth import SynthConfig, generate_scenes
from frontseg.train import AdamW, TrainConfig, adamw_step, train, toy_train_config


def reference_adamw_trace(x0, grad_fn, lr, steps, beta1=0.9, beta2=0.999,
                          eps=1e-8, weight_decay=0.0):
    """Independently coded scalar AdamW for the oracle comparison."""
    x, m, v = float(x0), 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        x = x * (1 - lr * weight_decay)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        x = x - lr * mh / (vh ** 0.5 + eps)
        trace.append(x)
    return trace


class TestAdamWStep:
    def test_zero_gradient_no_motion(self):
        p = np.array([1.0, -2.0])
        out, m, v = adamw_step(p, np.zeros(2), np.zeros(2), np.zeros(2), t=1,
                               lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(out, p)

    def test_constant_gradient_sign_bound(self):
        p = np.array([0.0])
        m = np.zeros(1)
        v = np.zeros(1)
        g = np.array([0.37])
        prev = p
        for t in range(1, 301):
            p, m, v = adamw_step(p, g, m, v, t, lr=0.01, weight_decay=0.0)
            step = prev - p
            prev = p
        # Moments reach their fixed point: step approaches lr * sign(g).
        assert abs(step[0] - 0.01) < 1e-6

    def test_quadratic_bowl_matches_reference(self):
        # f(x) = 0.5 * a x^2, grad = a x, with weight decay active.
        a = 3.0
        lr, wd = 0.05, 0.01
        expected = reference_adamw_trace(1.5, lambda x: a * x, lr, 10,
                                         weight_decay=wd)
        x = np.array([1.5])
        m = np.zeros(1)
        v = np.zeros(1)
        got = []
        for t in range(1, 11):
            x, m, v = adamw_step(x, a * x, m, v, t, lr=lr, weight_decay=wd)
            got.append(float(x[0]))
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_optimizer_class_matches_step(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal(5).astype(np.float64)
        grad = rng.standard_normal(5).astype(np.float64)
        p = Param(data.copy())
        p.grad[...] = grad
        tcfg = TrainConfig(weight_decay=0.02)
        opt = AdamW({"w": p}, tcfg)
        opt.step(lr=0.01)
        expected, _, _ = adamw_step(data, grad, np.zeros(5), np.zeros(5), 1,
                                    lr=0.01, beta1=tcfg.beta1, beta2=tcfg.beta2,
                                    eps=tcfg.eps, weight_decay=0.02)
        np.testing.assert_allclose(p.data, expected, atol=1e-15)


class TestSchedule:
    def test_closed_form(self):
        tcfg = TrainConfig()
        assert abs(tcfg.lr_at(10) - 0.001 * 0.99 ** 10) < 1e-15
        assert abs(tcfg.lr_at(10) - 9.04382075008804e-4) < 1e-12

    def test_epoch_zero_is_lr0(self):
        assert TrainConfig(lr0=0.5).lr_at(0) == 0.5


def tiny_scenes(n, seed=0, size=(64, 64)):
    return generate_scenes(SynthConfig(seed=seed, size=size), n)


def tiny_train(seed=0, epochs=2, variant="hooknet_deepsup"):
    scenes = tiny_scenes(6, seed=100)
    tcfg = toy_train_config(epochs=epochs, seed=seed, batch_size=4,
                            patch_size=32, stride=32)
    mcfg = ModelConfig(variant=variant, base_channels=2)
    return train(mcfg, scenes[:4], scenes[4:], tcfg)


class TestTrainLoop:
    def test_zero_epochs_initial_checkpoint(self):
        scenes = tiny_scenes(4)
        tcfg = toy_train_config(epochs=0, patch_size=32, stride=32)
        mcfg = ModelConfig(variant="hooknet", base_channels=2)
        model, report = train(mcfg, scenes[:3], scenes[3:], tcfg)
        assert report.epochs == []
        assert report.best_checkpoint_id == "init"
        from frontseg.model import TwoBranchNet
        fresh = TwoBranchNet(mcfg, seed=tcfg.seed)
        for name, arr in fresh.state_tensors().items():
            np.testing.assert_array_equal(arr, model.state_tensors()[name])

    def test_empty_split_rejected(self):
        scenes = tiny_scenes(2)
        tcfg = toy_train_config(epochs=1, patch_size=32, stride=32)
        with pytest.raises(ConfigError):
            train(ModelConfig(variant="hooknet", base_channels=2), scenes, [], tcfg)

    def test_reproducible_runs(self):
        model_a, report_a = tiny_train(seed=5)
        model_b, report_b = tiny_train(seed=5)
        assert report_a.to_csv() == report_b.to_csv()
        for name, arr in model_a.state_tensors().items():
            np.testing.assert_array_equal(arr, model_b.state_tensors()[name])

    def test_seed_changes_run(self):
        _, report_a = tiny_train(seed=5, epochs=1)
        _, report_b = tiny_train(seed=6, epochs=1)
        assert report_a.to_csv() != report_b.to_csv()

    def test_report_rows_and_csv_columns(self):
        _, report = tiny_train(seed=1, epochs=2)
        assert len(report.epochs) == 2
        lines = report.to_csv().splitlines()
        assert lines[0] == ("epoch,lr,loss_total,loss_target,loss_context,"
                            "loss_deep_1,loss_deep_2,loss_deep_3,val_iou")
        # hooknet_deepsup has target, context, deep_1; deep_2/3 stay empty.
        first = lines[1].split(",")
        assert first[3] != "" and first[4] != "" and first[5] != ""
        assert first[6] == "" and first[7] == ""

    def test_loss_decreases_on_smoke_run(self):
        scenes = generate_scenes(SynthConfig(seed=42, size=(64, 64)), 10)
        tcfg = toy_train_config(epochs=4, seed=3, batch_size=8,
                                patch_size=32, stride=32)
        mcfg = ModelConfig(variant="hooknet", base_channels=4)
        _, report = train(mcfg, scenes[:8], scenes[8:], tcfg)
        losses = [s.loss_total for s in report.epochs]
        assert losses[-1] < losses[0]
        assert report.best_val_iou is not None
