"""Schedule, SGD update rule, and training-loop behavior."""

import math

import numpy as np
import pytest

from crossdense.data import synthetic_dataset
from crossdense.errors import HyperparamError, NumericError, ShapeError
from crossdense.model import build_dcc_ecnn
from crossdense.optim import (Schedule, SgdState, cosine_lr, evaluate,
                              sgd_step, train)
from crossdense.tensor import Tensor

from conftest import tiny_config


class TestCosineSchedule:
    def test_initial_lr(self):
        assert cosine_lr(0, Schedule(lr0=0.1, total_epochs=200)) == 0.1

    def test_final_lr_zero(self):
        assert cosine_lr(200, Schedule(lr0=0.1, total_epochs=200)) == pytest.approx(0, abs=1e-17)

    def test_midpoint_half(self):
        assert cosine_lr(100, Schedule(lr0=0.1, total_epochs=200)) == pytest.approx(0.05, abs=1e-12)

    def test_matches_closed_form_everywhere(self):
        sched = Schedule(lr0=0.37, total_epochs=57)
        for t in range(58):
            want = 0.37 * (1 + math.cos(math.pi * t / 57)) / 2
            assert abs(cosine_lr(t, sched) - want) < 1e-12

    def test_non_increasing(self):
        sched = Schedule(lr0=0.1, total_epochs=30)
        vals = [cosine_lr(t, sched) for t in range(31)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(HyperparamError):
            cosine_lr(-1, Schedule(0.1, 10))
        with pytest.raises(HyperparamError):
            cosine_lr(11, Schedule(0.1, 10))


class TestSgdStep:
    def _param(self, values):
        t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        return t

    def test_plain_gradient_descent(self):
        w = self._param([1.0, -2.0])
        w.grad = np.array([0.5, 0.25])
        state = SgdState([("w", w)], momentum=0.0, weight_decay=0.0)
        sgd_step([("w", w)], state, lr=0.1)
        np.testing.assert_allclose(w.data, [1.0 - 0.05, -2.0 - 0.025], rtol=1e-12)

    def test_zero_gradient_no_decay_is_noop(self):
        w = self._param([3.0, 4.0])
        state = SgdState([("w", w)], momentum=0.9, weight_decay=0.0)
        sgd_step([("w", w)], state, lr=0.1)
        np.testing.assert_array_equal(w.data, [3.0, 4.0])

    def test_momentum_matches_scalar_recurrence(self):
        # oracle: hand-rolled scalar recurrence on f(w) = 0.5*w^2 (grad = w)
        mu, lr, w0 = 0.9, 0.05, 1.7
        w_ref, v_ref = w0, 0.0
        for _ in range(2):
            v_ref = mu * v_ref + w_ref
            w_ref = w_ref - lr * v_ref

        w = self._param([w0])
        state = SgdState([("w", w)], momentum=mu, weight_decay=0.0)
        for _ in range(2):
            w.grad = w.data.copy()
            sgd_step([("w", w)], state, lr=lr)
        np.testing.assert_allclose(w.data, [w_ref], rtol=1e-12)

    def test_weight_decay_shrinks_norm_monotonically(self):
        w = self._param(np.linspace(-1, 1, 8))
        state = SgdState([("w", w)], momentum=0.0, weight_decay=0.1)
        norms = [np.linalg.norm(w.data)]
        for _ in range(5):
            w.grad = np.zeros_like(w.data)
            sgd_step([("w", w)], state, lr=0.5)
            norms.append(np.linalg.norm(w.data))
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_no_decay_filter(self):
        w = self._param([2.0])
        state = SgdState([("bn.gamma", w)], momentum=0.0, weight_decay=0.5)
        sgd_step([("bn.gamma", w)], state, lr=1.0,
                 no_decay=lambda n: n.endswith(".gamma"))
        np.testing.assert_array_equal(w.data, [2.0])

    def test_registry_mismatch(self):
        w = self._param([1.0])
        state = SgdState([("a", w)], 0.9, 0.0)
        with pytest.raises(ShapeError):
            sgd_step([("b", w)], state, lr=0.1)


class TestTrainLoop:
    def test_zero_epochs_is_noop(self):
        model = build_dcc_ecnn(tiny_config(seed=2))
        before = {n: t.data.copy() for n, t in model.named_params()}
        ds = synthetic_dataset(20, 2, seed=0)
        model, log = train(model, ds, epochs=0, batch_size=8, seed=1)
        assert log.rows == []
        for n, t in model.named_params():
            np.testing.assert_array_equal(t.data, before[n])

    def test_log_has_one_row_per_epoch(self):
        model = build_dcc_ecnn(tiny_config(seed=3))
        ds = synthetic_dataset(24, 2, seed=1)
        _, log = train(model, ds, epochs=3, batch_size=8, seed=2)
        assert [r.epoch for r in log.rows] == [1, 2, 3]
        assert log.rows[0].lr == 0.1  # schedule default starts at 0.1

    def test_default_batch_size_is_128(self):
        import inspect
        sig = inspect.signature(train)
        assert sig.parameters["batch_size"].default == 128

    def test_loss_non_increasing_small_lr_full_batch(self):
        # probabilistic: >= 4 of 5 decreases, across 3 seeds
        ds = synthetic_dataset(32, 2, seed=5)
        for seed in (0, 1, 2):
            model = build_dcc_ecnn(tiny_config(seed=seed))
            _, log = train(model, ds, epochs=5, batch_size=32,
                           sched=Schedule(lr0=1e-4, total_epochs=1000), seed=seed)
            losses = [r.train_loss for r in log.rows]
            decreases = sum(a >= b for a, b in zip(losses, losses[1:]))
            assert decreases >= 4 - 1, f"seed {seed}: losses {losses}"

    def test_bit_reproducible(self):
        ds = synthetic_dataset(40, 2, seed=6)

        def run():
            model = build_dcc_ecnn(tiny_config(seed=4, dropout=0.2))
            _, log = train(model, ds, epochs=2, batch_size=16, seed=9,
                           val_set=ds)
            return log.to_csv(), {n: t.data.copy() for n, t in model.named_params()}

        csv_a, params_a = run()
        csv_b, params_b = run()
        assert csv_a == csv_b
        for n in params_a:
            np.testing.assert_array_equal(params_a[n], params_b[n])

    def test_non_finite_loss_aborts_with_location(self):
        model = build_dcc_ecnn(tiny_config(seed=5))
        model.units["head"].fc_b.data[...] = np.nan
        ds = synthetic_dataset(16, 2, seed=7)
        with pytest.raises(NumericError, match="epoch 0 batch 0"):
            train(model, ds, epochs=1, batch_size=16, seed=0)

    def test_val_column_populated(self):
        model = build_dcc_ecnn(tiny_config(seed=6))
        ds = synthetic_dataset(16, 2, seed=8)
        _, log = train(model, ds, epochs=1, batch_size=8, seed=0, val_set=ds)
        assert log.rows[0].val_acc is not None
        csv_text = log.to_csv()
        assert csv_text.splitlines()[0] == "epoch,lr,train_loss,train_acc,val_acc"

    def test_training_fits_separable_toy(self):
        ds = synthetic_dataset(80, 2, seed=9)
        model = build_dcc_ecnn(tiny_config(seed=7))
        model, log = train(model, ds, epochs=8, batch_size=16,
                           sched=Schedule(0.1, 8), seed=3)
        assert log.rows[-1].train_acc >= 0.9
        assert evaluate(model, ds) >= 0.9
