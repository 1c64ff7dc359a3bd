"""Tests for losses, the optimizer, and the training loop."""

import numpy as np
import pytest

import posecast.autodiff as ad
from posecast.autodiff import ContractError, ShapeError, Tensor
from posecast.data import Window
from posecast.model import ModelConfig, MotionTransformer, load_checkpoint
from posecast.training import (
    AdamW,
    TrainConfig,
    TrainingLog,
    LogRow,
    _BatchSampler,
    clip_gradients,
    cross_entropy_loss,
    evaluate,
    layerwise_l1_loss,
    motion_loss,
    total_loss,
    train_loop,
    warmup_lr,
)


class TestMotionLoss:
    def test_layer_l1_hand_value(self):
        prediction = Tensor([[1.0, 2.0], [3.0, 4.0]])
        target = Tensor([[0.0, 0.0], [0.0, 0.0]])
        assert layerwise_l1_loss(prediction, target).item() == 2.5

    def test_sign_does_not_matter(self):
        prediction = Tensor([[-1.0, -2.0], [-3.0, -4.0]])
        target = Tensor([[0.0, 0.0], [0.0, 0.0]])
        assert layerwise_l1_loss(prediction, target).item() == 2.5

    def test_mean_over_layers(self):
        target = Tensor([[0.0, 0.0]])
        layers = [Tensor([[1.0, 1.0]]), Tensor([[2.0, 2.0]])]
        # per-layer means are 1 and 2
        assert motion_loss(layers, target).item() == 1.5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            layerwise_l1_loss(Tensor([[1.0]]), Tensor([[1.0, 2.0]]))

    def test_empty_layer_list_rejected(self):
        with pytest.raises(ContractError):
            motion_loss([], Tensor([[0.0]]))

    def test_gradient_is_sign_over_count(self):
        prediction = Tensor([[2.0, -3.0]], requires_grad=True)
        target = Tensor([[0.0, 0.0]])
        layerwise_l1_loss(prediction, target).backward()
        assert np.array_equal(prediction.grad, [[0.5, -0.5]])


class TestCrossEntropy:
    def test_uniform_logits_give_log_classes(self):
        loss = cross_entropy_loss(Tensor([[0.0, 0.0]]), 0)
        assert abs(loss.item() - np.log(2.0)) < 1e-15

    def test_shift_invariance(self):
        logits = np.array([[0.3, -1.2, 2.0]])
        a = cross_entropy_loss(Tensor(logits), 1).item()
        b = cross_entropy_loss(Tensor(logits + 500.0), 1).item()
        assert abs(a - b) < 1e-9

    def test_extreme_logits_stay_finite(self):
        loss = cross_entropy_loss(Tensor([[1000.0, -1000.0]]), 1)
        assert np.isfinite(loss.item())
        assert abs(loss.item() - 2000.0) < 1e-9

    def test_gradient_is_softmax_minus_one_hot(self):
        logits = Tensor([[0.0, 0.0]], requires_grad=True)
        cross_entropy_loss(logits, 0).backward()
        assert np.allclose(logits.grad, [[-0.5, 0.5]], atol=1e-15)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
        error = ad.finite_diff_check(lambda: cross_entropy_loss(logits, 2),
                                     [logits], eps=1e-5)
        assert error < 1e-7

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy_loss(Tensor([[0.0, 0.0]]), 2)
        with pytest.raises(ContractError):
            cross_entropy_loss(Tensor([[0.0, 0.0]]), -1)


class TestTotalLoss:
    def test_weighted_sum(self):
        combined = total_loss(Tensor(1.0), Tensor(2.0), 0.5)
        assert combined.item() == 2.0

    def test_zero_weight_returns_motion_alone(self):
        motion = Tensor(1.0)
        assert total_loss(motion, Tensor(5.0), 0.0) is motion
        assert total_loss(motion, None, 1.0) is motion


class TestWarmup:
    def test_linear_ramp(self):
        assert warmup_lr(1, 1e-3, 10) == 1e-4
        assert warmup_lr(5, 1e-3, 10) == 5e-4
        assert warmup_lr(10, 1e-3, 10) == 1e-3

    def test_constant_after_warmup(self):
        assert warmup_lr(11, 1e-3, 10) == 1e-3
        assert warmup_lr(1000, 1e-3, 10) == 1e-3

    def test_no_warmup_means_base_rate(self):
        assert warmup_lr(1, 1e-3, 0) == 1e-3

    def test_steps_are_one_based(self):
        with pytest.raises(ContractError):
            warmup_lr(0, 1e-3, 10)


class TestClip:
    def test_large_gradients_scale_to_max_norm(self):
        a = Tensor([3.0], requires_grad=True)
        b = Tensor([4.0], requires_grad=True)
        a.grad = np.array([3.0])
        b.grad = np.array([4.0])
        norm = clip_gradients([a, b], max_norm=1.0)
        assert norm == 5.0
        assert np.allclose(a.grad, [0.6])
        assert np.allclose(b.grad, [0.8])

    def test_small_gradients_untouched(self):
        a = Tensor([1.0], requires_grad=True)
        a.grad = np.array([0.25])
        before = a.grad
        norm = clip_gradients({"a": a}, max_norm=1.0)
        assert norm == 0.25
        assert a.grad is before

    def test_missing_gradient_rejected(self):
        a = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            clip_gradients([a])


class TestAdamW:
    def test_first_step_matches_reference_formula(self):
        param = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        param.grad = np.array([2.0, -1.0])
        opt = AdamW({"p": param}, lr=0.1, weight_decay=0.0)
        opt.step()
        grad = np.array([2.0, -1.0])
        m_hat = grad  # bias correction cancels on the first step
        v_hat = grad * grad
        expected = np.array([1.0, -2.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert np.allclose(param.data, expected, atol=1e-15)

    def test_decoupled_decay_shrinks_after_update(self):
        param = Tensor(np.array([1.0]), requires_grad=True)
        param.grad = np.array([2.0])
        opt = AdamW({"p": param}, lr=0.1, weight_decay=0.5)
        opt.step()
        undecayed = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
        expected = undecayed - 0.1 * 0.5 * undecayed
        assert abs(param.data[0] - expected) < 1e-15

    def test_zero_rate_step_changes_nothing(self):
        param = Tensor(np.array([1.5]), requires_grad=True)
        param.grad = np.array([7.0])
        opt = AdamW({"p": param}, lr=0.1, weight_decay=0.5)
        opt.step(lr=0.0)
        assert param.data[0] == 1.5

    def test_three_step_reference_recurrence(self):
        # Independent replay of the update rule with plain numpy.
        rng = np.random.default_rng(8)
        start = rng.normal(size=4)
        grads = [rng.normal(size=4) for _ in range(3)]
        param = Tensor(start.copy(), requires_grad=True)
        opt = AdamW({"p": param}, lr=0.01, weight_decay=0.1)
        for g in grads:
            param.grad = g.copy()
            opt.step()
        expected = start.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1.0 - 0.9 ** t)
            v_hat = v / (1.0 - 0.999 ** t)
            expected = expected - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
            expected = expected - 0.01 * 0.1 * expected
        assert np.allclose(param.data, expected, atol=1e-15)

    def test_state_restore_continues_identically(self):
        rng = np.random.default_rng(4)
        grads = [rng.normal(size=3) for _ in range(6)]

        def run(split):
            param = Tensor(np.ones(3), requires_grad=True)
            opt = AdamW({"p": param}, lr=0.05, weight_decay=0.01)
            for g in grads[:split]:
                param.grad = g.copy()
                opt.step()
            if split < len(grads):
                state = opt.export_state()
                fresh = AdamW({"p": param}, lr=0.05, weight_decay=0.01)
                fresh.restore_state(state)
                assert fresh.step_count == split
                for g in grads[split:]:
                    param.grad = g.copy()
                    fresh.step()
            return param.data.copy()

        assert np.array_equal(run(6), run(3))

    def test_missing_gradient_rejected(self):
        param = Tensor(np.ones(2), requires_grad=True)
        opt = AdamW({"p": param})
        with pytest.raises(ContractError):
            opt.step()

    def test_rejects_empty_params(self):
        with pytest.raises(ContractError):
            AdamW({})


class TestBatchSampler:
    def test_batches_are_full_and_cover_the_data(self):
        sampler = _BatchSampler(10, 4, np.random.default_rng(0))
        seen = []
        for _ in range(5):
            batch = sampler.next_batch()
            assert batch.shape == (4,)
            seen.extend(batch.tolist())
        # 20 draws over 10 items = every item exactly twice
        counts = np.bincount(seen, minlength=10)
        assert np.array_equal(counts, np.full(10, 2))

    def test_small_dataset_shrinks_the_batch(self):
        sampler = _BatchSampler(3, 16, np.random.default_rng(0))
        assert sorted(sampler.next_batch().tolist()) == [0, 1, 2]

    def test_deterministic_given_seed(self):
        a = _BatchSampler(20, 6, np.random.default_rng(9))
        b = _BatchSampler(20, 6, np.random.default_rng(9))
        for _ in range(7):
            assert np.array_equal(a.next_batch(), b.next_batch())


def toy_windows(labeled=True, count_per_class=4):
    # Distinct oscillation speeds per class over 4 features.
    windows = []
    times = np.arange(8) / 8.0
    for label in (0, 1):
        for i in range(count_per_class):
            phase = 0.7 * i
            track = np.sin(2.0 * np.pi * (1.0 + label) * times + phase)
            frames = np.stack([track, track * 0.5, -track, track + 0.1], axis=1)
            windows.append(Window(frames[:6], frames[6:],
                                  label if labeled else None))
    return windows


def toy_model(seed=0, num_classes=2, dropout=0.0):
    cfg = ModelConfig(pose_dim=4, input_len=6, target_len=2, embed_dim=8,
                      num_layers=1, num_heads=2, num_classes=num_classes,
                      dropout=dropout, codec_dropout=0.0, ffn_dim=8)
    return MotionTransformer(cfg, seed=seed)


class TestEvaluate:
    def test_init_model_scores_the_zero_velocity_error(self):
        model = toy_model()
        windows = toy_windows()
        l1, accuracy = evaluate(model, windows)
        expected = np.mean([
            np.abs(np.repeat(w.input_frames[-1:], 2, axis=0) - w.target_frames).mean()
            for w in windows
        ])
        assert abs(l1 - expected) < 1e-15
        assert 0.0 <= accuracy <= 1.0

    def test_unlabeled_windows_give_no_accuracy(self):
        model = toy_model()
        l1, accuracy = evaluate(model, toy_windows(labeled=False))
        assert accuracy is None
        assert l1 > 0.0

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            evaluate(toy_model(), [])


class TestTrainConfig:
    def test_default_warmup_is_a_tenth(self):
        assert TrainConfig(total_steps=200).warmup_steps == 20

    def test_explicit_warmup_kept(self):
        assert TrainConfig(total_steps=200, warmup_steps=5).warmup_steps == 5

    def test_rejects_bad_values(self):
        with pytest.raises(ContractError):
            TrainConfig(total_steps=0)
        with pytest.raises(ContractError):
            TrainConfig(total_steps=10, batch_size=0)
        with pytest.raises(ContractError):
            TrainConfig(total_steps=10, activity_weight=-0.5)


class TestTrainingLog:
    def test_csv_layout_with_blanks(self, tmp_path):
        log = TrainingLog(rows=[
            LogRow(step=1, lr=0.001, loss_total=2.0, loss_motion=1.5,
                   loss_activity=0.5),
            LogRow(step=2, lr=0.002, loss_total=1.0, loss_motion=1.0,
                   loss_activity=None, eval_l1=0.25, eval_accuracy=0.75),
        ])
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ("step,lr,loss_total,loss_motion,loss_activity,"
                            "eval_l1,eval_accuracy")
        assert lines[1] == "1,0.001,2,1.5,0.5,,"
        assert lines[2] == "2,0.002,1,1,,0.25,0.75"


class TestTrainLoop:
    def test_logs_every_step_and_numbers_them(self):
        model = toy_model()
        config = TrainConfig(total_steps=4, batch_size=4, warmup_steps=2, seed=1)
        log = train_loop(model, toy_windows(), config)
        assert [r.step for r in log.rows] == [1, 2, 3, 4]
        assert all(np.isfinite(r.loss_total) for r in log.rows)
        assert log.rows[0].loss_activity is not None

    def test_two_runs_are_bitwise_identical(self):
        results = []
        for _ in range(2):
            model = toy_model(seed=6)
            config = TrainConfig(total_steps=5, batch_size=3, warmup_steps=2,
                                 seed=11)
            log = train_loop(model, toy_windows(), config)
            results.append((
                [r.loss_total for r in log.rows],
                {k: v.data.copy() for k, v in model.named_parameters().items()},
            ))
        assert results[0][0] == results[1][0]
        for name, value in results[0][1].items():
            assert np.array_equal(value, results[1][1][name]), name

    def test_dropout_training_still_deterministic(self):
        loss_curves = []
        for _ in range(2):
            model = toy_model(seed=6, dropout=0.2)
            config = TrainConfig(total_steps=4, batch_size=3, seed=11,
                                 warmup_steps=1)
            log = train_loop(model, toy_windows(), config)
            loss_curves.append([r.loss_total for r in log.rows])
        assert loss_curves[0] == loss_curves[1]

    def test_zero_activity_weight_leaves_head_at_init(self):
        model = toy_model(seed=2)
        head_before = {k: v.data.copy()
                       for k, v in model.activity_head.named_params().items()}
        token_before = model.class_token.data.copy()
        config = TrainConfig(total_steps=6, batch_size=4, warmup_steps=2,
                             activity_weight=0.0, seed=3)
        log = train_loop(model, toy_windows(), config)
        for name, value in model.activity_head.named_params().items():
            assert np.array_equal(value.data, head_before[name])
        # the token feeds the encoder, so motion training does move it
        assert not np.array_equal(model.class_token.data, token_before)
        assert all(r.loss_activity is None for r in log.rows)

    def test_unlabeled_windows_skip_the_activity_term(self):
        model = toy_model(seed=2)
        config = TrainConfig(total_steps=3, batch_size=4, warmup_steps=1, seed=3)
        log = train_loop(model, toy_windows(labeled=False), config)
        assert all(r.loss_activity is None for r in log.rows)

    def test_loss_decreases_on_a_learnable_problem(self):
        model = toy_model(seed=1)
        config = TrainConfig(total_steps=60, batch_size=8, learning_rate=3e-3,
                             warmup_steps=6, seed=0)
        log = train_loop(model, toy_windows(), config)
        first = np.mean([r.loss_motion for r in log.rows[:5]])
        last = np.mean([r.loss_motion for r in log.rows[-5:]])
        assert last < 0.7 * first

    def test_eval_interval_and_checkpoint(self, tmp_path):
        model = toy_model(seed=4)
        path = tmp_path / "train.ckpt"
        config = TrainConfig(total_steps=6, batch_size=4, warmup_steps=2,
                             eval_interval=3, seed=5)
        windows = toy_windows()
        log = train_loop(model, windows, config, eval_windows=windows[:4],
                         checkpoint_path=path)
        evaluated = [r.step for r in log.rows if r.eval_l1 is not None]
        assert evaluated == [3, 6]
        bundle = load_checkpoint(path)
        assert bundle.step == 6
        assert bundle.optimizer_state is not None
        resumed = bundle.model.predict(windows[0].input_frames)
        direct = model.predict(windows[0].input_frames)
        assert np.array_equal(resumed.frames, direct.frames)

    def test_resume_continues_step_numbering(self, tmp_path):
        model = toy_model(seed=4)
        config = TrainConfig(total_steps=3, batch_size=4, warmup_steps=0, seed=5)
        log = train_loop(model, toy_windows(), config, start_step=10)
        assert [r.step for r in log.rows] == [11, 12, 13]

    def test_empty_windows_rejected(self):
        with pytest.raises(ContractError):
            train_loop(toy_model(), [], TrainConfig(total_steps=1))
