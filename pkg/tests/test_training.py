"""Objective, optimizer schedule, cross-validation and error reporting."""

import numpy as np
import pytest

from resrnn import autodiff as ad
from resrnn.autodiff import ShapeError, Tensor
from resrnn.model import REGION_NAMES, ResRNNConfig, init_params
from resrnn.phantom import CineSequence, PhantomSpec, generate_dataset, generate_subject
from resrnn.training import (MetricsReport, SGDState, TrainConfig,
                             TrainingDiverged, ablation_table, evaluate,
                             five_fold, learning_rate, loss, model_gradcheck,
                             run_cv, sgd_step, toy_config, train)


class TestLoss:
    def test_pred_equals_target_is_zero(self):
        x = np.random.default_rng(0).random((2, 4, 6))
        assert loss(Tensor(x), Tensor(x)).item() == 0.0

    def test_hand_arithmetic_single_entry(self):
        pred = np.zeros((1, 6))
        pred[0, 0] = 0.1
        target = np.zeros((1, 6))
        # one subject, one frame: 0.1^2 / (2*1*1) = 0.005
        assert abs(loss(Tensor(pred), Tensor(target)).item() - 0.005) < 1e-15

    def test_random_batch_vs_scalar_loop(self):
        rng = np.random.default_rng(1)
        s, f, l = 3, 4, 6
        pred = rng.normal(size=(s, f, l))
        target = rng.normal(size=(s, f, l))
        cfg = toy_config()
        params = init_params(cfg, seed=0)
        lam = 0.01

        got = loss(Tensor(pred), Tensor(target), params, weight_decay=lam).item()

        total = 0.0
        for i in range(s):
            for j in range(f):
                for k in range(l):
                    total += (pred[i, j, k] - target[i, j, k]) ** 2
        total /= 2.0 * s * f
        for _, t, is_bias in params.named_tensors():
            if not is_bias:
                total += lam / 2.0 * float((t.data ** 2).sum())
        assert abs(got - total) < 1e-12

    def test_bias_excluded_from_penalty(self):
        cfg = toy_config()
        params = init_params(cfg, seed=1)
        x = np.zeros((1, 2, 2))
        base = loss(Tensor(x), Tensor(x), params, weight_decay=0.1).item()
        params.fc2.bias.data += 100.0
        assert loss(Tensor(x), Tensor(x), params, weight_decay=0.1).item() == base

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            loss(Tensor(np.zeros((2, 6))), Tensor(np.zeros((3, 6))))


class TestSchedule:
    def test_paper_lr_milestones(self):
        cfg = TrainConfig()
        assert learning_rate(cfg, 0) == 0.05
        assert learning_rate(cfg, 2500) == 0.025
        assert learning_rate(cfg, 5000) == 0.0125

    def test_piecewise_constant_halving(self):
        cfg = TrainConfig()
        for it in range(0, 7500, 123):
            assert learning_rate(cfg, it) == 0.05 * 0.5 ** (it // 2500)
        assert learning_rate(cfg, 2499) == 0.05
        assert learning_rate(cfg, 2500) == 0.025

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_gamma=1.5)
        with pytest.raises(ValueError):
            TrainConfig(base_lr=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(max_iters=0)


class TestSGDStep:
    def _zero_grads(self, params):
        for _, t, _ in params.named_tensors():
            t.grad = np.zeros_like(t.data)

    def test_plain_gradient_descent_exact(self):
        cfg_m = toy_config()
        params = init_params(cfg_m, seed=2)
        self._zero_grads(params)
        g = np.random.default_rng(2).normal(size=params.fc2.weight.shape)
        params.fc2.weight.grad = g.copy()
        before = params.fc2.weight.data.copy()
        cfg = TrainConfig(momentum=0.0, weight_decay=0.0, base_lr=0.05)
        sgd_step(params, SGDState(), cfg, iteration=0)
        assert np.array_equal(params.fc2.weight.data, before - 0.05 * g)

    def test_two_momentum_steps_scalar_quadratic(self):
        # L = q/2 * theta^2, dL = q*theta; hand-computed heavy-ball iterates
        q, lr, mu = 2.0, 0.05, 0.9
        cfg_m = toy_config()
        params = init_params(cfg_m, seed=3)
        theta = 1.5
        params.fc2.weight.data[0, 0] = theta
        state = SGDState()
        cfg = TrainConfig(momentum=mu, weight_decay=0.0, base_lr=lr)

        v = 0.0
        expected = theta
        for it in range(2):
            self._zero_grads(params)
            params.fc2.weight.grad[0, 0] = q * params.fc2.weight.data[0, 0]
            sgd_step(params, state, cfg, iteration=it)
            v = mu * v - lr * q * expected
            expected = expected + v
            assert abs(params.fc2.weight.data[0, 0] - expected) < 1e-15

    def test_nan_gradient_aborts_naming_parameter(self):
        params = init_params(toy_config(), seed=4)
        self._zero_grads(params)
        params.fc1.weight.grad[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="fc1"):
            sgd_step(params, SGDState(), TrainConfig(), iteration=0)

    def test_weight_decay_skips_biases(self):
        params = init_params(toy_config(), seed=5)
        self._zero_grads(params)
        lam, lr = 0.001, 0.05
        cfg = TrainConfig(momentum=0.0, weight_decay=lam, base_lr=lr)
        w_before = params.fc1.weight.data.copy()
        b_before = params.fc1.bias.data.copy()
        sgd_step(params, SGDState(), cfg, iteration=0)
        assert np.allclose(params.fc1.weight.data,
                           w_before * (1 - lr * lam), atol=1e-15)
        assert np.array_equal(params.fc1.bias.data, b_before)

    def test_descends_convex_quadratic(self):
        params = init_params(toy_config(), seed=6)
        self._zero_grads(params)
        theta0 = params.fc2.weight.data.copy()
        params.fc2.weight.grad = 2.0 * theta0  # L = |theta|^2, curvature 2
        cfg = TrainConfig(momentum=0.0, weight_decay=0.0, base_lr=0.1)
        sgd_step(params, SGDState(), cfg, iteration=0)
        assert (params.fc2.weight.data ** 2).sum() < (theta0 ** 2).sum()

    def test_grad_clip_bounds_update(self):
        params = init_params(toy_config(), seed=7)
        self._zero_grads(params)
        params.fc2.weight.grad += 1000.0
        before = params.fc2.weight.data.copy()
        cfg = TrainConfig(momentum=0.0, weight_decay=0.0, base_lr=1.0, grad_clip=1.0)
        sgd_step(params, SGDState(), cfg, iteration=0)
        moved = np.linalg.norm(params.fc2.weight.data - before)
        assert moved <= 1.0 + 1e-12


def _static_subject(seed=0):
    spec = PhantomSpec(thickening_amp=(0.0,) * 6, contraction=0.0,
                       noise_sigma=0.0, seed=seed)
    return generate_subject(spec, subject_id=seed)


class TestTrain:
    def test_overfits_one_static_phantom(self):
        seq = _static_subject()
        cfg = ResRNNConfig(variant="cnn")
        tcfg = TrainConfig(max_iters=500, seed=0, log_every=100)
        params, curve = train([seq], cfg, tcfg)
        report = evaluate(params, cfg, [seq])
        assert report.overall_mae() < 0.005  # < 0.4 px on the 80-px image

    def test_loss_curve_finite_and_deterministic(self):
        data = generate_dataset(4, seed=9)
        cfg = ResRNNConfig(variant="cnn")
        tcfg = TrainConfig(max_iters=12, seed=3, log_every=4)
        _, c1 = train(data, cfg, tcfg)
        _, c2 = train(data, cfg, tcfg)
        assert c1 == c2
        assert all(np.isfinite(v) for _, v in c1)

    def test_divergence_aborts(self):
        data = generate_dataset(2, seed=10)
        cfg = ResRNNConfig(variant="cnn")
        tcfg = TrainConfig(max_iters=50, seed=0, base_lr=1e5, log_every=10)
        with pytest.raises(TrainingDiverged):
            train(data, cfg, tcfg)

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            train([], ResRNNConfig(), TrainConfig())


class TestEvaluate:
    def test_zero_labels_zero_params_zero_report(self):
        seq = _static_subject()
        zero = CineSequence(subject_id=0, frames=seq.frames,
                            labels=np.zeros_like(seq.labels), spec=seq.spec)
        cfg = ResRNNConfig(variant="cnn")
        params = init_params(cfg, seed=0)
        for _, t, _ in params.named_tensors():
            t.data = np.zeros_like(t.data)
        report = evaluate(params, cfg, [zero])
        assert report.overall_mae() == 0.0
        assert np.array_equal(report.errors, np.zeros_like(report.errors))

    def test_zero_initialized_cnn_reports_mean_label(self):
        # zero parameters predict exactly 0, so MAE equals mean |label|
        data = generate_dataset(3, seed=11)
        cfg = ResRNNConfig(variant="cnn")
        params = init_params(cfg, seed=0)
        for _, t, _ in params.named_tensors():
            t.data = np.zeros_like(t.data)
        report = evaluate(params, cfg, data)
        expected = np.mean([np.abs(s.labels).mean() for s in data])
        assert abs(report.overall_mae() - expected) < 1e-12

    def test_constant_error_one_pixel(self):
        errors = np.full((1, 20, 6), 0.0125)
        report = MetricsReport(subject_ids=[0], errors=errors)
        for name, mean, std in report.region_rows():
            assert abs(mean * 80 - 1.0) < 1e-12
            assert std == 0.0

    def test_totals_vs_flat_loop(self):
        rng = np.random.default_rng(12)
        errors = rng.random((5, 4, 6))
        report = MetricsReport(subject_ids=list(range(5)), errors=errors)
        rows = report.region_rows()
        for l in range(6):
            per_subject = [errors[n, :, l].mean() for n in range(5)]
            assert abs(rows[l][1] - np.mean(per_subject)) < 1e-12
            assert abs(rows[l][2] - np.std(per_subject)) < 1e-12
        per_subject_all = [errors[n].mean() for n in range(5)]
        assert rows[-1][0] == "Average"
        assert abs(rows[-1][1] - np.mean(per_subject_all)) < 1e-12
        assert abs(report.overall_mae() - errors.mean()) < 1e-12
        assert np.allclose(report.frame_curve(), errors.mean(axis=(0, 2)))

    def test_aggregation_permutation_invariant(self):
        rng = np.random.default_rng(13)
        errors = rng.random((6, 3, 6))
        a = MetricsReport(subject_ids=list(range(6)), errors=errors)
        perm = rng.permutation(6)
        b = MetricsReport(subject_ids=[int(i) for i in perm], errors=errors[perm])
        for (n1, m1, s1), (n2, m2, s2) in zip(a.region_rows(), b.region_rows()):
            assert n1 == n2 and abs(m1 - m2) < 1e-12 and abs(s1 - s2) < 1e-12

    def test_missing_labels_rejected(self):
        seq = _static_subject()
        broken = CineSequence(subject_id=0, frames=seq.frames, labels=None,
                              spec=seq.spec)
        with pytest.raises(ValueError):
            evaluate(init_params(ResRNNConfig(), 0), ResRNNConfig(), [broken])

    def test_table_text_layout(self):
        errors = np.random.default_rng(14).random((2, 20, 6))
        report = MetricsReport(subject_ids=[0, 1], errors=errors, spacing_mm=1.5625)
        lines = report.table_text().strip().split("\n")
        assert len(lines) == 8  # header + 6 regions + Average
        assert lines[1].split("\t")[0] == REGION_NAMES[0]
        assert lines[-1].split("\t")[0] == "Average"


class _FakeSeq:
    def __init__(self, i):
        self.subject_id = i


class TestFolds:
    def test_ten_subjects_fold_sizes(self):
        folds = five_fold([_FakeSeq(i) for i in range(10)], seed=0)
        assert [len(f) for f in folds] == [2] * 5
        seen = sorted(i for f in folds for i in f)
        assert seen == list(range(10))

    def test_145_subjects_fold_sizes(self):
        folds = five_fold([_FakeSeq(i) for i in range(145)], seed=1)
        assert [len(f) for f in folds] == [29] * 5

    def test_partition_property(self):
        folds = five_fold([_FakeSeq(i) for i in range(23)], seed=2)
        flat = [i for f in folds for i in f]
        assert len(flat) == len(set(flat)) == 23

    def test_deterministic_given_seed(self):
        a = five_fold([_FakeSeq(i) for i in range(12)], seed=3)
        b = five_fold([_FakeSeq(i) for i in range(12)], seed=3)
        assert a == b

    def test_too_few_subjects_rejected(self):
        with pytest.raises(ValueError):
            five_fold([_FakeSeq(0)], seed=0)

    def test_run_cv_covers_every_subject(self):
        data = generate_dataset(6, seed=15)
        cfg = ResRNNConfig(variant="cnn")
        tcfg = TrainConfig(max_iters=2, seed=0, log_every=1)
        report = run_cv(data, cfg, tcfg)
        assert sorted(report.subject_ids) == [s.subject_id for s in data]


class TestAblationTable:
    def test_layout(self):
        rng = np.random.default_rng(16)
        reports = {v: MetricsReport(subject_ids=[0, 1],
                                    errors=rng.random((2, 20, 6)))
                   for v in ("cnn", "rnn_plain", "rnn_circle",
                             "resrnn_plain", "resrnn_circle")}
        text = ablation_table(reports)
        lines = text.strip().split("\n")
        assert len(lines) == 8  # header + 6 regions + Average
        assert len(lines[0].split("\t")) == 6  # region column + 5 variants
        assert lines[-1].startswith("Average")


def test_model_gradcheck_toy_config():
    results = model_gradcheck(toy_config(), seed=0)
    assert results, "no parameters checked"
    assert max(results.values()) < 1e-4
