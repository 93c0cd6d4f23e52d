import numpy as np
import pytest

from gravac.compressors import CompressorKind
from gravac.controller import ControllerConfig
from gravac.costmodel import CostModelParams
from gravac.gradcore import GradientVector
from gravac.simworkers import (DivergenceError, IterationRecord, OptimizerState,
                               RunTrace, run_training, sgd_update)
from gravac.tasks import build_task

TOPK = CompressorKind("topk")


def quadratic_setup(size=64, noise_std=0.0, lr=0.05, momentum=0.0, workers=4,
                    batch_size=1, **task_kwargs):
    task = build_task("quadratic", size=size, noise_std=noise_std,
                      batch_size=batch_size, **task_kwargs)
    cost = CostModelParams(workers=workers)
    opt = OptimizerState(weights=np.zeros(size), lr=lr, momentum=momentum)
    return task, opt, cost


class TestSgdUpdate:
    def test_plain_step_without_momentum(self):
        opt = OptimizerState(weights=np.array([1.0, 2.0]), lr=0.1)
        sgd_update(opt, GradientVector([10.0, -10.0]))
        np.testing.assert_allclose(opt.weights, [0.0, 3.0])

    def test_two_momentum_steps_hand_unrolled(self):
        opt = OptimizerState(weights=np.array([1.0]), lr=0.1, momentum=0.9)
        sgd_update(opt, GradientVector([2.0]))
        sgd_update(opt, GradientVector([1.0]))
        # buffers: b1 = 2; b2 = 0.9*2 + 1 = 2.8
        # weights: 1 - 0.1*2 = 0.8; 0.8 - 0.1*2.8 = 0.52
        np.testing.assert_allclose(opt.weights, [0.52], rtol=1e-12)

    def test_pure_decay_step(self):
        opt = OptimizerState(weights=np.array([2.0, -4.0]), lr=0.1, weight_decay=0.5)
        sgd_update(opt, GradientVector([0.0, 0.0]))
        np.testing.assert_allclose(opt.weights, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))

    def test_length_mismatch_rejected(self):
        opt = OptimizerState(weights=np.zeros(3), lr=0.1)
        with pytest.raises(ValueError):
            sgd_update(opt, GradientVector([1.0]))

    def test_hyperparameter_validation(self):
        with pytest.raises(ValueError):
            OptimizerState(weights=np.zeros(2), lr=0.0)
        with pytest.raises(ValueError):
            OptimizerState(weights=np.zeros(2), lr=0.1, momentum=1.0)


class TestDenseTraining:
    def test_quadratic_loss_decays_at_closed_form_rate(self):
        """Noise-free diagonal quadratic under plain SGD contracts each
        coordinate by (1 - lr*curvature) per step, so the loss after T steps
        is exactly sum of 0.5*c*d0^2*(1-lr*c)^(2T)."""
        curvature = np.linspace(0.2, 1.5, 32)
        task, opt, cost = quadratic_setup(size=32, lr=0.1, workers=2,
                                          curvature=curvature)
        iters = 40
        result = run_training(task, opt, cost, "dense", iters, seed=0)
        d0 = task.init_offset
        expected = 0.5 * np.sum(curvature * d0**2 * (1 - 0.1 * curvature) ** (2 * iters))
        final = task.loss(result.weights)
        np.testing.assert_allclose(final, expected, rtol=1e-5)

    def test_equal_shards_match_single_worker(self):
        # zero gradient noise: every worker computes the same gradient, so
        # N-worker aggregation equals the 1-worker run exactly
        results = []
        for workers in (1, 4):
            task, opt, cost = quadratic_setup(size=16, workers=workers, lr=0.05)
            results.append(run_training(task, opt, cost, "dense", 25, seed=1))
        assert np.array_equal(results[0].weights, results[1].weights)

    def test_divergence_guard_aborts(self):
        task, opt, cost = quadratic_setup(size=8, lr=5.0)  # lr*c = 5 >> 2
        with pytest.raises(DivergenceError):
            run_training(task, opt, cost, "dense", 200, seed=0)

    def test_lr_decay_schedule_applied(self):
        task, opt, cost = quadratic_setup(size=8, lr=0.4)
        opt.lr_decay_iters = (5,)
        opt.lr_decay_factor = 10.0
        run_training(task, opt, cost, "dense", 10, seed=0)
        assert opt.lr == pytest.approx(0.04)


class TestStaticCfTraining:
    def test_cf_one_is_weight_equivalent_to_dense(self):
        runs = []
        for mode, cf in (("dense", None), ("static-cf", 1.0)):
            task, opt, cost = quadratic_setup(size=32, noise_std=0.2, workers=3,
                                              batch_size=2, lr=0.05)
            runs.append(run_training(task, opt, cost, mode, 50, seed=7,
                                     compressor=TOPK, static_cf=cf))
        dense, full_support = runs
        assert np.array_equal(dense.weights, full_support.weights)
        assert np.array_equal(dense.trace.column("loss"), full_support.trace.column("loss"))

    def test_static_volume_counters(self):
        task, opt, cost = quadratic_setup(size=100, workers=2)
        result = run_training(task, opt, cost, "static-cf", 10, seed=0,
                              compressor=TOPK, static_cf=10.0)
        assert result.trace.total("floats_sent") == 10 * 10
        assert result.trace.total("words_sent") == 10 * 20

    def test_requires_cf_and_compressor(self):
        task, opt, cost = quadratic_setup()
        with pytest.raises(ValueError):
            run_training(task, opt, cost, "static-cf", 5, seed=0, compressor=TOPK)
        with pytest.raises(ValueError):
            run_training(task, opt, cost, "static-cf", 5, seed=0, static_cf=4.0)


class TestGravacTraining:
    def test_trace_schema_complete(self):
        task, opt, cost = quadratic_setup(size=64, noise_std=0.1, batch_size=2)
        cc = ControllerConfig(theta_min=2.0, theta_max=16.0, epsilon=0.5,
                              window=5, compressor=TOPK)
        result = run_training(task, opt, cost, "gravac", 15, seed=3,
                              controller_config=cc)
        assert len(result.trace) == 15
        row = result.trace.records[0].to_dict()
        for field in ("iter", "cf", "gain_min", "gain_c", "t_o", "t_compress",
                      "t_s", "t_iter", "tsys", "tcomp", "loss",
                      "floats_sent", "words_sent"):
            assert field in row

    def test_identical_seeds_identical_traces(self):
        traces = []
        for _ in range(2):
            task, opt, cost = quadratic_setup(size=64, noise_std=0.3, batch_size=2)
            cc = ControllerConfig(theta_min=2.0, theta_max=64.0, epsilon=0.6,
                                  window=4, compressor=CompressorKind("randomk"))
            result = run_training(task, opt, cost, "gravac", 30, seed=11,
                                  controller_config=cc)
            traces.append(result.trace.to_jsonl())
        assert traces[0] == traces[1]

    def test_different_seeds_differ(self):
        outs = []
        for seed in (1, 2):
            task, opt, cost = quadratic_setup(size=64, noise_std=0.3, batch_size=2)
            cc = ControllerConfig(theta_min=2.0, theta_max=64.0, epsilon=0.6,
                                  window=4, compressor=CompressorKind("randomk"))
            outs.append(run_training(task, opt, cost, "gravac", 30, seed=seed,
                                     controller_config=cc).trace.to_jsonl())
        assert outs[0] != outs[1]

    def test_requires_controller_config(self):
        task, opt, cost = quadratic_setup()
        with pytest.raises(ValueError):
            run_training(task, opt, cost, "gravac", 5, seed=0)

    def test_unreachable_epsilon_matches_dense_baseline(self):
        # every iteration falls back to the dense send, so weights and losses
        # follow the uncompressed run exactly
        runs = []
        for mode in ("dense", "gravac"):
            task, opt, cost = quadratic_setup(size=32, noise_std=0.2, workers=3,
                                              batch_size=2)
            cc = ControllerConfig(theta_min=4.0, theta_max=32.0,
                                  epsilon=1.0 - 1e-9, window=5, compressor=TOPK)
            runs.append(run_training(task, opt, cost, mode, 40, seed=9,
                                     controller_config=cc))
        dense, adaptive = runs
        assert all(r.choice == "dense" for r in adaptive.trace)
        assert np.array_equal(dense.weights, adaptive.weights)
        assert np.array_equal(dense.trace.column("loss"), adaptive.trace.column("loss"))


class TestRunTraceIo:
    def test_jsonl_roundtrip(self, tmp_path):
        task, opt, cost = quadratic_setup(size=16)
        result = run_training(task, opt, cost, "dense", 5, seed=0)
        path = tmp_path / "trace.jsonl"
        path.write_text(result.trace.to_jsonl())
        loaded = RunTrace.from_jsonl(path)
        assert len(loaded) == 5
        assert loaded.records[0] == result.trace.records[0]

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"iter": 1, "cf": 1.0}\n')
        with pytest.raises(ValueError, match="missing fields"):
            RunTrace.from_jsonl(path)

    def test_column_and_total(self):
        trace = RunTrace()
        for i in (1, 2):
            trace.append(IterationRecord(iter=i, cf=1.0, gain_min=1.0, gain_c=1.0,
                                         t_o=0.1, t_compress=0.0, t_s=0.2,
                                         t_iter=0.3, tsys=10.0, tcomp=10.0,
                                         loss=5.0, floats_sent=4, words_sent=4,
                                         choice="dense", theta_min=1.0))
        assert trace.column("iter").tolist() == [1, 2]
        assert trace.total("floats_sent") == 8
