"""Optimizer, initialization, training loop, metrics and baselines."""
import math

import numpy as np
import pytest

from stgnp.data import corrupt_missing, generate_synthetic, standardize
from stgnp.graph import GraphConfig, build_sensor_graph
from stgnp.model import StgnpConfig, StgnpModel, save_checkpoint
from stgnp.training import (TrainConfig, adam_step, baseline_idw, baseline_knn,
                            clip_gradients, compute_metrics, evaluate,
                            evaluate_baseline, init_adam, train,
                            write_train_log, xavier_init)


def small_config(**kw):
    base = dict(d_y=1, d_x=2, L=2, kernel_size=3, det_channels=(4, 6),
                latent_channels=(3, 4), d0=4, likelihood_hidden=8, K=2, T=24)
    base.update(kw)
    return StgnpConfig(**base)


class TestXavierInit:
    def test_variance_of_square_weight(self):
        cfg = StgnpConfig(d_y=1, d_x=2, L=1, det_channels=(8,),
                          latent_channels=(98,), d0=8, likelihood_hidden=100,
                          K=1, T=24)
        model = xavier_init(StgnpModel(cfg), seed=0)
        w = model["lik.h2.weight"].data  # 100 x 100: fan_in = fan_out = 100
        assert w.size == 10**4
        assert np.var(w) == pytest.approx(0.01, rel=0.10)

    def test_deterministic(self):
        a = xavier_init(StgnpModel(small_config()), seed=3)
        b = xavier_init(StgnpModel(small_config()), seed=3)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_unit_fans_give_unit_variance(self):
        # d_y = d0 = 1 makes the embedding a 1x1 weight with fan_in=fan_out=1
        cfg = StgnpConfig(d_y=1, d_x=0, L=1, det_channels=(1,),
                          latent_channels=(1,), d0=1, likelihood_hidden=2,
                          K=1, T=24)
        samples = [xavier_init(StgnpModel(cfg), seed=s)["embed.weight"].data[0, 0]
                   for s in range(400)]
        assert np.var(samples) == pytest.approx(1.0, rel=0.25)

    def test_kernel_fans_use_tap_count(self):
        cfg = small_config()
        model = xavier_init(StgnpModel(cfg), seed=1)
        k = model["layer0.conv.kernel"].data  # (3, 4, 4): fans 12/12
        draws = [xavier_init(StgnpModel(cfg), seed=s)["layer0.conv.kernel"].data
                 for s in range(150)]
        var = np.var(np.stack(draws))
        assert var == pytest.approx(2.0 / 24.0, rel=0.1)
        assert k.shape == (3, 4, 4)


class TestAdam:
    def test_first_step_closed_form(self):
        p = np.zeros(1)
        state = init_adam([p])
        adam_step([p], [np.ones(1)], state, lr=1e-3)
        assert p[0] == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)
        assert p[0] == pytest.approx(-0.001, abs=1e-6)

    def test_zero_gradient_keeps_params(self):
        p = np.array([1.0, -2.0])
        state = init_adam([p])
        adam_step([p], [np.zeros(2)], state, lr=1e-3)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_first_step_sign_opposes_gradient(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=7)
        g[np.abs(g) < 1e-3] = 1.0
        p = np.zeros(7)
        adam_step([p], [g], init_adam([p]), lr=1e-3)
        assert np.all(np.sign(p) == -np.sign(g))

    def test_state_advances(self):
        p = np.zeros(2)
        state = init_adam([p])
        for _ in range(3):
            adam_step([p], [np.ones(2)], state, lr=1e-2)
        assert state["t"] == 3
        assert p[0] < -1e-2  # keeps moving in the gradient direction


class TestClip:
    def test_large_norm_scaled(self):
        g = [np.full(4, 3.0)]  # norm 6
        norm = clip_gradients(g, 5.0)
        assert norm == pytest.approx(6.0)
        assert math.sqrt(np.sum(g[0] ** 2)) == pytest.approx(5.0)

    def test_small_norm_untouched(self):
        g = [np.array([0.3, 0.4])]
        clip_gradients(g, 5.0)
        np.testing.assert_allclose(g[0], [0.3, 0.4])

    def test_nonfinite_rejected(self):
        from stgnp.training import TrainingDiverged
        with pytest.raises(TrainingDiverged):
            clip_gradients([np.array([np.nan])], 5.0)


class TestComputeMetrics:
    def test_perfect_prediction(self):
        y = np.random.default_rng(0).normal(size=(2, 5, 1))
        rep = compute_metrics(y, y.copy(), np.full_like(y, 0.5), np.ones_like(y))
        assert rep.mae == 0.0 and rep.rmse == 0.0 and rep.mape == 0.0
        assert rep.coverage_1s == rep.coverage_2s == rep.coverage_3s == 1.0

    def test_hand_values(self):
        y = np.zeros((1, 2, 1))
        pred = np.array([3.0, 4.0]).reshape(1, 2, 1)
        rep = compute_metrics(y, pred, None, np.ones_like(y))
        assert rep.mae == pytest.approx(3.5)
        assert rep.rmse == pytest.approx(math.sqrt(12.5))
        assert rep.rmse == pytest.approx(3.5355, abs=1e-4)

    def test_mape_floor_excludes_near_zero(self):
        y = np.array([0.0, 2.0]).reshape(1, 2, 1)
        pred = np.array([1.0, 1.0]).reshape(1, 2, 1)
        rep = compute_metrics(y, pred, None, np.ones_like(y))
        assert rep.mape == pytest.approx(0.5)  # only the y=2 entry counts

    def test_coverage_monotone(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=(3, 50, 1))
        pred = y + rng.normal(size=y.shape)
        sigma = np.abs(rng.normal(size=y.shape)) + 0.2
        rep = compute_metrics(y, pred, sigma, np.ones_like(y))
        assert rep.coverage_1s <= rep.coverage_2s <= rep.coverage_3s <= 1.0

    def test_calibrated_gaussian_coverage(self):
        rng = np.random.default_rng(2)
        n = 100_000
        sigma = rng.uniform(0.5, 2.0, size=(1, n, 1))
        mu = rng.normal(size=(1, n, 1))
        y = mu + sigma * rng.standard_normal((1, n, 1))
        rep = compute_metrics(y, mu, sigma, np.ones_like(y))
        assert rep.coverage_1s == pytest.approx(0.683, abs=0.01)
        assert rep.coverage_2s == pytest.approx(0.955, abs=0.01)
        assert rep.coverage_3s == pytest.approx(0.997, abs=0.01)

    def test_masked_entries_ignored(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=(2, 10, 1))
        pred = rng.normal(size=(2, 10, 1))
        mask = (rng.uniform(size=y.shape) < 0.6).astype(float)
        rep1 = compute_metrics(y, pred, None, mask)
        y2 = y.copy()
        y2[mask == 0.0] = 1e9
        rep2 = compute_metrics(y2, pred, None, mask)
        assert rep1.mae == rep2.mae and rep1.rmse == rep2.rmse

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), None,
                            np.zeros((1, 1, 1)))

    def test_per_target_breakdown(self):
        y = np.zeros((2, 3, 1))
        pred = np.ones((2, 3, 1))
        rep = compute_metrics(y, pred, None, np.ones_like(y), node_labels=["a", "b"])
        assert rep.per_target["a"]["mae"] == pytest.approx(1.0)
        assert rep.per_target["b"]["n_points"] == 3


class TestBaselines:
    def test_idw_symmetric_contexts(self):
        y = np.array([[[0.0]], [[10.0]]])  # (N=2, T=1, d=1)
        mask = np.ones_like(y)
        dists = np.array([[2.0, 2.0]])
        pred, valid = baseline_idw(y, mask, dists)
        assert pred[0, 0, 0] == pytest.approx(5.0)
        assert valid[0, 0, 0] == 1.0

    def test_idw_weight_arithmetic(self):
        y = np.array([[[0.0]], [[10.0]]])
        mask = np.ones_like(y)
        pred, _ = baseline_idw(y, mask, np.array([[1.0, 3.0]]), power=2.0)
        assert pred[0, 0, 0] == pytest.approx(1.0)  # (10/9) / (1 + 1/9)

    def test_idw_single_context(self):
        y = np.array([[[7.0]]])
        pred, valid = baseline_idw(y, np.ones_like(y), np.array([[4.0]]))
        assert pred[0, 0, 0] == pytest.approx(7.0)
        assert valid[0, 0, 0] == 1.0

    def test_idw_colocated_short_circuit(self):
        y = np.array([[[3.0]], [[100.0]]])
        pred, _ = baseline_idw(y, np.ones_like(y), np.array([[0.0, 1.0]]))
        assert pred[0, 0, 0] == pytest.approx(3.0)

    def test_idw_all_missing_invalid(self):
        y = np.array([[[1.0]], [[2.0]]])
        mask = np.zeros_like(y)
        _, valid = baseline_idw(y, mask, np.array([[1.0, 2.0]]))
        assert valid[0, 0, 0] == 0.0

    def test_knn_all_contexts_is_mean(self):
        y = np.array([[[1.0]], [[3.0]], [[8.0]]])
        pred, _ = baseline_knn(y, np.ones_like(y), np.array([[1.0, 2.0, 3.0]]), k=3)
        assert pred[0, 0, 0] == pytest.approx(4.0)

    def test_knn_nearest_only(self):
        y = np.array([[[1.0]], [[3.0]]])
        pred, _ = baseline_knn(y, np.ones_like(y), np.array([[5.0, 2.0]]), k=1)
        assert pred[0, 0, 0] == pytest.approx(3.0)

    def test_knn_two_of_three(self):
        y = np.array([[[1.0]], [[3.0]], [[100.0]]])
        pred, _ = baseline_knn(y, np.ones_like(y), np.array([[1.0, 2.0, 9.0]]), k=2)
        assert pred[0, 0, 0] == pytest.approx(2.0)

    def test_knn_skips_missing(self):
        y = np.array([[[1.0]], [[3.0]], [[100.0]]])
        mask = np.ones_like(y)
        mask[0] = 0.0
        pred, _ = baseline_knn(y, mask, np.array([[1.0, 2.0, 9.0]]), k=2)
        assert pred[0, 0, 0] == pytest.approx((3.0 + 100.0) / 2.0)

    def test_knn_k_validation(self):
        y = np.zeros((2, 1, 1))
        with pytest.raises(ValueError):
            baseline_knn(y, np.ones_like(y), np.array([[1.0, 2.0]]), k=0)
        with pytest.raises(ValueError):
            baseline_knn(y, np.ones_like(y), np.array([[1.0, 2.0]]), k=3)


def quick_train(seed=0, epochs=2, steps=300, nodes=8, missing=0.0):
    ds = generate_synthetic(nodes, steps, seed=1)
    if missing > 0:
        ds = corrupt_missing(ds, missing, seed=2)
    cfg = small_config()
    tc = TrainConfig(lr=3e-3, epochs=epochs, batch_windows=8, target_count=2,
                     seed=seed)
    return train(ds, GraphConfig(), cfg, tc, target_fraction=0.3)


class TestTrainLoop:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(target_count=0)
        # target_count must leave at least one context in the training pool
        ds = generate_synthetic(5, 300, seed=1)
        with pytest.raises(ValueError):
            train(ds, GraphConfig(), small_config(),
                  TrainConfig(epochs=1, target_count=4), target_fraction=0.3)

    def test_single_epoch_finite_and_logged(self):
        result = quick_train(epochs=1)
        assert len(result.log) == 1
        epoch, loss, val = result.log[0]
        assert epoch == 1 and math.isfinite(loss) and math.isfinite(val)

    def test_loss_decreases(self):
        result = quick_train(epochs=6)
        assert result.log[-1][1] < result.log[0][1]

    def test_deterministic_checkpoints_and_logs(self, tmp_path):
        r1 = quick_train(seed=5, epochs=2)
        r2 = quick_train(seed=5, epochs=2)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(r1.model, p1)
        save_checkpoint(r2.model, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert r1.log == r2.log

    def test_different_seeds_differ(self):
        r1 = quick_train(seed=5, epochs=1)
        r2 = quick_train(seed=6, epochs=1)
        assert r1.log != r2.log

    def test_heldout_never_used_in_training_split(self):
        result = quick_train(epochs=1)
        assert not set(result.heldout_target_ids) & set(result.train_node_ids)
        total = len(result.heldout_target_ids) + len(result.train_node_ids)
        assert total == result.dataset.n_nodes

    def test_write_train_log_format(self, tmp_path):
        result = quick_train(epochs=2)
        path = tmp_path / "log.csv"
        write_train_log(result.log, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_mae"
        assert len(lines) == 3
        assert lines[1].startswith("1,")

    def test_evaluate_reports_all_fields(self):
        result = quick_train(epochs=1)
        rep = evaluate(result.model, result.dataset, "test", result.graph)
        d = rep.to_dict()
        for key in ("mae", "rmse", "mape", "coverage_1s", "coverage_2s",
                    "coverage_3s", "per_target", "runtime_seconds", "n_points"):
            assert key in d
        assert rep.coverage_1s <= rep.coverage_2s <= rep.coverage_3s
        assert len(rep.per_target) == len(result.heldout_target_ids)

    def test_training_with_missing_data_runs(self):
        result = quick_train(epochs=1, missing=0.3)
        assert math.isfinite(result.log[0][1])


class TestEvaluateBaseline:
    def test_idw_report_on_synthetic(self):
        ds = generate_synthetic(10, 300, seed=3)
        from stgnp.graph import split_context_target
        ctx, tgt = split_context_target(ds.node_ids, 0.3, seed=0)
        graph = build_sensor_graph(ds.node_ids, ds.coords, GraphConfig(), ctx, tgt)
        rep = evaluate_baseline(ds, "test", graph, "idw")
        assert math.isfinite(rep.mae) and rep.mae > 0
        assert rep.coverage_1s is None

    def test_same_units_as_model_eval(self):
        # metrics are in original units whether the dataset is standardized or not
        ds = generate_synthetic(10, 300, seed=3)
        from stgnp.graph import split_context_target
        ctx, tgt = split_context_target(ds.node_ids, 0.3, seed=0)
        graph = build_sensor_graph(ds.node_ids, ds.coords, GraphConfig(), ctx, tgt)
        rep_raw = evaluate_baseline(ds, "test", graph, "idw")
        rep_std = evaluate_baseline(standardize(ds), "test", graph, "idw")
        assert rep_raw.mae == pytest.approx(rep_std.mae, rel=1e-9)
