import math

import numpy as np
import pytest
import torch

from intentcf.dataset import TripletBatch, sample_triplets
from intentcf.disentangler import ChunkedEmbeddingTable
from intentcf.errors import ConfigError, DataError, NumericError
from intentcf.evaluator import rank_items
from intentcf.graph import build_bipartite
from intentcf.trainer import (
    OptimizerState,
    TrainingConfig,
    adam_step,
    batch_nodes,
    bpr_loss,
    final_embeddings,
    gradients,
    init_params,
    load_checkpoint,
    objective_value,
    predict,
    save_checkpoint,
    train_epoch,
)
from intentcf import synthetic

from conftest import make_dataset, random_dataset, train_model
from oracles import fd_gradient

LN2 = math.log(2.0)


def small_batch(ds, size, seed):
    return sample_triplets(ds, size, np.random.default_rng(seed))


class TestTrainingConfig:
    def test_rejects_indivisible_embedding(self):
        with pytest.raises(ConfigError, match="divisible"):
            TrainingConfig(K=3, d=64)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"K": 0},
            {"L": -1},
            {"T": 0},
            {"lr": 0.0},
            {"l2": -1.0},
            {"batch_size": 0},
            {"eval_every": 0},
            {"affinity": "nope"},
            {"routing_grad": "half"},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ConfigError):
            TrainingConfig(**kwargs)

    def test_mapping_roundtrip(self):
        config = TrainingConfig(K=2, d=8, lr=0.01)
        rebuilt = TrainingConfig.from_mapping(
            {k: str(v) for k, v in config.as_dict().items()}
        )
        assert rebuilt == config

    def test_unknown_field_named_in_error(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            TrainingConfig.from_mapping({"learning_rate": "0.01"})


class TestPredict:
    def test_orthogonal_vectors(self):
        assert predict(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 2.0])) == 0.0

    def test_identical_unit_vectors(self):
        v = torch.tensor([1.0, 0.0, 0.0])
        assert predict(v, v) == 1.0

    def test_hand_value(self):
        assert predict(torch.tensor([1.0, 2.0, 3.0]), torch.tensor([4.0, 5.0, 6.0])) == 32.0

    def test_chunked_inputs_flattened(self):
        u = torch.arange(6.0).reshape(2, 3)
        i = torch.ones(2, 3)
        assert predict(u, i) == 15.0


class TestBprLoss:
    def _table(self, rows):
        return torch.tensor(rows, dtype=torch.float64).unsqueeze(1)

    def test_equal_scores_give_ln2_per_triplet(self):
        final = self._table([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
        batch = TripletBatch(
            users=np.array([0]), pos_items=np.array([0]), neg_items=np.array([1])
        )
        loss = bpr_loss(batch, final, final, l2=0.0, num_users=1)
        assert float(loss) == pytest.approx(LN2, abs=1e-12)

    def test_unit_margin_hand_value(self):
        final = self._table([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        batch = TripletBatch(
            users=np.array([0]), pos_items=np.array([0]), neg_items=np.array([1])
        )
        loss = bpr_loss(batch, final, final, l2=0.0, num_users=1)
        assert float(loss) == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_huge_margin_leaves_only_regularizer(self):
        final = self._table([[100.0, 0.0], [100.0, 0.0], [-100.0, 0.0]])
        batch = TripletBatch(
            users=np.array([0]), pos_items=np.array([0]), neg_items=np.array([1])
        )
        l2 = 0.5
        loss = bpr_loss(batch, final, final, l2=l2, num_users=1)
        reg = l2 * (100.0 ** 2 * 3) / 1
        assert float(loss) == pytest.approx(reg, rel=1e-9)


class TestGradients:
    def test_closed_form_mf_gradient(self):
        # L=0, one triplet, no regularizer: the textbook pairwise-ranking
        # gradient of a factorization model.
        ds = make_dataset({0: [1]}, num_items=3)
        g = build_bipartite(ds)
        config = TrainingConfig(K=1, L=0, T=1, d=4, l2=0.0, cor_weight=0.0, batch_size=1)
        params = init_params(1, 3, 4, 1, seed=3, dtype=torch.float64)
        batch = TripletBatch(
            users=np.array([0]), pos_items=np.array([1]), neg_items=np.array([2])
        )
        grad = gradients("bpr", batch, params, g, config)
        flat = params.flat().numpy()
        e_u, e_i, e_j = flat[0], flat[2], flat[3]
        margin = e_u @ e_i - e_u @ e_j
        coeff = -(1.0 - 1.0 / (1.0 + math.exp(-margin)))
        grad_flat = grad.reshape(4, -1).numpy()
        assert np.allclose(grad_flat[0], coeff * (e_i - e_j), atol=1e-12)
        assert np.allclose(grad_flat[2], coeff * e_u, atol=1e-12)
        assert np.allclose(grad_flat[3], -coeff * e_u, atol=1e-12)
        assert np.allclose(grad_flat[1], 0.0, atol=1e-12)

    def test_zero_params_are_finite_with_ln2_loss(self):
        ds = make_dataset({0: [0, 1], 1: [2]}, num_items=4)
        g = build_bipartite(ds)
        config = TrainingConfig(K=2, L=1, T=2, d=4, l2=0.0, cor_weight=0.0, batch_size=3)
        params = ChunkedEmbeddingTable(values=torch.zeros(6, 2, 2, dtype=torch.float64))
        batch = small_batch(ds, 3, seed=0)
        loss = objective_value("bpr", batch, params.values, g, config)
        assert float(loss) == pytest.approx(3 * LN2, abs=1e-9)
        grad = gradients("bpr", batch, params, g, config)
        assert bool(torch.isfinite(grad).all())

    @pytest.mark.parametrize("objective", ["bpr", "independence", "combined"])
    @pytest.mark.parametrize("routing_grad", ["full", "stop"])
    def test_matches_finite_differences(self, objective, routing_grad):
        rng = np.random.default_rng(17)
        ds = random_dataset(rng, max_users=6, max_items=6)
        g = build_bipartite(ds)
        config = TrainingConfig(
            K=2, L=1, T=2, d=4, l2=1e-3, cor_weight=0.05,
            batch_size=4, routing_grad=routing_grad,
        )
        params = init_params(ds.num_users, ds.num_items, 4, 2, seed=5, dtype=torch.float64)
        batch = small_batch(ds, 4, seed=6)
        grad = gradients(objective, batch, params, g, config).numpy()
        if routing_grad == "stop":
            # The stop mode treats refined scores as constants, so the
            # reference objective freezes them at the base point.
            from intentcf.disentangler import stack_layers

            _, state = stack_layers(
                params.values, g, config.L, config.T,
                affinity=config.affinity, stop_routing_gradients=True,
            )
            frozen = state.scores
            loss_fn = lambda v: objective_value(objective, batch, v, g, config, fixed_scores=frozen)
        else:
            loss_fn = lambda v: objective_value(objective, batch, v, g, config)
        fd = fd_gradient(loss_fn, params.values)
        assert np.all(np.abs(grad - fd) <= 1e-4 * np.abs(fd) + 1e-7)

    def test_single_intent_independence_gradient_is_zero(self):
        ds = make_dataset({0: [0], 1: [1]}, num_items=3)
        g = build_bipartite(ds)
        config = TrainingConfig(K=1, L=1, T=2, d=4, batch_size=2)
        params = init_params(2, 3, 4, 1, seed=1, dtype=torch.float64)
        batch = small_batch(ds, 2, seed=2)
        grad = gradients("independence", batch, params, g, config)
        assert torch.equal(grad, torch.zeros_like(params.values))

    def test_unknown_objective_rejected(self):
        ds = make_dataset({0: [0]}, num_items=2)
        g = build_bipartite(ds)
        config = TrainingConfig(K=1, d=4)
        params = init_params(1, 2, 4, 1, seed=0)
        batch = small_batch(ds, 1, seed=0)
        with pytest.raises(ConfigError):
            gradients("ranking", batch, params, g, config)


class TestAdamStep:
    def test_zero_gradient_keeps_params(self):
        params = ChunkedEmbeddingTable(values=torch.ones(3, 1, 2))
        state = OptimizerState.zeros(params)
        adam_step(params, torch.zeros_like(params.values), state, lr=0.1)
        assert torch.equal(params.values, torch.ones(3, 1, 2))
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        params = ChunkedEmbeddingTable(values=torch.zeros(1, 1, 2, dtype=torch.float64))
        state = OptimizerState.zeros(params)
        grad = torch.tensor([[[0.7, -2.5]]], dtype=torch.float64)
        adam_step(params, grad, state, lr=0.01)
        assert np.allclose(
            params.values.reshape(-1).numpy(), [-0.01, 0.01], atol=1e-7
        )

    def test_two_hand_computed_steps(self):
        # lr=0.1, gradients (1, -2) then (0.5, 0.5), starting from (1, -1).
        params = ChunkedEmbeddingTable(
            values=torch.tensor([[[1.0, -1.0]]], dtype=torch.float64)
        )
        state = OptimizerState.zeros(params)
        adam_step(params, torch.tensor([[[1.0, -2.0]]], dtype=torch.float64), state, lr=0.1)
        adam_step(params, torch.tensor([[[0.5, 0.5]]], dtype=torch.float64), state, lr=0.1)
        assert np.allclose(
            params.values.reshape(-1).numpy(),
            [0.8067820382981609, -0.8530531837013348],
            atol=1e-12,
        )
        assert state.step == 2

    def test_shape_mismatch_raises(self):
        params = ChunkedEmbeddingTable(values=torch.zeros(2, 1, 2))
        state = OptimizerState.zeros(params)
        with pytest.raises(DataError):
            adam_step(params, torch.zeros(3, 1, 2), state, lr=0.1)


class TestInitParams:
    def test_entries_within_xavier_bound(self):
        table = init_params(50, 60, 16, 4, seed=0)
        bound = math.sqrt(6.0 / 32.0)
        assert float(table.values.abs().max()) <= bound
        assert table.values.shape == (110, 4, 4)

    def test_seeds_control_the_table(self):
        a = init_params(5, 5, 8, 2, seed=1)
        b = init_params(5, 5, 8, 2, seed=1)
        c = init_params(5, 5, 8, 2, seed=2)
        assert torch.equal(a.values, b.values)
        assert not torch.equal(a.values, c.values)

    def test_mean_within_three_sigma(self):
        table = init_params(2500, 2500, 200, 4, seed=9)
        draws = table.values.numpy().reshape(-1)
        bound = math.sqrt(6.0 / 400.0)
        sigma_mean = bound / math.sqrt(3.0 * draws.size)
        assert abs(draws.mean()) <= 3.0 * sigma_mean

    def test_rejects_indivisible_width(self):
        with pytest.raises(ConfigError):
            init_params(3, 3, 10, 4, seed=0)


class TestTrainEpoch:
    def test_disabled_independence_matches_bpr_only_loop(self):
        ds = synthetic.planted_blocks_dataset(
            num_users=12, num_items=20, items_per_user=6, seed=2
        )
        g = build_bipartite(ds)
        config = TrainingConfig(
            K=2, L=1, T=2, d=8, lr=0.01, l2=1e-4, cor_weight=0.0,
            batch_size=32, epochs=3, seed=4,
        )
        params, _ = train_model(ds, g, config)

        # Manual loop without any independence branch.
        manual = init_params(ds.num_users, ds.num_items, 8, 2, seed=4)
        state = OptimizerState.zeros(manual)
        rng = np.random.default_rng(4)
        batches = math.ceil(ds.num_train_edges / config.batch_size)
        for _ in range(config.epochs):
            for _ in range(batches):
                batch = sample_triplets(ds, config.batch_size, rng)
                grad = gradients("bpr", batch, manual, g, config)
                adam_step(manual, grad, state, config.lr)
        assert torch.equal(params.values, manual.values)

    def test_report_shows_zero_independence_when_disabled(self):
        ds = synthetic.planted_blocks_dataset(
            num_users=10, num_items=16, items_per_user=5, seed=3
        )
        g = build_bipartite(ds)
        config = TrainingConfig(K=2, L=0, T=1, d=8, cor_weight=0.0, batch_size=16, epochs=1, seed=1)
        params = init_params(ds.num_users, ds.num_items, 8, 2, seed=1)
        state = OptimizerState.zeros(params)
        report = train_epoch(ds, g, params, state, config, np.random.default_rng(1))
        assert report.mean_ind_loss == 0.0
        assert report.num_batches == math.ceil(ds.num_train_edges / 16)

    def test_loss_decreases_over_first_ten_epochs(self):
        ds = synthetic.planted_blocks_dataset(
            num_users=20, num_items=40, items_per_user=10, seed=3
        )
        g = build_bipartite(ds)
        config = TrainingConfig(
            K=2, L=0, T=2, d=8, lr=0.05, l2=0.0, cor_weight=0.0,
            batch_size=512, epochs=30, seed=1,
        )
        params = init_params(ds.num_users, ds.num_items, 8, 2, seed=1)
        state = OptimizerState.zeros(params)
        rng = np.random.default_rng(1)
        losses = [
            train_epoch(ds, g, params, state, config, rng).mean_bpr_loss
            for _ in range(config.epochs)
        ]
        assert all(losses[i + 1] < losses[i] for i in range(9))

    def test_same_seed_reproduces_trajectory_bitwise(self):
        ds = synthetic.planted_blocks_dataset(
            num_users=10, num_items=16, items_per_user=5, seed=5
        )
        g = build_bipartite(ds)
        config = TrainingConfig(
            K=2, L=1, T=2, d=8, lr=0.01, cor_weight=0.5, batch_size=16, epochs=3, seed=6
        )
        params_a, state_a = train_model(ds, g, config)
        params_b, state_b = train_model(ds, g, config)
        assert torch.equal(params_a.values, params_b.values)
        assert torch.equal(state_a.m, state_b.m)
        assert state_a.step == state_b.step

    def test_numeric_error_keeps_last_completed_batch(self):
        ds = make_dataset({0: [0, 1], 1: [2]}, num_items=4)
        g = build_bipartite(ds)
        config = TrainingConfig(K=1, L=0, T=1, d=4, lr=0.1, cor_weight=0.0, batch_size=8, epochs=1)
        params = init_params(2, 4, 4, 1, seed=0)
        params.values[0, 0, 0] = float("nan")
        state = OptimizerState.zeros(params)
        before = params.values.clone()
        with pytest.raises(NumericError):
            train_epoch(ds, g, params, state, config, np.random.default_rng(0))
        assert torch.equal(
            torch.nan_to_num(params.values), torch.nan_to_num(before)
        )
        assert state.step == 0


class TestMfEquivalence:
    def test_engine_matches_independent_mf_trainer(self):
        # With L=0 the whole stack must reduce to pairwise-ranking matrix
        # factorization; an independent numpy trainer replays the run.
        ds = synthetic.planted_blocks_dataset(
            num_users=12, num_items=18, items_per_user=6, seed=9
        )
        g = build_bipartite(ds)
        config = TrainingConfig(
            K=2, L=0, T=1, d=8, lr=0.01, l2=1e-3, cor_weight=0.0,
            batch_size=16, epochs=3, seed=11,
        )
        params = init_params(ds.num_users, ds.num_items, 8, 2, seed=11, dtype=torch.float64)
        reference = params.flat().numpy().copy()
        state = OptimizerState.zeros(params)
        rng = np.random.default_rng(11)
        for _ in range(config.epochs):
            train_epoch(ds, g, params, state, config, rng)

        p = reference
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        step = 0
        offset = ds.num_users
        rng_oracle = np.random.default_rng(11)
        batches = math.ceil(ds.num_train_edges / config.batch_size)
        for _ in range(config.epochs):
            for _ in range(batches):
                batch = sample_triplets(ds, config.batch_size, rng_oracle)
                grad = np.zeros_like(p)
                for u, i, j in batch:
                    e_u, e_i, e_j = p[u], p[offset + i], p[offset + j]
                    margin = e_u @ e_i - e_u @ e_j
                    coeff = -(1.0 - 1.0 / (1.0 + math.exp(-margin)))
                    grad[u] += coeff * (e_i - e_j)
                    grad[offset + i] += coeff * e_u
                    grad[offset + j] += -coeff * e_u
                    grad[u] += 2 * config.l2 * e_u / len(batch)
                    grad[offset + i] += 2 * config.l2 * e_i / len(batch)
                    grad[offset + j] += 2 * config.l2 * e_j / len(batch)
                step += 1
                m = 0.9 * m + 0.1 * grad
                v = 0.999 * v + 0.001 * grad * grad
                m_hat = m / (1 - 0.9 ** step)
                v_hat = v / (1 - 0.999 ** step)
                p = p - config.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert np.allclose(params.flat().numpy(), p, atol=1e-12)

    def test_item_scaling_preserves_rankings(self):
        ds = synthetic.planted_blocks_dataset(
            num_users=8, num_items=14, items_per_user=5, seed=13
        )
        g = build_bipartite(ds)
        config = TrainingConfig(K=1, L=0, T=1, d=8, lr=0.05, cor_weight=0.0, batch_size=32, epochs=5, seed=2)
        params, _ = train_model(ds, g, config)
        final, _ = final_embeddings(params, g, config)
        scaled = final.clone()
        scaled[ds.num_users:] *= 3.7
        for u in range(ds.num_users):
            assert np.array_equal(rank_items(u, final, ds), rank_items(u, scaled, ds))

    def test_noiseless_users_rank_held_out_item_first(self):
        # Users 0 and 1 share one taste, user 2 another; u0's held-out item
        # is the remaining shared item, which must outrank the other block.
        ds = make_dataset(
            {0: [0, 1], 1: [0, 1, 2], 2: [3, 4]},
            {0: [2]},
            num_items=5,
        )
        g = build_bipartite(ds)
        config = TrainingConfig(
            K=1, L=0, T=1, d=8, lr=0.05, l2=0.0, cor_weight=0.0,
            batch_size=32, epochs=300, seed=1,
        )
        params, _ = train_model(ds, g, config)
        final, _ = final_embeddings(params, g, config)
        ranking = rank_items(0, final, ds)
        assert ranking[0] == 2


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        config = TrainingConfig(K=2, d=8, epochs=1)
        params = init_params(3, 4, 8, 2, seed=5)
        state = OptimizerState.zeros(params)
        state.step = 7
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, config, params, state, epoch=9, extra={"recall_at_20": 0.5})
        loaded = load_checkpoint(path)
        assert loaded.config == config
        assert torch.equal(loaded.params.values, params.values)
        assert loaded.state.step == 7
        assert loaded.epoch == 9
        assert loaded.extra["recall_at_20"] == 0.5

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "checkpoint.bin"
        torch.save({"format_version": 99}, path)
        with pytest.raises(DataError, match="version"):
            load_checkpoint(path)

    def test_rejects_garbage_file(self, tmp_path):
        path = tmp_path / "checkpoint.bin"
        path.write_text("not a checkpoint")
        with pytest.raises(DataError):
            load_checkpoint(path)


def test_batch_nodes_are_sorted_unique():
    batch = TripletBatch(
        users=np.array([1, 0, 1]),
        pos_items=np.array([2, 2, 0]),
        neg_items=np.array([1, 3, 1]),
    )
    nodes = batch_nodes(batch, num_users=4)
    assert nodes.tolist() == [0, 1, 4, 5, 6, 7]
