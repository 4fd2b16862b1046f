import os
import shutil
import tempfile
from unittest.mock import patch

import numpy as np
import pytest

from config import ModelConfig
from errors import ContractViolation, DataError
from model import (
    CHECKPOINT_MAGIC,
    ContextBatch,
    ModelParams,
    attention_mask,
    chunk_partition,
    ensemble_member_probs,
    embed_rows,
    fit_feature_stats,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    pad_rows,
    parameter_shapes,
    predict,
    predict_chunked,
    predict_ensemble,
    predict_local,
    save_checkpoint,
)
from numerics import Tape, grad_check
from retrieval import build_index


def tiny_config(**overrides) -> ModelConfig:
    values = dict(n_layers=1, d_model=8, n_heads=2, d_ff=16, d_max=3, c_max=3, l_ctx_max=64)
    values.update(overrides)
    return ModelConfig(**values)


def random_task(rng, n, width=3, n_classes=2):
    x = rng.standard_normal((n, width))
    y = rng.integers(0, n_classes, size=n)
    y[:n_classes] = np.arange(n_classes)
    return x, y


class TestEncoding:
    """Test row encoding shared by the model and retrieval"""

    def test_standardization_uses_train_statistics(self):
        """Test embedded training rows have zero mean and unit spread"""
        rng = np.random.default_rng(0)
        train = rng.standard_normal((50, 3)) * [1.0, 5.0, 0.1] + [2.0, -1.0, 0.0]
        z = embed_rows(train, fit_feature_stats(train))
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1.0)

    def test_constant_column_stays_finite(self):
        """Test a zero-variance column does not divide by zero"""
        train = np.column_stack([np.ones(10), np.arange(10.0)])
        z = embed_rows(train, fit_feature_stats(train))
        assert np.all(np.isfinite(z))
        assert np.all(z[:, 0] == 0.0)

    def test_pad_rows_rescales(self):
        """Test zero padding to D_max with the D_max/width scale"""
        padded = pad_rows(np.array([[1.0, 2.0]]), 4)
        assert padded.tolist() == [[2.0, 4.0, 0.0, 0.0]]
        with pytest.raises(DataError):
            pad_rows(np.ones((1, 5)), 4)

    def test_one_hot_blocks(self):
        """Test categorical columns expand in place; unseen values map to zeros"""
        train = np.array([[0.0, 1.5], [1.0, 2.5], [2.0, 3.5]])
        stats = fit_feature_stats(train, cat_mask=np.array([True, False]), one_hot=True)
        assert stats.one_hot and stats.width == 4
        out = embed_rows(np.array([[1.0, 2.5], [7.0, 2.5]]), stats)
        assert out[0, :3].tolist() == [0.0, 1.0, 0.0]
        assert out[1, :3].tolist() == [0.0, 0.0, 0.0]
        assert out[0, 3] == pytest.approx(0.0)

    def test_one_hot_falls_back_when_too_wide(self):
        """Test expansion wider than the limit reverts to raw standardized columns"""
        train = np.column_stack([np.arange(20.0), np.zeros(20)])
        stats = fit_feature_stats(train, cat_mask=np.array([True, False]), one_hot=True, max_one_hot_width=10)
        assert not stats.one_hot
        assert embed_rows(train, stats).shape == (20, 2)


class TestParameters:
    """Test parameter layout and LCPF checkpoints"""

    def setup_method(self):
        self.config = tiny_config()
        self.params = init_params(self.config, seed=3)
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "model.lcpf")

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_init(self):
        """Test shapes, unit gains and zero biases"""
        shapes = parameter_shapes(self.config)
        assert {name: value.shape for name, value in self.params.items()} == shapes
        assert np.all(self.params["layers.0.ln1.gain"] == 1.0)
        assert np.all(self.params["head.b"] == 0.0)
        assert self.params["encoder.label"].shape == (self.config.c_max + 1, self.config.d_model)

    def test_same_seed_same_params(self):
        """Test initialization is deterministic"""
        assert init_params(self.config, seed=3).to_bytes() == self.params.to_bytes()
        assert init_params(self.config, seed=4).to_bytes() != self.params.to_bytes()

    def test_wrong_shape_rejected(self):
        """Test parameters must match the config"""
        tensors = {k: v.copy() for k, v in self.params.items()}
        tensors["head.b"] = np.zeros(7)
        with pytest.raises(ContractViolation):
            ModelParams(self.config, tensors)

    def test_checkpoint_round_trip(self):
        """Test save/load restores config and values; re-saving is byte-identical"""
        digest = save_checkpoint(self.params, self.path)
        loaded = load_checkpoint(self.path)
        assert loaded.config == self.config
        for name, value in self.params.items():
            assert np.array_equal(loaded[name], value)
        assert save_checkpoint(loaded, self.path) == digest
        with open(self.path, "rb") as handle:
            assert handle.read(4) == CHECKPOINT_MAGIC

    def test_corrupt_checkpoints(self):
        """Test bad magic, truncation and missing files are data errors"""
        blob = self.params.to_bytes()
        with pytest.raises(DataError):
            ModelParams.from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(DataError):
            ModelParams.from_bytes(blob[:-9])
        with pytest.raises(DataError):
            ModelParams.from_bytes(blob + b"\x00")
        with pytest.raises(DataError):
            load_checkpoint(os.path.join(self.temp_dir, "missing.lcpf"))


class TestForward:
    """Test the masked forward pass"""

    def setup_method(self):
        self.config = tiny_config()
        self.rng = np.random.default_rng(11)

    def _batch(self, x, y, l_ctx, n_classes):
        labels = y.copy()
        labels[l_ctx:] = self.config.c_max
        return ContextBatch(pad_rows(x, self.config.d_max)[None], labels[None], l_ctx, n_classes, self.config.c_max)

    def test_mask_layout(self):
        """Test context rows are the only attendable positions"""
        mask = attention_mask(3, 2)
        assert mask[:, :3].all()
        assert not mask[:, 3:].any()

    def test_probabilities(self):
        """Test query rows are distributions over the active classes only"""
        params = init_params(self.config, seed=0)
        x, y = random_task(self.rng, 9)
        probs, _ = forward(params, self._batch(x, y, 6, 2), Tape(record=False))
        assert probs.value.shape == (1, 3, self.config.c_max)
        assert np.allclose(probs.value.sum(axis=-1), 1.0)
        assert np.all(probs.value[..., 2:] == 0.0)

    def test_query_independence_and_permutation_invariance(self):
        """Test queries do not see each other and context order is irrelevant"""
        for instance in range(50):
            params = init_params(self.config, seed=instance)
            x, y = random_task(self.rng, 10, n_classes=3)
            l_ctx = 7
            base = predict(params, pad_rows(x[:l_ctx], 3), y[:l_ctx], pad_rows(x[l_ctx:], 3), 3)

            altered = x[l_ctx:].copy()
            altered[1:] = self.rng.standard_normal(altered[1:].shape) * 10.0
            moved = predict(params, pad_rows(x[:l_ctx], 3), y[:l_ctx], pad_rows(altered, 3), 3)
            assert np.max(np.abs(moved[0] - base[0])) <= 1e-10

            perm = self.rng.permutation(l_ctx)
            shuffled = predict(params, pad_rows(x[:l_ctx][perm], 3), y[:l_ctx][perm], pad_rows(x[l_ctx:], 3), 3)
            assert np.max(np.abs(shuffled - base)) <= 1e-8

    def test_query_label_is_never_read(self):
        """Test the sentinel is forced at query positions"""
        params = init_params(self.config, seed=1)
        x, y = random_task(self.rng, 8)
        batch = self._batch(x, y, 5, 2)
        leaked = ContextBatch(batch.features, np.array([y]), 5, 2, self.config.c_max)
        a, _ = forward(params, batch, Tape(record=False))
        b, _ = forward(params, leaked, Tape(record=False))
        assert np.array_equal(a.value, b.value)

    def test_full_model_gradient(self):
        """Test every parameter gradient against central differences"""
        for seed in range(3):
            params = init_params(self.config, seed=seed)
            x, y = random_task(np.random.default_rng(seed), 6, n_classes=3)
            batch = self._batch(x, y, 4, 3)
            targets = y[None, 4:]
            _, grads = loss_and_grads(params, batch, targets)
            for name in params:
                def f(value, name=name):
                    tensors = dict(params.tensors)
                    tensors[name] = value
                    loss, g = loss_and_grads(params.replace(tensors), batch, targets)
                    return loss, g[name]

                assert grad_check(f, params[name]) < 1e-4, name

    @pytest.mark.slow
    def test_full_model_gradient_many_seeds(self):
        """Test the gradient check over 20 seeds"""
        for seed in range(20):
            params = init_params(self.config, seed=100 + seed)
            x, y = random_task(np.random.default_rng(seed), 6, n_classes=3)
            batch = self._batch(x, y, 4, 3)
            targets = y[None, 4:]
            for name in params:
                def f(value, name=name):
                    tensors = dict(params.tensors)
                    tensors[name] = value
                    loss, g = loss_and_grads(params.replace(tensors), batch, targets)
                    return loss, g[name]

                assert grad_check(f, params[name]) < 1e-4, name

    def test_too_many_classes(self):
        """Test n_classes above C_max is a contract violation"""
        params = init_params(self.config, seed=0)
        x, y = random_task(self.rng, 6)
        with pytest.raises(ContractViolation):
            predict(params, pad_rows(x[:4], 3), y[:4], pad_rows(x[4:], 3), 4)

    def test_empty_context(self):
        """Test prediction without context rows is refused"""
        params = init_params(self.config, seed=0)
        with pytest.raises(ContractViolation):
            predict(params, np.empty((0, 3)), np.empty(0, dtype=int), np.zeros((1, 3)), 2)


class TestPrediction:
    """Test local, ensemble and chunked prediction"""

    def setup_method(self):
        self.config = tiny_config()
        self.rng = np.random.default_rng(5)

    def test_local_with_all_rows_equals_full_context(self):
        """Test k = N local contexts reproduce full-context prediction"""
        for instance in range(20):
            params = init_params(self.config, seed=instance)
            n = int(self.rng.integers(8, 257))
            x, y = random_task(self.rng, n, n_classes=3)
            queries = self.rng.standard_normal((5, 3))
            index = build_index(x)
            local = predict_local(params, index, y, queries, n, 3)
            full = predict(params, pad_rows(x, 3), y, pad_rows(queries, 3), 3)
            assert np.max(np.abs(local - full)) <= 1e-10

    def test_local_contexts_differ_per_query(self):
        """Test small k gives each query its own neighbourhood"""
        params = init_params(self.config, seed=0)
        x = np.vstack([np.zeros((5, 3)), np.full((5, 3), 10.0)])
        y = np.array([0] * 5 + [1] * 5)
        index = build_index(x)
        probs = predict_local(params, index, y, np.array([[0.0, 0.0, 0.0], [10.0, 10.0, 10.0]]), 5, 2)
        near_zero = predict(params, pad_rows(x[:5], 3), y[:5], pad_rows(np.zeros((1, 3)), 3), 2)
        assert np.allclose(probs[0], near_zero[0], atol=1e-10)

    def test_single_member_ensemble_is_plain_prediction(self):
        """Test member 0 uses identity permutations"""
        params = init_params(self.config, seed=2)
        x, y = random_task(self.rng, 12, n_classes=3)
        ctx, qry = pad_rows(x[:9], 3), pad_rows(x[9:], 3)
        single = predict_ensemble(params, ctx, y[:9], qry, 3, n_members=1, seed=0)
        assert np.allclose(single, predict(params, ctx, y[:9], qry, 3), atol=1e-12)
        many = predict_ensemble(params, ctx, y[:9], qry, 3, n_members=4, seed=0)
        assert np.allclose(many.sum(axis=1), 1.0)

    def test_chunk_partition(self):
        """Test chunks are balanced, sorted and cover every row once"""
        chunks = chunk_partition(10, 4, seed=0)
        assert [len(c) for c in chunks] == [4, 3, 3]
        assert sorted(np.concatenate(chunks).tolist()) == list(range(10))
        assert all(np.all(np.diff(c) > 0) for c in chunks)
        assert chunk_partition(5, 8, seed=0)[0].tolist() == [0, 1, 2, 3, 4]

    def test_single_chunk_equals_full_context(self):
        """Test a chunk covering the whole set is plain prediction"""
        params = init_params(self.config, seed=4)
        x, y = random_task(self.rng, 20)
        ctx, qry = pad_rows(x[:16], 3), pad_rows(x[16:], 3)
        chunked = predict_chunked(params, ctx, y[:16], qry, 2, chunk_size=16, seed=0)
        assert np.allclose(chunked, predict(params, ctx, y[:16], qry, 2), atol=1e-12)
        averaged = predict_chunked(params, ctx, y[:16], qry, 2, chunk_size=5, seed=0)
        assert np.allclose(averaged.sum(axis=1), 1.0)

    def test_class_permutation_round_trip(self):
        """Test relabelled classes are mapped back to their original columns"""
        params = init_params(self.config, seed=6)
        x, y = random_task(self.rng, 12, n_classes=3)
        ctx, qry = pad_rows(x[:9], 3), pad_rows(x[9:], 3)
        identity = np.arange(3)
        for classes in (np.array([2, 0, 1]), np.array([1, 0, 2]), np.array([0, 2, 1])):
            member = ensemble_member_probs(params, ctx, y[:9], qry, 3, identity, classes)
            relabelled = predict(params, ctx, classes[y[:9]], qry, 3)
            for c in range(3):
                assert np.array_equal(member[:, c], relabelled[:, classes[c]])
            inverse = np.argsort(classes)
            restored = ensemble_member_probs(params, ctx, classes[y[:9]], qry, 3, identity, inverse)
            assert np.array_equal(restored[:, classes], predict(params, ctx, y[:9], qry, 3))

    @patch("model.predict")
    def test_class_alignment_with_label_echo(self, mock_predict):
        """Test a model that echoes the first context label lands on the original class"""
        mock_predict.side_effect = lambda params, cx, cy, qx, n_classes, batch_size: \
            np.eye(n_classes)[np.full(qx.shape[0], cy[0])]
        ctx = self.rng.standard_normal((4, 3))
        qry = self.rng.standard_normal((2, 3))
        for label in range(3):
            y = np.array([label, 0, 1, 2])
            member = ensemble_member_probs(None, ctx, y, qry, 3, np.array([2, 0, 1]), np.array([1, 2, 0]))
            assert member.tolist() == np.eye(3)[[label, label]].tolist()

    def test_member_order_does_not_matter(self):
        """Test averaging members in any order gives the same ensemble"""
        params = init_params(self.config, seed=7)
        x, y = random_task(self.rng, 12, n_classes=3)
        ctx, qry = pad_rows(x[:9], 3), pad_rows(x[9:], 3)
        perms = [(np.arange(3), np.arange(3)), (np.array([1, 2, 0]), np.array([2, 1, 0])),
                 (np.array([2, 0, 1]), np.array([1, 0, 2]))]
        members = [ensemble_member_probs(params, ctx, y[:9], qry, 3, cols, classes) for cols, classes in perms]
        assert np.allclose(np.mean(members, axis=0), np.mean(members[::-1], axis=0), atol=1e-12)
        assert np.allclose(np.mean(members, axis=0).sum(axis=1), 1.0, atol=1e-12)

    @patch("model.chunk_partition")
    def test_identical_chunks_equal_single_chunk(self, mock_partition):
        """Test averaging two chunks with the same content changes nothing"""
        params = init_params(self.config, seed=8)
        x, y = random_task(self.rng, 14)
        ctx, qry = pad_rows(x[:10], 3), pad_rows(x[10:], 3)
        doubled_x = np.vstack([ctx, ctx])
        doubled_y = np.concatenate([y[:10], y[:10]])
        mock_partition.return_value = [np.arange(10), np.arange(10, 20)]
        chunked = predict_chunked(params, doubled_x, doubled_y, qry, 2, chunk_size=10, seed=0)
        assert np.max(np.abs(chunked - predict(params, ctx, y[:10], qry, 2))) <= 1e-12
