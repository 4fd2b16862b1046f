import numpy as np
import pytest

from errors import ContractViolation
from model import embed_rows, fit_feature_stats
from retrieval import (
    SharedContextBatch,
    build_index,
    build_local_context,
    build_shared_context_batch,
    k_rule,
    knn_query,
    knn_query_batch,
)


def brute_force_knn(points, query, k, exclude=()):
    """Reference ordering by (squared distance, id)"""
    keyed = sorted(
        (float(((points[i] - query) ** 2).sum()), i) for i in range(points.shape[0]) if i not in exclude
    )
    return [i for _, i in keyed[:k]]


class TestKRule:
    """Test the default neighbour count"""

    def test_values(self):
        """Test min(ceil(10 sqrt(n)), k_max, n)"""
        assert k_rule(1, 512) == 1
        assert k_rule(50, 512) == 50
        assert k_rule(100, 512) == 100
        assert k_rule(1000, 512) == 317
        assert k_rule(10000, 512) == 512
        assert k_rule(10000, 200) == 200

    def test_invalid(self):
        """Test non-positive inputs are rejected"""
        with pytest.raises(ContractViolation):
            k_rule(0, 10)
        with pytest.raises(ContractViolation):
            k_rule(10, 0)


class TestKnnQuery:
    """Test exact neighbour search"""

    def setup_method(self):
        self.rng = np.random.default_rng(17)

    def test_matches_brute_force_with_ties(self):
        """Test ordering against a sort oracle on raw rows full of duplicates"""
        for _ in range(50):
            n = int(self.rng.integers(5, 201))
            points = self.rng.integers(0, 3, size=(n, 3)).astype(float)
            index = build_index(points)
            query = self.rng.integers(0, 3, size=3).astype(float)
            k = int(self.rng.integers(1, n + 1))
            assert knn_query(index, query, k).tolist() == brute_force_knn(points, query, k)

    def test_matches_brute_force_one_hot(self):
        """Test ordering against a sort oracle on one-hot embedded categorical rows"""
        cat_mask = np.array([True, False, True])
        for _ in range(50):
            n = int(self.rng.integers(5, 201))
            raw = np.column_stack([
                self.rng.integers(0, 4, size=n),
                self.rng.integers(0, 3, size=n),
                self.rng.integers(0, 2, size=n),
            ]).astype(float)
            stats = fit_feature_stats(raw, cat_mask, one_hot=True)
            points = embed_rows(raw, stats)
            assert stats.one_hot and points.shape[1] == stats.width
            index = build_index(points, kind="one_hot")
            query = embed_rows(raw[int(self.rng.integers(0, n))], stats)[0]
            k = int(self.rng.integers(1, n + 1))
            assert knn_query(index, query, k).tolist() == brute_force_knn(points, query, k)

    def test_duplicates_resolve_to_smallest_id(self):
        """Test identical rows come back in id order"""
        points = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        index = build_index(points)
        assert knn_query(index, np.array([0.0, 0.0]), 3).tolist() == [1, 3, 0]

    def test_exclude(self):
        """Test excluded ids never appear and shrink the admissible k"""
        points = self.rng.integers(0, 4, size=(20, 2)).astype(float)
        index = build_index(points)
        result = knn_query(index, points[4], 19, exclude=[4])
        assert 4 not in result.tolist()
        assert result.tolist() == brute_force_knn(points, points[4], 19, exclude={4})
        with pytest.raises(ContractViolation):
            knn_query(index, points[4], 20, exclude=[4])

    def test_k_out_of_range(self):
        """Test k must lie in [1, N]"""
        index = build_index(np.zeros((3, 2)))
        with pytest.raises(ContractViolation):
            knn_query(index, np.zeros(2), 0)
        with pytest.raises(ContractViolation):
            knn_query(index, np.zeros(2), 4)

    def test_width_mismatch(self):
        """Test a query of the wrong width is refused"""
        index = build_index(np.zeros((3, 2)))
        with pytest.raises(ContractViolation):
            knn_query(index, np.zeros(3), 1)

    def test_batch_equals_single(self):
        """Test the batched query agrees row by row, including per-query exclusion"""
        points = self.rng.integers(0, 5, size=(40, 3)).astype(float)
        index = build_index(points)
        queries = points[:6]
        exclude = np.array([0, 1, -1, 3, -1, 5])
        batched = knn_query_batch(index, queries, 7, exclude_ids=exclude)
        for i, query in enumerate(queries):
            single = knn_query(index, query, 7, exclude=[exclude[i]] if exclude[i] >= 0 else None)
            assert batched[i].tolist() == single.tolist()


class TestLocalContexts:
    """Test local and shared contexts"""

    def setup_method(self):
        self.rng = np.random.default_rng(23)
        self.points = self.rng.standard_normal((60, 3))
        self.labels = self.rng.integers(0, 3, size=60)
        self.index = build_index(self.points)

    def test_local_context_excludes_self(self):
        """Test a training row is never part of its own context"""
        rows, labels = build_local_context(self.index, self.labels, self.points[7], 5, self_id=7)
        expected = brute_force_knn(self.points, self.points[7], 5, exclude={7})
        assert np.array_equal(rows, self.points[expected])
        assert np.array_equal(labels, self.labels[expected])

    def test_shared_batches_are_knn_sets(self):
        """Test shared-context batches over many seeds"""
        for seed in range(50):
            batch = build_shared_context_batch(self.index, 4, 6, 3, seed)
            assert batch.context_ids.shape == (4, 6)
            assert batch.query_ids.shape == (4, 3)
            assert np.unique(batch.anchors).size == 4
            batch.validate(self.index)

    def test_shared_batches_match_brute_force(self):
        """Test each sequence holds exactly the anchor's nearest rows, anchor excluded"""
        for seed in range(50):
            batch = build_shared_context_batch(self.index, 4, 6, 3, seed)
            for b, anchor in enumerate(batch.anchors):
                members = np.concatenate([batch.context_ids[b], batch.query_ids[b]])
                expected = brute_force_knn(self.points, self.points[anchor], 9, exclude={int(anchor)})
                assert sorted(members.tolist()) == sorted(expected)

    def test_shared_batch_determinism(self):
        """Test the same seed draws the same batch"""
        a = build_shared_context_batch(self.index, 3, 5, 2, 9)
        b = build_shared_context_batch(self.index, 3, 5, 2, 9)
        assert np.array_equal(a.context_ids, b.context_ids)
        assert np.array_equal(a.query_ids, b.query_ids)

    def test_validate_catches_anchor_and_overlap(self):
        """Test validation rejects an anchor inside its own sequence and repeated ids"""
        with pytest.raises(ContractViolation):
            SharedContextBatch(np.array([0]), np.array([[0, 1]]), np.array([[2]])).validate()
        with pytest.raises(ContractViolation):
            SharedContextBatch(np.array([0]), np.array([[1, 2]]), np.array([[2]])).validate()
        far = np.argsort(((self.points - self.points[0]) ** 2).sum(axis=1))[-3:]
        with pytest.raises(ContractViolation):
            SharedContextBatch(np.array([0]), far[None, :2], far[None, 2:]).validate(self.index)

    def test_dataset_too_small(self):
        """Test the anchor plus k neighbours must fit in the dataset"""
        index = build_index(self.points[:5])
        with pytest.raises(ContractViolation):
            build_shared_context_batch(index, 1, 3, 2, 0)
        with pytest.raises(ContractViolation):
            build_shared_context_batch(index, 6, 2, 1, 0)
