import numpy as np
import pytest

from voxfuse.dense_layer import DenseLayer

from oracles import dense_batch_means


def pts(*coords):
    return np.asarray(coords, dtype=np.float64)


class TestIntegrate:
    def test_constant_input(self):
        layer = DenseLayer(voxel_size=0.05)
        e = np.array([0.2, 0.8], dtype=np.float32)
        points = pts((0.01, 0.01, 0.01), (0.02, 0.02, 0.02), (0.03, 0.01, 0.04))
        layer.integrate(points, np.stack([e] * 3))
        emb, weight = layer.embedding_at((0, 0, 0))
        assert weight == 3.0
        assert np.allclose(emb, e)

    def test_running_mean_update(self):
        layer = DenseLayer(voxel_size=0.05)
        p = pts((0.01, 0.01, 0.01), (0.02, 0.02, 0.02))
        layer.integrate(p, np.array([[1, 0], [1, 0]], dtype=np.float32))
        layer.integrate(p, np.array([[0, 1], [0, 1]], dtype=np.float32))
        emb, weight = layer.embedding_at((0, 0, 0))
        assert weight == 4.0
        assert np.allclose(emb, [0.5, 0.5])

    def test_saliency_weights_replace_counts(self):
        layer = DenseLayer(voxel_size=0.05)
        p = pts((0.01, 0.01, 0.01), (0.02, 0.02, 0.02))
        layer.integrate(p, np.array([[1, 0], [1, 0]], dtype=np.float32))
        layer.integrate(
            p,
            np.array([[0, 1], [0, 1]], dtype=np.float32),
            weights=np.array([0.5, 0.5]),
        )
        emb, weight = layer.embedding_at((0, 0, 0))
        assert weight == 3.0
        assert np.allclose(emb, [2 / 3, 1 / 3], atol=1e-7)

    def test_non_finite_embedding_rejected(self):
        layer = DenseLayer(voxel_size=0.05)
        with pytest.raises(ValueError):
            layer.integrate(
                pts((0.01, 0.01, 0.01)), np.array([[np.nan, 1.0]], dtype=np.float32)
            )
        assert len(layer) == 0

    def test_nonpositive_weight_rejected(self):
        layer = DenseLayer(voxel_size=0.05)
        with pytest.raises(ValueError):
            layer.integrate(
                pts((0.01, 0.01, 0.01)),
                np.array([[1.0, 0.0]], dtype=np.float32),
                weights=np.array([0.0]),
            )

    def test_missing_voxel_returns_none(self):
        layer = DenseLayer(voxel_size=0.05)
        assert layer.embedding_at((5, 5, 5)) is None


class TestOrderIndependence:
    def test_permutation_and_batching_match_batch_mean(self):
        rng = np.random.default_rng(7)
        n, d = 400, 16
        points = rng.uniform(-0.2, 0.2, (n, 3))
        embs = rng.normal(size=(n, d)).astype(np.float32)
        weights = rng.uniform(0.2, 2.0, n)

        log = []
        layer = DenseLayer(voxel_size=0.05)
        # integrate in shuffled order, three uneven batches
        order = rng.permutation(n)
        for chunk in np.array_split(order, 3):
            layer.integrate(points[chunk], embs[chunk], weights[chunk],
                            observation_log=log)

        oracle = dense_batch_means(log)
        assert set(oracle) == set(layer.voxels)
        for key, (mean, weight) in oracle.items():
            vox = layer.voxels[key]
            assert vox.weight == pytest.approx(weight, rel=1e-12)
            err = np.linalg.norm(vox.embedding - mean) / max(np.linalg.norm(mean), 1e-12)
            assert err < 1e-5

    def test_weight_exact_for_unit_counts(self):
        rng = np.random.default_rng(8)
        layer = DenseLayer(voxel_size=0.05)
        points = rng.uniform(-0.1, 0.1, (250, 3))
        embs = rng.normal(size=(250, 4)).astype(np.float32)
        for chunk in np.array_split(np.arange(250), 5):
            layer.integrate(points[chunk], embs[chunk])
        total = sum(v.weight for v in layer.voxels.values())
        assert total == 250.0
        assert all(v.weight == int(v.weight) for v in layer.voxels.values())

    def test_mean_stays_in_convex_hull(self):
        rng = np.random.default_rng(9)
        layer = DenseLayer(voxel_size=1.0)
        embs = rng.normal(size=(100, 6)).astype(np.float32)
        points = np.zeros((100, 3))  # all in one voxel
        layer.integrate(points, embs, rng.uniform(0.1, 3.0, 100))
        vox = layer.voxels[(0, 0, 0)]
        lo, hi = embs.min(axis=0), embs.max(axis=0)
        assert np.all(vox.embedding >= lo - 1e-5)
        assert np.all(vox.embedding <= hi + 1e-5)
