import numpy as np
import pytest

from sparsejepa import data, probe, vit
from sparsejepa.probe import FeatureTable, ProbeConfig, ProbeWeights

TINY = vit.ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=1, heads=2, mlp_ratio=2.0)


def separable_table(n_per=40, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(loc=(-2.0, 0.0), scale=0.3, size=(n_per, 2))
    b = rng.normal(loc=(2.0, 0.0), scale=0.3, size=(n_per, 2))
    return FeatureTable(features=np.vstack([a, b]),
                        labels=np.repeat([0, 1], n_per))


class TestExtractFeatures:
    def _dataset(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        handle = data.DatasetHandle(
            source="toy", images=rng.random((n, 3, 8, 8)),
            labels=rng.integers(0, 2, size=n))
        return handle

    def test_deterministic_and_pooled(self):
        handle = self._dataset()
        params = vit.init_params(TINY, np.random.default_rng(1))
        table = probe.extract_features(handle, params, TINY, normalized=False)
        assert table.features.shape == (6, 16)
        emb = vit.encode(handle.images[0], TINY, params).data
        np.testing.assert_allclose(table.features[0], emb.mean(axis=0), atol=1e-12)

    def test_constant_images_identical_rows(self):
        handle = self._dataset()
        handle.images[:] = handle.images[0]
        params = vit.init_params(TINY, np.random.default_rng(2))
        table = probe.extract_features(handle, params, TINY, normalized=False)
        for row in table.features[1:]:
            np.testing.assert_array_equal(row, table.features[0])

    def test_permuting_dataset_permutes_rows(self):
        handle = self._dataset(seed=3)
        params = vit.init_params(TINY, np.random.default_rng(3))
        base = probe.extract_features(handle, params, TINY, normalized=False)
        perm = np.array([3, 1, 5, 0, 2, 4])
        shuffled = data.DatasetHandle(source="toy", images=handle.images[perm],
                                      labels=handle.labels[perm])
        table = probe.extract_features(shuffled, params, TINY, normalized=False)
        np.testing.assert_allclose(table.features, base.features[perm], atol=1e-12)


class TestTrainLinearProbe:
    def test_separable_reaches_full_accuracy(self):
        table = separable_table()
        weights = probe.train_linear_probe(table, ProbeConfig(epochs=200))
        assert probe.top1_accuracy(weights, table) == 1.0

    def test_zero_features_majority_rate(self):
        labels = np.array([0] * 6 + [1] * 4)
        table = FeatureTable(features=np.zeros((10, 3)), labels=labels)
        weights = probe.train_linear_probe(table, ProbeConfig(epochs=50))
        acc = probe.top1_accuracy(weights, table)
        assert acc == pytest.approx(0.6)

    def test_single_class_rejected(self):
        table = FeatureTable(features=np.random.default_rng(0).random((5, 2)),
                             labels=np.zeros(5, dtype=int))
        with pytest.raises(ValueError):
            probe.train_linear_probe(table)

    def test_deterministic(self):
        table = separable_table(seed=4)
        a = probe.train_linear_probe(table, ProbeConfig(epochs=100))
        b = probe.train_linear_probe(table, ProbeConfig(epochs=100))
        assert a.w.tobytes() == b.w.tobytes()
        assert a.b.tobytes() == b.b.tobytes()

    def test_loss_nonincreasing(self):
        table = separable_table(seed=5)
        cfg = ProbeConfig(epochs=100, lr=5.0)  # aggressive lr forces halving
        w = np.zeros((2, 2))
        b = np.zeros(2)
        lr = cfg.lr
        losses = []
        loss, gw, gb = probe.cross_entropy_and_grad(w, b, table.features, table.labels,
                                                    cfg.weight_decay)
        losses.append(loss)
        for _ in range(cfg.epochs):
            w2, b2 = w - lr * gw, b - lr * gb
            loss2, gw2, gb2 = probe.cross_entropy_and_grad(w2, b2, table.features,
                                                           table.labels, cfg.weight_decay)
            if loss2 > loss:
                lr *= 0.5
                continue
            w, b, loss, gw, gb = w2, b2, loss2, gw2, gb2
            losses.append(loss)
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(7, 3))
        y = rng.integers(0, 3, size=7)
        w = rng.normal(size=(3, 3))
        b = rng.normal(size=3)
        _, gw, gb = probe.cross_entropy_and_grad(w, b, x, y, 1e-4)
        h = 1e-6
        for arr, grad in ((w, gw), (b, gb)):
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = probe.cross_entropy_and_grad(w, b, x, y, 1e-4)[0]
                flat[i] = orig - h
                lm = probe.cross_entropy_and_grad(w, b, x, y, 1e-4)[0]
                flat[i] = orig
                num = (lp - lm) / (2 * h)
                assert abs(num - grad.reshape(-1)[i]) < 1e-5


class TestTop1Accuracy:
    def test_perfect_predictor(self):
        table = FeatureTable(features=np.eye(3), labels=np.arange(3))
        weights = ProbeWeights(w=np.eye(3) * 10, b=np.zeros(3))
        assert probe.top1_accuracy(weights, table) == 1.0

    def test_constant_logits_tiebreak_class_zero(self):
        table = FeatureTable(features=np.zeros((8, 2)),
                             labels=np.array([0, 1, 2, 3] * 2))
        weights = ProbeWeights(w=np.zeros((2, 4)), b=np.zeros(4))
        assert probe.top1_accuracy(weights, table) == pytest.approx(0.25)

    def test_empty_table_rejected(self):
        table = FeatureTable(features=np.zeros((0, 2)), labels=np.zeros(0, dtype=int))
        weights = ProbeWeights(w=np.zeros((2, 2)), b=np.zeros(2))
        with pytest.raises(ValueError):
            probe.top1_accuracy(weights, table)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(7)
        feats = rng.normal(size=(20, 4))
        labels = rng.integers(0, 3, size=20)
        table = FeatureTable(features=feats, labels=labels)
        weights = ProbeWeights(w=rng.normal(size=(4, 3)), b=rng.normal(size=3))
        base = probe.top1_accuracy(weights, table)
        logits = feats @ weights.w + weights.b
        for transform in (lambda z: 3 * z + 1, np.tanh, lambda z: z**3):
            preds = np.argmax(transform(logits), axis=1)
            assert float((preds == labels).mean()) == base
