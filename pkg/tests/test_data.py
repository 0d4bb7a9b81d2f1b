import numpy as np
import pytest

from sparsejepa import data
from sparsejepa.data import CIFAR_RECORD, DataFormatError


def make_cifar_file(tmp_path, n=20, seed=0, name="train.bin"):
    rng = np.random.default_rng(seed)
    records = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = rng.integers(0, 20, size=n)
    records[:, 1] = rng.integers(0, 100, size=n)
    records[:, 2:] = rng.integers(0, 256, size=(n, 3072))
    path = tmp_path / name
    path.write_bytes(records.tobytes())
    return path, records


class TestCifarParser:
    def test_parses_counts_and_values(self, tmp_path):
        path, records = make_cifar_file(tmp_path)
        handle = data.load_cifar100(str(path))
        assert len(handle) == 20
        np.testing.assert_array_equal(handle.coarse_labels, records[:, 0])
        np.testing.assert_array_equal(handle.labels, records[:, 1])
        # first record, R plane, first row
        np.testing.assert_allclose(handle.images[0, 0, 0], records[0, 2:34] / 255.0)

    def test_all_zero_record(self, tmp_path):
        path = tmp_path / "zero.bin"
        path.write_bytes(bytes(CIFAR_RECORD))
        handle = data.load_cifar100(str(path))
        assert handle.labels[0] == 0 and handle.coarse_labels[0] == 0
        assert (handle.images == 0).all()

    def test_round_trip(self, tmp_path):
        path, records = make_cifar_file(tmp_path, seed=1)
        handle = data.load_cifar100(str(path))
        assert data.serialize_cifar100(handle) == records.tobytes()

    def test_bad_length_names_offset(self, tmp_path):
        path, records = make_cifar_file(tmp_path, n=3, seed=2)
        path.write_bytes(records.tobytes() + b"\x01\x02")
        with pytest.raises(DataFormatError, match=str(3 * CIFAR_RECORD)):
            data.load_cifar100(str(path))

    def test_label_out_of_range(self, tmp_path):
        path, records = make_cifar_file(tmp_path, n=2, seed=3)
        records[1, 0] = 20
        path.write_bytes(records.tobytes())
        with pytest.raises(DataFormatError, match="coarse label"):
            data.load_cifar100(str(path))
        records[1, 0] = 0
        records[0, 1] = 200
        path.write_bytes(records.tobytes())
        with pytest.raises(DataFormatError, match="record 0"):
            data.load_cifar100(str(path))

    def test_truncations_rejected(self, tmp_path):
        path, records = make_cifar_file(tmp_path, n=10, seed=4)
        raw = records.tobytes()
        rng = np.random.default_rng(5)
        cuts = rng.integers(0, len(raw), size=100)
        for cut in cuts:
            path.write_bytes(raw[:cut])
            with pytest.raises(DataFormatError):
                data.load_cifar100(str(path), expected_records=10)


class TestSynthShapes:
    def test_count_label_definition(self):
        handle = data.synth_shapes(200, "count", np.random.default_rng(0))
        for img, label in zip(handle.images, handle.labels):
            assert 0 <= label <= 5

    def test_determinism(self):
        a = data.synth_shapes(50, "class", np.random.default_rng(7))
        b = data.synth_shapes(50, "class", np.random.default_rng(7))
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_pixel_range_and_labels(self):
        handle = data.synth_shapes(100, "class", np.random.default_rng(1))
        assert handle.images.min() >= 0.0 and handle.images.max() <= 1.0
        assert set(np.unique(handle.labels)) <= set(range(4))

    def test_class_balance(self):
        handle = data.synth_shapes(6000, "class", np.random.default_rng(2))
        freq = np.bincount(handle.labels, minlength=4) / 6000
        np.testing.assert_allclose(freq, 0.25, atol=0.05)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            data.synth_shapes(0, "class", np.random.default_rng(0))
        with pytest.raises(ValueError):
            data.synth_shapes(5, "segment", np.random.default_rng(0))

    def test_cache_round_trip(self, tmp_path):
        handle = data.synth_shapes(30, "count", np.random.default_rng(3))
        path = tmp_path / "synth.sjpd"
        data.save_synth(handle, str(path), "count")
        loaded = data.load_synth(str(path))
        assert loaded.source == "synth-count"
        np.testing.assert_array_equal(loaded.labels, handle.labels)
        np.testing.assert_allclose(loaded.images, np.round(handle.images * 255) / 255,
                                   atol=1e-12)

    def test_cache_rejects_corruption(self, tmp_path):
        handle = data.synth_shapes(5, "class", np.random.default_rng(4))
        path = tmp_path / "synth.sjpd"
        data.save_synth(handle, str(path), "class")
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(DataFormatError):
            data.load_synth(str(path))
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(DataFormatError):
            data.load_synth(str(path))


class TestNormalization:
    def test_train_stats_self_normalize(self):
        handle = data.synth_shapes(500, "class", np.random.default_rng(5))
        handle.compute_stats()
        normed = handle.normalized(np.arange(len(handle)))
        assert np.abs(normed.mean(axis=(0, 2, 3))).max() < 1e-6
        np.testing.assert_allclose(normed.std(axis=(0, 2, 3)), 1.0, atol=1e-6)

    def test_stats_required(self):
        handle = data.synth_shapes(5, "class", np.random.default_rng(6))
        with pytest.raises(ValueError):
            handle.normalized(np.arange(5))


class TestBatchIter:
    def _handle(self, n=10):
        handle = data.synth_shapes(n, "class", np.random.default_rng(8))
        handle.compute_stats()
        return handle

    def test_partial_final_batch(self):
        sizes = [len(lbl) for _, lbl in data.batch_iter(self._handle(10), 4, epoch_seed=0)]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self):
        h = self._handle(10)
        a = [lbl.tolist() for _, lbl in data.batch_iter(h, 3, epoch_seed=1, epoch=2)]
        b = [lbl.tolist() for _, lbl in data.batch_iter(h, 3, epoch_seed=1, epoch=2)]
        assert a == b
        c = [lbl.tolist() for _, lbl in data.batch_iter(h, 3, epoch_seed=1, epoch=3)]
        assert a != c

    def test_union_is_dataset_exactly_once(self):
        h = self._handle(23)
        seen = []
        for imgs, lbls in data.batch_iter(h, 5, epoch_seed=2, normalized=False):
            for img in imgs:
                seen.append(img.tobytes())
        expected = sorted(img.tobytes() for img in h.images)
        assert sorted(seen) == expected

    def test_batch_size_validated(self):
        with pytest.raises(ValueError):
            next(data.batch_iter(self._handle(4), 0, epoch_seed=0))
