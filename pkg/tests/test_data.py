import gzip

import numpy as np
import pytest

from kcn.data import (
    DATASETS,
    DatasetSpec,
    IdxFormatError,
    augment_shift,
    denormalize,
    iterate_batches,
    load_dataset,
    load_idx,
    load_mnist,
    normalize,
    subset_per_class,
)

from mnist_sample import write_idx

MNIST = DATASETS["mnist"]


class TestLoadIdx:
    def test_hand_crafted_image(self, tmp_path):
        # magic 0x00000803, dims 1,2,2, then the four pixel bytes
        blob = bytes.fromhex("00000803") + bytes.fromhex("00000001 00000002 00000002") + bytes([0, 128, 255, 64])
        (tmp_path / "img").write_bytes(blob)
        img = load_idx(tmp_path / "img")
        assert img.shape == (1, 2, 2)
        np.testing.assert_array_equal(img.reshape(-1), [0.0, 128 / 255, 1.0, 64 / 255])

    def test_labels_are_integers(self, tmp_path):
        write_idx(tmp_path / "lab", np.array([3, 1, 4], dtype=np.uint8))
        lab = load_idx(tmp_path / "lab")
        assert lab.dtype == np.int64
        assert lab.tolist() == [3, 1, 4]

    def test_zero_items(self, tmp_path):
        write_idx(tmp_path / "empty", np.zeros((0, 28, 28), dtype=np.uint8))
        assert load_idx(tmp_path / "empty").shape == (0, 28, 28)

    def test_gzip_transparent(self, tmp_path):
        write_idx(tmp_path / "img.gz", np.full((2, 3, 3), 255, dtype=np.uint8))
        with gzip.open(tmp_path / "img.gz") as fh:
            assert fh.read(4) == bytes.fromhex("00000803")
        np.testing.assert_array_equal(load_idx(tmp_path / "img.gz"), np.ones((2, 3, 3)))

    def test_bad_magic_names_value(self, tmp_path):
        (tmp_path / "bad").write_bytes(bytes.fromhex("12345678") + bytes(16))
        with pytest.raises(IdxFormatError, match="0x12345678"):
            load_idx(tmp_path / "bad")

    def test_truncated_payload(self, tmp_path):
        blob = bytes.fromhex("00000803 00000002 00000002 00000002") + bytes(5)
        (tmp_path / "short").write_bytes(blob)
        with pytest.raises(IdxFormatError, match="payload"):
            load_idx(tmp_path / "short")

    def test_mnist_directory_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((3, 28, 28), dtype=np.uint8))
        write_idx(tmp_path / "train-labels-idx1-ubyte", np.zeros(2, dtype=np.uint8))
        with pytest.raises(IdxFormatError, match="3 images but 2 labels"):
            load_mnist(tmp_path, "train")

    def test_sample_directory_in_unit_range(self, mnist_root):
        x, y = load_mnist(mnist_root, "test")
        assert x.shape[1:] == (1, 28, 28)
        assert x.min() >= 0.0 and x.max() <= 1.0
        assert set(np.unique(y)) == set(range(10))


class TestAugmentShift:
    def test_zero_shift_identity(self):
        img = np.random.default_rng(0).random((1, 28, 28))
        np.testing.assert_array_equal(augment_shift(img, shift=(0, 0)), img)

    def test_column_moves_right(self):
        img = np.zeros((1, 28, 28))
        img[0, 10, 0] = 1.0
        out = augment_shift(img, shift=(4, 0))
        assert out[0, 10, 4] == 1.0 and out.sum() == 1.0

    def test_in_frame_content_conserved(self):
        img = np.zeros((1, 28, 28))
        img[0, 8:20, 8:20] = np.random.default_rng(1).random((12, 12)) + 0.1
        rng = np.random.default_rng(2)
        for _ in range(20):
            out = augment_shift(img, max_shift=4, rng=rng)
            assert np.count_nonzero(out) == np.count_nonzero(img)
            np.testing.assert_allclose(out.sum(), img.sum())

    def test_random_shift_bounded(self):
        img = np.zeros((1, 28, 28))
        img[0, 14, 14] = 1.0
        rng = np.random.default_rng(3)
        for _ in range(50):
            r, c = np.argwhere(augment_shift(img, 4, rng)[0])[0]
            assert abs(r - 14) <= 4 and abs(c - 14) <= 4

    def test_shift_must_fit(self):
        with pytest.raises(ValueError):
            augment_shift(np.zeros((1, 4, 4)), max_shift=4)


class TestNormalize:
    def test_mean_maps_to_zero(self):
        assert normalize(np.full((1, 1, 1), 0.1307), MNIST)[0, 0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_zero_image(self):
        out = normalize(np.zeros((1, 28, 28)), MNIST)
        np.testing.assert_allclose(out, -0.1307 / 0.3081)
        assert out[0, 0, 0] == pytest.approx(-0.4242, abs=1e-4)

    @pytest.mark.parametrize("name", sorted(DATASETS))
    def test_round_trip(self, name):
        spec = DATASETS[name]
        x = np.random.default_rng(0).random((4,) + spec.shape)
        np.testing.assert_allclose(denormalize(normalize(x, spec), spec), x, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            normalize(np.zeros((3, 28, 28)), MNIST)

    def test_published_constants(self):
        assert DATASETS["cifar10"].mean == (0.5071, 0.4867, 0.4408)
        assert DATASETS["cifar10"].std == (0.2675, 0.2565, 0.2761)
        assert DATASETS["svhn"].mean == (0.5, 0.5, 0.5) and DATASETS["svhn"].std == (0.5, 0.5, 0.5)

    def test_std_must_be_positive(self):
        with pytest.raises(ValueError):
            DatasetSpec("bad", (1, 2, 2), 2, (0.0,), (0.0,))


class TestSubsetAndBatches:
    def test_subset_is_balanced_and_deterministic(self):
        labels = np.random.default_rng(0).integers(0, 10, size=1000)
        a = subset_per_class(labels, 20, seed=5)
        assert np.array_equal(a, subset_per_class(labels, 20, seed=5))
        assert np.all(np.bincount(labels[a], minlength=10) == 20)
        assert not np.array_equal(a, subset_per_class(labels, 20, seed=6))

    def test_subset_too_large(self):
        with pytest.raises(ValueError, match="fewer than"):
            subset_per_class(np.array([0, 0, 1]), 2)

    def test_eval_batches_unaugmented_and_ordered(self):
        x = np.random.default_rng(0).random((10, 1, 28, 28))
        y = np.arange(10)
        batches = list(iterate_batches(x, y, 4, spec=MNIST))
        assert [len(b[1]) for b in batches] == [4, 4, 2]
        np.testing.assert_allclose(np.concatenate([b[0] for b in batches]), normalize(x, MNIST))


class TestColorLoaders:
    def test_cifar10_records(self, tmp_path, rng):
        pixels = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
        labels = np.array([7, 0, 9], dtype=np.uint8)
        rec = np.concatenate([labels[:, None], pixels.reshape(3, -1)], axis=1)
        (tmp_path / "test_batch.bin").write_bytes(rec.tobytes())
        x, y = load_dataset("cifar10", tmp_path, "test")
        assert x.shape == (3, 3, 32, 32) and y.tolist() == [7, 0, 9]
        np.testing.assert_array_equal(x, pixels / 255.0)

    def test_cifar10_truncated(self, tmp_path):
        (tmp_path / "test_batch.bin").write_bytes(b"\x00" * 3000)
        with pytest.raises(ValueError, match="3073"):
            load_dataset("cifar10", tmp_path, "test")

    def test_svhn_mat(self, tmp_path, rng):
        from scipy.io import savemat

        hwcn = rng.integers(0, 256, size=(32, 32, 3, 4), dtype=np.uint8)
        savemat(tmp_path / "test_32x32.mat", {"X": hwcn, "y": np.array([[10], [1], [5], [10]])})
        x, y = load_dataset("svhn", tmp_path, "test")
        assert x.shape == (4, 3, 32, 32) and y.tolist() == [0, 1, 5, 0]
        np.testing.assert_array_equal(x[2, 1], hwcn[:, :, 1, 2] / 255.0)

    def test_unknown_dataset(self, tmp_path):
        with pytest.raises(KeyError):
            load_dataset("imagenet", tmp_path, "test")
