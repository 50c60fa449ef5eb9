"""IDX parsing and synthetic blobs."""

import gzip
import struct

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from datasets import Dataset, load_idx, make_blobs, require_nonempty, save_idx
from errors import (
    DataError,
    EmptyDatasetError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    InfeasiblePackingError,
    ShapeError,
)


def write_images(path, pixels: np.ndarray, magic=2051):
    n, h, w = pixels.shape
    path.write_bytes(struct.pack(">IIII", magic, n, h, w) + pixels.astype(np.uint8).tobytes())


def write_labels(path, labels, magic=2049):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + bytes(labels))


class TestLoadIdx:
    def test_minimal_file(self, tmp_path):
        write_images(tmp_path / "img", np.zeros((1, 2, 2)))
        write_labels(tmp_path / "lbl", [7])
        dataset = load_idx(tmp_path / "img", tmp_path / "lbl")
        assert dataset.images.shape == (1, 1, 2, 2)
        assert not dataset.images.any()
        assert dataset.labels.tolist() == [7]

    def test_byte_scaling(self, tmp_path):
        write_images(tmp_path / "img", np.array([[[0, 255], [51, 255]]]))
        write_labels(tmp_path / "lbl", [0])
        images = load_idx(tmp_path / "img", tmp_path / "lbl").images
        np.testing.assert_allclose(images[0, 0], [[0.0, 1.0], [0.2, 1.0]])

    def test_label_magic_in_image_loader(self, tmp_path):
        write_labels(tmp_path / "lbl", [0])
        with pytest.raises(IdxMagicError):
            load_idx(tmp_path / "lbl", tmp_path / "lbl")

    def test_truncated_pixels(self, tmp_path):
        write_images(tmp_path / "img", np.zeros((2, 3, 3)))
        (tmp_path / "img").write_bytes((tmp_path / "img").read_bytes()[:-1])
        write_labels(tmp_path / "lbl", [0, 1])
        with pytest.raises(IdxTruncatedError):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "img").write_bytes(struct.pack(">II", 2051, 1))
        write_labels(tmp_path / "lbl", [0])
        with pytest.raises(IdxTruncatedError):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_count_mismatch(self, tmp_path):
        write_images(tmp_path / "img", np.zeros((2, 2, 2)))
        write_labels(tmp_path / "lbl", [0, 1, 2])
        with pytest.raises(IdxCountMismatchError):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_idx(tmp_path / "nope", tmp_path / "nope")

    def test_gzip(self, tmp_path):
        pixels = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        with gzip.open(tmp_path / "img.gz", "wb") as f:
            f.write(struct.pack(">IIII", 2051, 2, 2, 2) + pixels.tobytes())
        with gzip.open(tmp_path / "lbl.gz", "wb") as f:
            f.write(struct.pack(">II", 2049, 2) + bytes([1, 0]))
        dataset = load_idx(tmp_path / "img.gz", tmp_path / "lbl.gz", split="test")
        np.testing.assert_allclose(dataset.images[:, 0], pixels / 255.0)
        assert dataset.split == "test"

    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_writer_reader_identity(self, tmp_path, suffix):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(5, 1, 4, 3))
        original = Dataset(pixels / 255.0, rng.integers(0, 10, size=5), 10)
        save_idx(original, tmp_path / f"img{suffix}", tmp_path / f"lbl{suffix}")
        loaded = load_idx(tmp_path / f"img{suffix}", tmp_path / f"lbl{suffix}")
        np.testing.assert_array_equal(loaded.images, original.images)
        np.testing.assert_array_equal(loaded.labels, original.labels)


class TestDataset:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(DataError):
            Dataset(np.full((1, 1, 2, 2), 1.5), np.array([0]), 2)

    def test_rejects_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0]), 2)

    def test_rejects_single_class(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((1, 1, 2, 2)), np.array([0]), 1)

    def test_batches_cover_everything(self, blobs):
        sizes = [len(y) for _, y in blobs.batches(7)]
        assert sum(sizes) == len(blobs) and max(sizes) == 7

    def test_require_nonempty(self, blobs):
        assert require_nonempty(blobs) is blobs
        with pytest.raises(EmptyDatasetError):
            require_nonempty(blobs.subset(0))


class TestBlobs:
    def test_zero_spread_points_are_centers(self):
        dataset = make_blobs(4, 3, 2, 0.0, np.random.default_rng(1))
        points = dataset.images[:, 0, 0, :]
        for k in range(3):
            assert np.unique(points[dataset.labels == k], axis=0).shape[0] == 1

    def test_balanced_labels(self, blobs):
        assert np.bincount(blobs.labels).tolist() == [20, 20, 20]

    def test_shape_and_range(self, blobs):
        assert blobs.images.shape == (60, 1, 1, 2)
        assert blobs.images.min() >= 0 and blobs.images.max() <= 1

    @pytest.mark.parametrize("seed", range(5))
    def test_nearest_centroid_is_perfect(self, seed):
        dataset = make_blobs(30, 4, 3, 0.03, np.random.default_rng(seed))
        points = dataset.images[:, 0, 0, :]
        centroids = np.stack([points[dataset.labels == k].mean(axis=0) for k in range(4)])
        predicted = np.argmin(cdist(points, centroids), axis=1)
        assert np.array_equal(predicted, dataset.labels)

    def test_seeded_is_deterministic(self):
        a = make_blobs(5, 3, 2, 0.05, np.random.default_rng(4))
        b = make_blobs(5, 3, 2, 0.05, np.random.default_rng(4))
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_infeasible_packing(self):
        with pytest.raises(InfeasiblePackingError):
            make_blobs(2, 10, 1, 0.1, np.random.default_rng(0))

    def test_invalid_sizes(self):
        with pytest.raises(ShapeError):
            make_blobs(2, 1, 2, 0.1, np.random.default_rng(0))
