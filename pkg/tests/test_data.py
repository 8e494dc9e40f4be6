import struct

import numpy as np
import pytest

from fortnet.data import (Dataset, FormatError, SyntheticSpec, batch_iter,
                          generate_synthetic, load_idx, sphere_points)


def write_idx_pair(tmp_path, pixels, labels):
    """Build a byte-exact IDX image/label pair: pixels is N x H x W uint8."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    image_path = tmp_path / "images.idx"
    label_path = tmp_path / "labels.idx"
    image_path.write_bytes(struct.pack(">IIII", 0x00000803, n, h, w)
                           + pixels.tobytes())
    label_path.write_bytes(struct.pack(">II", 0x00000801, n)
                           + bytes(labels))
    return image_path, label_path


class TestLoadIdx:
    def test_hand_built_fixture(self, tmp_path):
        pixels = np.array([[[0, 255], [128, 64]],
                           [[255, 0], [0, 255]]], dtype=np.uint8)
        ip, lp = write_idx_pair(tmp_path, pixels, [3, 7])
        ds = load_idx(ip, lp)
        assert ds.images.shape == (2, 1, 2, 2)
        expected = pixels.astype(float)[:, None] / 255.0
        assert np.array_equal(ds.images, expected)
        assert ds.images[0, 0, 0, 0] == 0.0
        assert ds.images[0, 0, 0, 1] == 1.0
        assert np.array_equal(ds.labels, [3, 7])

    def test_reload_is_bit_identical(self, tmp_path):
        pixels = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        ip, lp = write_idx_pair(tmp_path, pixels, [0, 1])
        a = load_idx(ip, lp)
        b = load_idx(ip, lp)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_bad_image_magic(self, tmp_path):
        ip, lp = write_idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
        raw = bytearray(ip.read_bytes())
        raw[3] = 0x99
        ip.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="bad magic"):
            load_idx(ip, lp)

    def test_truncated_payload_names_offset(self, tmp_path):
        ip, lp = write_idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1])
        ip.write_bytes(ip.read_bytes()[:-3])
        with pytest.raises(FormatError, match="offset"):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp = write_idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1])
        raw = bytearray(lp.read_bytes())
        raw[7] = 9
        lp.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="does not match"):
            load_idx(ip, lp)

    def test_limit_subsets(self, tmp_path):
        pixels = np.arange(16, dtype=np.uint8).reshape(4, 2, 2)
        ip, lp = write_idx_pair(tmp_path, pixels, [0, 1, 2, 3])
        ds = load_idx(ip, lp, limit=2)
        assert len(ds) == 2


class TestDatasetInvariants:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            Dataset(np.array([[1.5]]), np.array([0]), 2)

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[0.5]]), np.array([5]), 2)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            Dataset(np.zeros((2, 3)), np.zeros(3, dtype=int), 2)


class TestSynthetic:
    def test_purity(self):
        spec = SyntheticSpec("gaussian_clusters", 50, dimension=3, seed=9)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_sphere_radii_exact_without_noise(self):
        spec = SyntheticSpec("concentric_spheres", 30, dimension=2,
                             noise=0.0, seed=2, radii=(0.5, 1.0))
        pts = sphere_points(spec)
        norms = np.linalg.norm(pts, axis=1)
        assert np.allclose(norms[:30], 0.5)
        assert np.allclose(norms[30:], 1.0)

    def test_sphere_classes_ordered(self):
        spec = SyntheticSpec("concentric_spheres", 10, dimension=3, seed=1)
        ds = generate_synthetic(spec)
        assert set(ds.labels) == {0, 1}

    def test_separated_clusters_linear_probe(self):
        # margin >= 6 std-devs: least squares on the labels must nail it
        spec = SyntheticSpec("gaussian_clusters", 200, dimension=4,
                             separation=12.0, seed=5)
        ds = generate_synthetic(spec)
        x = np.hstack([ds.images, np.ones((len(ds), 1))])
        w, *_ = np.linalg.lstsq(x, 2.0 * ds.labels - 1.0, rcond=None)
        pred = (x @ w > 0).astype(int)
        assert (pred == ds.labels).mean() >= 0.99

    def test_two_moons_shape(self):
        ds = generate_synthetic(SyntheticSpec("two_moons", 25, seed=3))
        assert ds.images.shape == (50, 2)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown synthetic kind"):
            generate_synthetic(SyntheticSpec("spiral", 10))


class TestBatchIter:
    def make(self, n=10):
        return Dataset(np.linspace(0, 1, n * 2).reshape(n, 2),
                       np.arange(n) % 3, 3)

    def test_no_shuffle_preserves_order(self):
        ds = self.make()
        batches = list(batch_iter(ds, 4, shuffle=False))
        assert np.array_equal(np.concatenate([b[0] for b in batches]),
                              ds.images)

    def test_same_seed_same_permutation(self):
        ds = self.make()
        a = [b[1] for b in batch_iter(ds, 3, seed=11)]
        b = [b[1] for b in batch_iter(ds, 3, seed=11)]
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_union_is_the_dataset_without_duplicates(self):
        ds = self.make(13)
        rows = np.concatenate([b[0] for b in batch_iter(ds, 5, seed=2)])
        assert rows.shape == ds.images.shape
        assert np.array_equal(np.sort(rows, axis=0), np.sort(ds.images, axis=0))

    def test_short_final_batch_kept(self):
        sizes = [len(b[1]) for b in batch_iter(self.make(10), 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            list(batch_iter(self.make(), 0))
