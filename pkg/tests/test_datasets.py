"""Data pipeline tests: binary codec, normalization, subsets, synthetic
generation, augmentation, and the paired 2-D clusters."""

import numpy as np
import pytest

from flowprune import data as D
from flowprune.data import DataError
from flowprune.tensor import ConfigError


def random_records(n, seed):
    g = np.random.default_rng(seed)
    return (
        g.integers(0, 10, n).astype(np.uint8),
        g.integers(0, 256, (n, 3072)).astype(np.uint8),
    )


# ---------------------------------------------------------------------------
# binary record codec


def test_record_codec_round_trips_bitwise():
    labels, pixels = random_records(17, 0)
    got_l, got_p = D.decode_records(D.encode_records(labels, pixels))
    assert np.array_equal(got_l, labels)
    assert np.array_equal(got_p, pixels)


def test_batch_file_round_trips_bitwise(tmp_path):
    labels, pixels = random_records(9, 1)
    path = tmp_path / "batch.bin"
    D.write_batch_file(path, labels, pixels)
    assert path.stat().st_size == 9 * D.RECORD_BYTES
    got_l, got_p = D.read_batch_file(path)
    assert np.array_equal(got_l, labels) and np.array_equal(got_p, pixels)


def test_decode_rejects_truncated_buffer():
    labels, pixels = random_records(3, 2)
    buf = D.encode_records(labels, pixels)[:-1]
    with pytest.raises(DataError):
        D.decode_records(buf)
    with pytest.raises(DataError):
        D.decode_records(b"")


def test_decode_rejects_label_out_of_range():
    labels, pixels = random_records(3, 3)
    labels[1] = 10
    with pytest.raises(DataError):
        D.decode_records(D.encode_records(labels, pixels))


def test_missing_file_raises(tmp_path):
    with pytest.raises(DataError):
        D.read_batch_file(tmp_path / "nope.bin")


# ---------------------------------------------------------------------------
# normalization


def test_normalize_matches_hand_formula():
    pixels = np.full((1, 3072), 128, dtype=np.uint8)
    imgs = D.normalize_images(pixels)
    want = (128 / 255.0 - D.CIFAR_MEAN) / D.CIFAR_STD
    assert imgs.shape == (1, 3, 32, 32)
    for c in range(3):
        assert np.allclose(imgs[0, c], want[c], atol=1e-15)


def test_normalize_refuses_non_uint8():
    with pytest.raises(DataError):
        D.normalize_images(np.zeros((1, 3072), dtype=np.float64))


def test_normalize_preserves_channel_major_layout():
    pixels = np.zeros((1, 3072), dtype=np.uint8)
    pixels[0, 0] = 255          # first red pixel
    pixels[0, 1024] = 255       # first green pixel
    imgs = D.normalize_images(pixels)
    assert imgs[0, 0, 0, 0] == pytest.approx((1.0 - D.CIFAR_MEAN[0]) / D.CIFAR_STD[0])
    assert imgs[0, 1, 0, 0] == pytest.approx((1.0 - D.CIFAR_MEAN[1]) / D.CIFAR_STD[1])


# ---------------------------------------------------------------------------
# loading and subsets


def make_disk_dataset(tmp_path, n_per_file=20, seed=0):
    g = np.random.default_rng(seed)
    for i, fname in enumerate(D.TRAIN_FILES):
        labels = np.tile(np.arange(10), n_per_file // 10).astype(np.uint8)
        pixels = g.integers(0, 256, (n_per_file, 3072)).astype(np.uint8)
        D.write_batch_file(tmp_path / fname, labels, pixels)
    labels = np.tile(np.arange(10), n_per_file // 10).astype(np.uint8)
    pixels = g.integers(0, 256, (n_per_file, 3072)).astype(np.uint8)
    D.write_batch_file(tmp_path / D.TEST_FILES[0], labels, pixels)


def test_load_cifar10_concatenates_train_files(tmp_path):
    make_disk_dataset(tmp_path)
    train, test = D.load_cifar10(str(tmp_path))
    assert len(train) == 100 and len(test) == 20
    assert train.images.shape == (100, 3, 32, 32)
    assert train.labels.dtype == np.int64


def test_subset_is_class_balanced_and_deterministic(tmp_path):
    make_disk_dataset(tmp_path)
    train, _ = D.load_cifar10(str(tmp_path))
    sub = D.subset(train, 40, seed=5)
    counts = np.bincount(sub.labels, minlength=10)
    assert np.all(counts == 4)
    again = D.subset(train, 40, seed=5)
    assert np.array_equal(sub.images, again.images)
    assert not np.array_equal(sub.images, D.subset(train, 40, seed=6).images)


def test_subset_remainder_goes_to_low_classes(tmp_path):
    make_disk_dataset(tmp_path)
    train, _ = D.load_cifar10(str(tmp_path))
    counts = np.bincount(D.subset(train, 23, seed=0).labels, minlength=10)
    assert counts.tolist() == [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]


def test_subset_too_large_raises(tmp_path):
    make_disk_dataset(tmp_path)
    train, _ = D.load_cifar10(str(tmp_path))
    with pytest.raises(DataError):
        D.subset(train, 101, seed=0)


# ---------------------------------------------------------------------------
# synthetic data


def test_synthetic_labels_are_class_balanced():
    labels, _ = D.synthesize_cifar10_records(200, seed=4)
    assert np.bincount(labels, minlength=10).tolist() == [20] * 10
    labels, _ = D.synthesize_cifar10_records(57, seed=4)
    counts = np.bincount(labels, minlength=10)
    assert counts.min() == 5 and counts.max() == 6 and counts.sum() == 57


def test_synthetic_is_deterministic_and_seed_sensitive():
    a = D.synthesize_cifar10_records(30, seed=4)
    b = D.synthesize_cifar10_records(30, seed=4)
    c = D.synthesize_cifar10_records(30, seed=5)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0], b[0])
    assert not np.array_equal(a[1], c[1])


def test_synthetic_classes_are_separable_templates():
    # same class shares a template: within-class pixel correlation beats
    # between-class at low difficulty
    labels, pixels = D.synthesize_cifar10_records(60, seed=6, difficulty=0.2)
    f = pixels.astype(np.float64)
    f -= f.mean(axis=1, keepdims=True)
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    sim = f @ f.T
    same = (labels[:, None] == labels[None, :]) & ~np.eye(60, dtype=bool)
    assert sim[same].mean() > sim[~same].mean() + 0.2


def test_synthetic_difficulty_bounds():
    with pytest.raises(ConfigError):
        D.synthesize_cifar10_records(10, seed=0, difficulty=1.0)
    with pytest.raises(ConfigError):
        D.synthesize_cifar10_records(10, seed=0, difficulty=-0.1)


def test_synthetic_split_round_trips_through_codec():
    train, test = D.synthetic_cifar10(40, 20, seed=9)
    assert len(train) == 40 and len(test) == 20
    assert train.images.shape == (40, 3, 32, 32)


def test_write_synthetic_then_load(tmp_path):
    D.write_synthetic_cifar10(str(tmp_path), n_train=50, n_test=20, seed=1)
    train, test = D.load_cifar10(str(tmp_path))
    assert len(train) == 50 and len(test) == 20


# ---------------------------------------------------------------------------
# augmentation


def test_augment_is_deterministic_under_seeded_rng():
    imgs = np.random.default_rng(0).standard_normal((6, 3, 8, 8))
    a = D.augment_batch(imgs, np.random.default_rng(42))
    b = D.augment_batch(imgs, np.random.default_rng(42))
    assert np.array_equal(a, b)
    assert a.shape == imgs.shape


def test_augment_values_come_from_padded_source():
    imgs = np.random.default_rng(1).standard_normal((4, 3, 8, 8))
    out = D.augment_batch(imgs, np.random.default_rng(7))
    allowed = set(imgs.ravel().tolist()) | {0.0}
    assert set(out.ravel().tolist()) <= allowed


# ---------------------------------------------------------------------------
# paired 2-D clusters


def test_clusters_sit_in_disc_around_center():
    cl = D.make_clusters_2d(seed=3, n=50)
    r = np.hypot(cl.inputs[:, 0] - 2.0, cl.inputs[:, 1] - 6.0)
    assert len(cl.inputs) == 50
    assert r.max() <= 0.5
    assert cl.inputs.min() > 0  # whole cluster in the positive quadrant


def test_cluster_targets_are_exact_translations():
    cl = D.make_clusters_2d(seed=3, n=50)
    diff = cl.targets - cl.inputs
    assert np.all(diff[:, 0] == 4.0)
    assert np.all(diff[:, 1] == -4.0)


def test_cluster_coordinates_snap_to_grid():
    cl = D.make_clusters_2d(seed=3, n=50)
    steps = cl.inputs / D.GRID
    assert np.array_equal(steps, np.round(steps))


def test_cluster_layouts():
    uni = D.make_clusters_2d(seed=3, n=20, layout="uniform")
    sun1 = D.make_clusters_2d(seed=3, n=20, layout="sunflower")
    sun2 = D.make_clusters_2d(seed=99, n=20, layout="sunflower")
    assert np.array_equal(sun1.inputs, sun2.inputs)  # layout ignores seed
    assert not np.array_equal(uni.inputs, sun1.inputs)
    with pytest.raises(ConfigError):
        D.make_clusters_2d(layout="spiral")


def test_clusters_csv_format():
    cl = D.make_clusters_2d(seed=3, n=4)
    text = D.clusters_to_csv(cl)
    lines = text.strip().split("\n")
    assert lines[0] == "x,y,target_x,target_y"
    assert len(lines) == 5
    x, y, tx, ty = (float(v) for v in lines[1].split(","))
    assert tx - x == 4.0 and ty - y == -4.0
