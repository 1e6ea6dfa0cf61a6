"""Dataset handling: CIFAR-10 binary records, synthetic stand-in data in
the same format, class-balanced subsets, augmentation, and the paired
2-D point clusters for the translation demo."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from flowprune.tensor import ConfigError

RECORD_BYTES = 3073
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class DataError(Exception):
    """Missing, truncated, or malformed dataset input."""


@dataclass
class LabeledImageSet:
    images: np.ndarray          # [N,3,32,32] float64, normalized
    labels: np.ndarray          # [N] int64 in 0..9
    split: str = ""
    normalized: bool = field(default=True)

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# binary record format: 1 label byte + 3072 channel-major pixel bytes


def decode_records(buf, source="<bytes>"):
    """Parse raw record bytes into (labels uint8 [N], pixels uint8 [N,3072])."""
    buf = np.frombuffer(buf, dtype=np.uint8)
    if buf.size == 0 or buf.size % RECORD_BYTES != 0:
        raise DataError(
            f"{source}: size {buf.size} is not a positive multiple of {RECORD_BYTES}"
        )
    recs = buf.reshape(-1, RECORD_BYTES)
    labels = recs[:, 0]
    if labels.max() > 9:
        raise DataError(f"{source}: label byte {labels.max()} out of range 0..9")
    return labels.copy(), recs[:, 1:].copy()


def encode_records(labels, pixels):
    """Inverse of decode_records; returns raw bytes."""
    labels = np.asarray(labels, dtype=np.uint8)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), 3072)
    recs = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    recs[:, 0] = labels
    recs[:, 1:] = pixels
    return recs.tobytes()


def read_batch_file(path):
    if not os.path.isfile(path):
        raise DataError(f"missing dataset file: {path}")
    with open(path, "rb") as f:
        return decode_records(f.read(), source=path)


def write_batch_file(path, labels, pixels):
    with open(path, "wb") as f:
        f.write(encode_records(labels, pixels))


def normalize_images(pixels_uint8):
    """Bytes [N,3072] -> normalized float64 [N,3,32,32]. Applied exactly once."""
    pixels_uint8 = np.asarray(pixels_uint8)
    if pixels_uint8.dtype != np.uint8:
        raise DataError(
            f"normalize_images expects raw uint8 pixels, got {pixels_uint8.dtype}; "
            "refusing to normalize twice"
        )
    imgs = pixels_uint8.reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return (imgs - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def _assemble(parts, split):
    labels = np.concatenate([p[0] for p in parts]).astype(np.int64)
    pixels = np.concatenate([p[1] for p in parts])
    return LabeledImageSet(normalize_images(pixels), labels, split=split)


def load_cifar10(directory):
    """Load train/test splits from standard binary batch files."""
    train = _assemble([read_batch_file(os.path.join(directory, f)) for f in TRAIN_FILES], "train")
    test = _assemble([read_batch_file(os.path.join(directory, f)) for f in TEST_FILES], "test")
    return train, test


def subset(dataset, n, seed):
    """Deterministic class-balanced sample of n images.

    n must share the class count's divisibility only loosely: each class
    contributes n // 10 images, any remainder goes to the lowest class
    indices.
    """
    if n > len(dataset):
        raise DataError(f"subset of {n} requested from {len(dataset)} images")
    if n == len(dataset):
        return dataset
    rng = np.random.default_rng(seed)
    base, extra = divmod(n, 10)
    picks = []
    for c in range(10):
        want = base + (1 if c < extra else 0)
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < want:
            raise DataError(f"class {c} has {len(idx)} images, need {want}")
        order = rng.permutation(len(idx))
        picks.append(idx[order[:want]])
    sel = np.concatenate(picks)
    return LabeledImageSet(
        dataset.images[sel].copy(), dataset.labels[sel].copy(), split=dataset.split
    )


def augment_batch(images, rng):
    """Random pad-4 crop plus horizontal flip, per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(images)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# ---------------------------------------------------------------------------
# synthetic CIFAR-format data


def synthesize_cifar10_records(n, seed, difficulty=0.55):
    """Class-structured random images in raw CIFAR record arrays.

    Each class owns a smooth low-frequency template; samples mix their
    class template with per-sample smooth distortion and pixel noise.
    ``difficulty`` in [0,1) sets the noise share. Returns (labels, pixels)
    in the binary record layout.
    """
    if not 0 <= difficulty < 1:
        raise ConfigError("difficulty must be in [0, 1)")
    rng = np.random.default_rng(seed)
    tmpl_rng = np.random.default_rng(20240001)

    def smooth_field(g, shape):
        coarse = g.standard_normal((shape[0], 8, 8))
        return coarse.repeat(4, axis=1).repeat(4, axis=2)

    templates = np.stack([smooth_field(tmpl_rng, (3, 32, 32)) for _ in range(10)])
    # round-robin labels, shuffled: class counts stay balanced for any n
    labels = rng.permutation(np.arange(n) % 10).astype(np.uint8)
    pixels = np.empty((n, 3072), dtype=np.uint8)
    sig = 1.0 - difficulty
    for i in range(n):
        base = templates[labels[i]]
        distort = smooth_field(rng, (3, 32, 32)) * 0.5
        noise = rng.standard_normal((3, 32, 32))
        img = sig * base + difficulty * (0.6 * distort + noise)
        img = np.clip(0.5 + 0.18 * img, 0.0, 1.0)
        pixels[i] = np.round(img * 255.0).astype(np.uint8).reshape(3072)
    return labels, pixels


def synthetic_cifar10(n_train, n_test, seed, difficulty=0.55):
    """Synthetic train/test splits passed through the record codec, so
    they exercise the same parsing path as on-disk data."""
    lt, pt = synthesize_cifar10_records(n_train, seed, difficulty)
    lv, pv = synthesize_cifar10_records(n_test, seed + 1, difficulty)
    train = _assemble([decode_records(encode_records(lt, pt), "<synthetic train>")], "train")
    test = _assemble([decode_records(encode_records(lv, pv), "<synthetic test>")], "test")
    return train, test


def write_synthetic_cifar10(directory, n_train=50000, n_test=10000, seed=0, difficulty=0.55):
    """Materialize a synthetic dataset as standard binary batch files."""
    os.makedirs(directory, exist_ok=True)
    per = -(-n_train // len(TRAIN_FILES))
    made = 0
    for f in TRAIN_FILES:
        take = min(per, n_train - made)
        labels, pixels = synthesize_cifar10_records(take, seed + made, difficulty)
        write_batch_file(os.path.join(directory, f), labels, pixels)
        made += take
    labels, pixels = synthesize_cifar10_records(n_test, seed + 777_000, difficulty)
    write_batch_file(os.path.join(directory, TEST_FILES[0]), labels, pixels)


# ---------------------------------------------------------------------------
# 2-D paired clusters


@dataclass
class Cluster2D:
    inputs: np.ndarray    # [N,2] points in the disc around (2,6)
    targets: np.ndarray   # inputs shifted by exactly (+4,-4)
    seed: int


GRID = 2.0 ** -20  # quantization step keeping x+4 / y-4 exact in float64


def make_clusters_2d(seed=0, n=50, layout="uniform"):
    """Paired 2-D clusters: points in the disc of radius 0.5 around (2,6),
    targets shifted by exactly (4,-4).

    Coordinates are snapped to a 2^-20 grid so that the +-4 shift is
    exact in floating point and target - input == (4,-4) holds bitwise.
    ``layout`` "uniform" draws seeded uniform-area samples; "sunflower"
    is a deterministic golden-angle lattice independent of the seed.
    """
    if layout == "uniform":
        rng = np.random.default_rng(seed)
        r = (0.5 - 4 * GRID) * np.sqrt(rng.random(n))
        theta = 2 * np.pi * rng.random(n)
    elif layout == "sunflower":
        i = np.arange(n)
        r = (0.5 - 4 * GRID) * np.sqrt((i + 0.5) / n)
        theta = i * (np.pi * (3.0 - np.sqrt(5.0)))
    else:
        raise ConfigError(f"unknown cluster layout {layout!r}")
    x = 2.0 + r * np.cos(theta)
    y = 6.0 + r * np.sin(theta)
    inputs = np.stack([x, y], axis=1)
    inputs = np.round(inputs / GRID) * GRID
    targets = inputs + np.array([4.0, -4.0])
    return Cluster2D(inputs, targets, seed)


def clusters_to_csv(clusters):
    """Serialize paired clusters as CSV text with 17 significant digits."""
    lines = ["x,y,target_x,target_y"]
    for (x, y), (tx, ty) in zip(clusters.inputs, clusters.targets):
        lines.append("%.17g,%.17g,%.17g,%.17g" % (x, y, tx, ty))
    return "\n".join(lines) + "\n"
