import gzip
import struct

import numpy as np
from pytest import approx, fixture, raises

from ffgaf_snn.data import (Dataset, SyntheticPreset, batches, load_cifar10, load_idx, save_cifar10,
                            save_idx, standardize, subset, synthetic_classes)
from ffgaf_snn.exceptions import (BadMagicError, ConfigError, CountMismatchError, DataError, TruncatedFileError)
from tests.util import data_dir, slow


def idx_images(pixels: np.ndarray) -> bytes:
    n, rows, cols = pixels.shape
    return struct.pack('>4I', 0x803, n, rows, cols) + pixels.astype(np.uint8).tobytes()


def idx_labels(labels) -> bytes:
    return struct.pack('>2I', 0x801, len(labels)) + bytes(labels)


@fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = tmp_path / 'images.idx'
    labels = tmp_path / 'labels.idx'
    images.write_bytes(idx_images(rng.integers(0, 256, size=(6, 4, 5))))
    labels.write_bytes(idx_labels([0, 1, 2, 3, 4, 5]))
    return images, labels


def test_load_idx_single_zero_image(tmp_path):
    images = tmp_path / 'i'
    labels = tmp_path / 'l'
    images.write_bytes(idx_images(np.zeros((1, 28, 28))))
    labels.write_bytes(idx_labels([7]))
    d = load_idx(images, labels)
    assert len(d) == 1
    assert d.sample_shape == (1, 28, 28)
    assert not d.images.any()
    assert d.labels.tolist() == [7]
    assert d.classes == 10


def test_load_idx_scales(idx_pair):
    d = load_idx(*idx_pair, name='fashion_mnist', split='test')
    assert d.images.dtype == np.float32
    assert 0 <= d.images.min() and d.images.max() <= 1
    assert d.split == 'test'
    assert d.name == 'fashion_mnist'


def test_load_idx_gzip(tmp_path, idx_pair):
    images, labels = idx_pair
    gz = tmp_path / 'images.idx.gz'
    with gzip.open(gz, 'wb') as f:
        f.write(images.read_bytes())
    assert np.array_equal(load_idx(gz, labels).images, load_idx(images, labels).images)


def test_load_idx_truncated_header(tmp_path, idx_pair):
    _, labels = idx_pair
    bad = tmp_path / 'bad'
    bad.write_bytes(b'\x00\x00\x08\x03\x00')
    with raises(TruncatedFileError, match='truncated'):
        load_idx(bad, labels)


def test_load_idx_truncated_body(tmp_path, idx_pair):
    images, labels = idx_pair
    bad = tmp_path / 'bad'
    bad.write_bytes(images.read_bytes()[:-1])
    with raises(TruncatedFileError):
        load_idx(bad, labels)


def test_load_idx_bad_magic(tmp_path, idx_pair):
    images, labels = idx_pair
    bad = tmp_path / 'bad'
    bad.write_bytes(struct.pack('>I', 0x801) + images.read_bytes()[4:])
    with raises(BadMagicError):
        load_idx(bad, labels)


def test_load_idx_count_mismatch(tmp_path, idx_pair):
    images, _ = idx_pair
    labels = tmp_path / 'short'
    labels.write_bytes(idx_labels([0, 1]))
    with raises(CountMismatchError):
        load_idx(images, labels)


def test_load_idx_label_out_of_range(tmp_path, idx_pair):
    images, _ = idx_pair
    labels = tmp_path / 'big'
    labels.write_bytes(idx_labels([0, 1, 2, 3, 4, 12]))
    with raises(DataError):
        load_idx(images, labels)


def test_load_missing_file(tmp_path, idx_pair):
    with raises(DataError):
        load_idx(tmp_path / 'nope', idx_pair[1])


def test_idx_round_trip(tmp_path, idx_pair):
    images, labels = idx_pair
    out_images = tmp_path / 'out_images'
    out_labels = tmp_path / 'out_labels'
    save_idx(load_idx(images, labels), out_images, out_labels)
    assert out_images.read_bytes() == images.read_bytes()
    assert out_labels.read_bytes() == labels.read_bytes()


def cifar_record(label: int, value: int) -> bytes:
    return bytes([label]) + bytes([value]) * 3072


def test_load_cifar_record(tmp_path):
    path = tmp_path / 'data_batch_1.bin'
    path.write_bytes(cifar_record(3, 255))
    d = load_cifar10([path])
    assert len(d) == 1
    assert d.sample_shape == (3, 32, 32)
    assert np.all(d.images == 1)
    assert d.labels.tolist() == [3]


def test_load_cifar_planes(tmp_path):
    path = tmp_path / 'b.bin'
    path.write_bytes(bytes([1]) + bytes([0]) * 1024 + bytes([255]) * 1024 + bytes([51]) * 1024)
    image = load_cifar10([path]).images[0]
    assert image[0].max() == 0
    assert image[1].min() == 1
    assert image[2] == approx(np.full((32, 32), 0.2))


def test_load_cifar_concatenates(tmp_path):
    paths = []
    for i in range(3):
        path = tmp_path / f'b{i}.bin'
        path.write_bytes(cifar_record(i, 0) * (i + 1))
        paths.append(path)
    d = load_cifar10(paths, split='test')
    assert len(d) == 6
    assert d.labels.tolist() == [0, 1, 1, 2, 2, 2]


def test_load_cifar_bad_length(tmp_path):
    path = tmp_path / 'b.bin'
    path.write_bytes(cifar_record(0, 0) + b'\x00')
    with raises(DataError, match='3073'):
        load_cifar10([path])


def test_load_cifar_empty(tmp_path):
    path = tmp_path / 'b.bin'
    path.write_bytes(b'')
    with raises(DataError):
        load_cifar10([path])
    with raises(DataError):
        load_cifar10([])


def test_cifar_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / 'b.bin'
    path.write_bytes(b''.join(bytes([int(rng.integers(10))]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
                              for _ in range(4)))
    out = tmp_path / 'out.bin'
    save_cifar10(load_cifar10([path]), out)
    assert out.read_bytes() == path.read_bytes()


def test_dataset_validation():
    with raises(DataError):
        Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=int), 'x', 2)
    with raises(CountMismatchError):
        Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3, dtype=int), 'x', 2)
    with raises(DataError):
        Dataset(np.full((1, 1, 2, 2), np.nan), np.zeros(1, dtype=int), 'x', 2)


def test_standardize_moments():
    d = synthetic_classes(3, 50, (2, 4, 4), seed=4)
    out, stats = standardize(d)
    assert out.images.mean(axis=(0, 2, 3)) == approx([0, 0], abs=1e-5)
    assert out.images.std(axis=(0, 2, 3)) == approx([1, 1], abs=1e-4)
    assert stats.mean.shape == (2,)


def test_standardize_constant_channel():
    images = np.ones((4, 2, 2, 2))
    images[:, 1] = np.arange(4)[:, None, None]
    out, stats = standardize(Dataset(images, np.zeros(4, dtype=int), 'x', 1))
    assert not out.images[:, 0].any()
    assert stats.std[0] == 0


def test_standardize_reuses_stats():
    train = synthetic_classes(2, 20, (1, 3, 3), seed=0)
    test = synthetic_classes(2, 5, (1, 3, 3), seed=0, split='test')
    _, stats = standardize(train)
    out, used = standardize(test, stats)
    assert used is stats
    assert out.images == approx((test.images - stats.mean[0]) / stats.std[0], abs=1e-5)
    with raises(ConfigError):
        standardize(synthetic_classes(2, 5, (3, 2, 2)), stats)


def test_synthetic_deterministic():
    a = synthetic_classes(4, 10, seed=3)
    b = synthetic_classes(4, 10, seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synthetic_classes(4, 10, seed=4).images)


def test_synthetic_splits_share_means():
    train = synthetic_classes(3, 400, (1, 4, 4), separation=20, seed=0, dtype=np.float64)
    test = synthetic_classes(3, 400, (1, 4, 4), separation=20, seed=0, dtype=np.float64, split='test')
    assert not np.array_equal(np.sort(train.images, axis=None), np.sort(test.images, axis=None))
    for c in range(3):
        assert train.images[train.labels == c].mean(axis=0) == approx(test.images[test.labels == c].mean(axis=0),
                                                                       abs=0.3)


def test_synthetic_single_class():
    d = synthetic_classes(1, 5, 4)
    assert d.sample_shape == (4, 1, 1)
    assert d.labels.tolist() == [0] * 5


def test_synthetic_skewed():
    d = synthetic_classes(3, 2000, (1, 4, 4), separation=100, seed=0, preset=SyntheticPreset.skewed, dtype=np.float64)
    m0 = d.images[d.labels == 0].mean(axis=0).ravel()
    m1 = d.images[d.labels == 1].mean(axis=0).ravel()
    m2 = d.images[d.labels == 2].mean(axis=0).ravel()

    def cos(a, b):
        return a @ b / np.linalg.norm(a) / np.linalg.norm(b)

    assert cos(m0, m1) == approx(0.9, abs=1e-2)
    assert cos(m0, m2) == approx(0, abs=1e-2)


def test_synthetic_textures():
    d = synthetic_classes(4, 3000, (1, 8, 8), separation=8.0, seed=2, dtype=np.float64)
    means = np.stack([d.images[d.labels == c].mean(axis=0).ravel() for c in range(4)])
    assert np.linalg.norm(means, axis=1) == approx([8.0] * 4, rel=0.05)
    assert np.abs(means @ means.T - np.diag(np.diag(means @ means.T))).max() < 2.0
    # no pattern is a constant offset
    assert np.abs(means.mean(axis=1)).max() < 0.1
    # every pattern flips sign between some neighbouring pixels
    for m in means.reshape(4, 8, 8):
        assert (np.diff(np.sign(m), axis=0) != 0).any() or (np.diff(np.sign(m), axis=1) != 0).any()


def test_synthetic_flat_shape():
    d = synthetic_classes(3, 2000, 5, separation=50.0, seed=1, dtype=np.float64)
    means = np.stack([d.images[d.labels == c].mean(axis=0).ravel() for c in range(3)])
    assert np.sort(np.abs(means), axis=1)[:, -1] == approx([50.0] * 3, rel=0.01)


def test_synthetic_errors():
    with raises(ConfigError):
        synthetic_classes(0, 5)
    with raises(ConfigError):
        synthetic_classes(5, 5, (1, 2, 2))


def test_batches_cover_dataset():
    d = synthetic_classes(2, 13, 4)
    seen = []
    sizes = []
    for x, labels in batches(d, 5, seed=1):
        sizes.append(len(x))
        seen.extend(map(tuple, x.reshape(len(x), -1)))
        assert len(labels) == len(x)
    assert sizes == [5, 5, 5, 5, 5, 1]
    assert sorted(seen) == sorted(map(tuple, d.images.reshape(len(d), -1)))


def test_batches_single_batch():
    d = synthetic_classes(2, 3, 4)
    assert len(list(batches(d, 100))) == 1


def test_batches_order():
    d = synthetic_classes(2, 20, 4)
    first = [labels.tolist() for _, labels in batches(d, 8, seed=5, epoch=2)]
    again = [labels.tolist() for _, labels in batches(d, 8, seed=5, epoch=2)]
    assert first == again
    ordered = np.concatenate([labels for _, labels in batches(d, 8, shuffle=False)])
    assert np.array_equal(ordered, d.labels)


def test_subset():
    d = synthetic_classes(2, 10, 4)
    assert len(subset(d, 5)) == 5
    assert subset(d, 0) is d
    assert subset(d, 100) is d


@slow
def test_mnist_official_counts():
    root = data_dir('mnist')
    d = load_idx(f'{root}/train-images-idx3-ubyte', f'{root}/train-labels-idx1-ubyte')
    assert len(d) == 60_000
    assert sorted(set(d.labels.tolist())) == list(range(10))


@slow
def test_cifar_official_counts():
    root = data_dir('cifar10')
    d = load_cifar10([f'{root}/data_batch_{i}.bin' for i in range(1, 6)])
    assert len(d) == 50_000
