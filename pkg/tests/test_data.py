import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odefed.data import (
    CIFAR_RECORD,
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    DataFormatError,
    Dataset,
    PartitionError,
    batches,
    chi_square_uniformity,
    class_histogram,
    class_prototypes,
    dirichlet_partition,
    export_cifar_format,
    load_cifar10,
    read_cifar_batch,
    synth_dataset,
    write_cifar_batch,
)


def _records(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, size=n)


# -- CIFAR binary ------------------------------------------------------------


def test_cifar_round_trip(tmp_path):
    images, labels = _records(5)
    path = tmp_path / "b.bin"
    write_cifar_batch(path, images, labels)
    assert path.stat().st_size == 5 * CIFAR_RECORD
    got_images, got_labels = read_cifar_batch(path)
    np.testing.assert_array_equal(got_images, images)
    np.testing.assert_array_equal(got_labels, labels)


def test_cifar_record_layout(tmp_path):
    # label byte, then 1024 red, 1024 green, 1024 blue bytes in row-major order
    rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    rec[0] = 7
    rec[1 + 1024 + 32 * 2 + 5] = 200  # green, row 2, column 5
    path = tmp_path / "one.bin"
    rec.tofile(path)
    images, labels = read_cifar_batch(path)
    assert labels.tolist() == [7]
    assert images[0, 1, 2, 5] == 200
    assert images.sum() == 200


def test_cifar_truncated(tmp_path):
    images, labels = _records(2)
    path = tmp_path / "t.bin"
    write_cifar_batch(path, images, labels)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DataFormatError, match="truncated"):
        read_cifar_batch(path)


def test_cifar_bad_label(tmp_path):
    rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    rec[0] = 10
    path = tmp_path / "bad.bin"
    rec.tofile(path)
    with pytest.raises(DataFormatError, match="label"):
        read_cifar_batch(path)


def test_cifar_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_cifar_batch(tmp_path / "nope.bin")


def test_load_cifar10_normalizes_with_train_stats(tmp_path):
    for i, name in enumerate(CIFAR_TRAIN_FILES):
        write_cifar_batch(tmp_path / name, *_records(4, seed=i))
    write_cifar_batch(tmp_path / CIFAR_TEST_FILE, *_records(3, seed=99))
    train, test = load_cifar10(tmp_path)
    assert train.images.shape == (20, 3, 32, 32) and len(test) == 3
    assert train.images.dtype == np.float32
    np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(train.images.std(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_array_equal(test.mean, train.mean)


def test_export_cifar_format_round_trip(tmp_path):
    images, labels = _records(3)
    px = images.astype(np.float32) / 255
    mean, std = np.full(3, 0.5, np.float32), np.full(3, 0.25, np.float32)
    ds = Dataset((px - 0.5) / 0.25, labels, 10, "train", mean, std)
    export_cifar_format(ds, tmp_path / "x.bin")
    back, back_labels = read_cifar_batch(tmp_path / "x.bin")
    np.testing.assert_array_equal(back, images)
    np.testing.assert_array_equal(back_labels, labels)


# -- synthetic data ----------------------------------------------------------


def test_synth_is_deterministic_and_balanced():
    a = synth_dataset(4, 10, 8, 0.3, seed=1)
    b = synth_dataset(4, 10, 8, 0.3, seed=1)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.labels).tolist() == [10] * 4
    assert a.images.shape == (40, 3, 8, 8)


def test_synth_splits_use_different_noise():
    tr = synth_dataset(4, 10, 8, 0.3, seed=1, split="train")
    te = synth_dataset(4, 10, 8, 0.3, seed=1, split="test")
    assert tr.images.tobytes() != te.images.tobytes()
    np.testing.assert_array_equal(tr.mean, te.mean)


def test_prototypes_distinct():
    protos = class_prototypes(10, 8).reshape(10, -1)
    d = np.linalg.norm(protos[:, None] - protos[None], axis=2)
    assert d[~np.eye(10, dtype=bool)].min() > 0.5


@pytest.mark.parametrize("sigma,classes,floor", [(0.0, 10, 1.0), (0.25, 4, 0.95)])
def test_nearest_prototype_oracle(sigma, classes, floor):
    ds = synth_dataset(classes, 50, 8, sigma, seed=0, split="test")
    protos = (class_prototypes(classes, 8) - ds.mean[None, :, None, None]) / ds.std[None, :, None, None]
    d = ((ds.images[:, None] - protos[None]) ** 2).sum(axis=(2, 3, 4))
    assert (d.argmin(axis=1) == ds.labels).mean() >= floor


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        synth_dataset(1, 10, 8, 0.1, 0)
    with pytest.raises(ValueError):
        synth_dataset(4, 10, 4, 0.1, 0)


# -- partitioning ------------------------------------------------------------


def _check_invariants(spec, n, k):
    flat = np.concatenate(spec.assignments)
    assert len(spec.assignments) == k
    assert sorted(flat.tolist()) == list(range(n))  # disjoint cover
    assert sum(spec.client_counts) == n
    assert min(spec.client_counts) >= 1


@settings(max_examples=40, deadline=None)
@given(
    n_per=st.integers(2, 30),
    classes=st.integers(2, 6),
    k=st.integers(1, 10),
    alpha=st.floats(0.05, 100),
    seed=st.integers(0, 2**16),
)
def test_partition_invariants(n_per, classes, k, alpha, seed):
    labels = np.repeat(np.arange(classes), n_per)
    if 4 * k > len(labels):  # keep the no-empty-client retry loop well clear of exhaustion
        return
    spec = dirichlet_partition(labels, k, alpha, seed)
    _check_invariants(spec, len(labels), k)
    again = dirichlet_partition(labels, k, alpha, seed)
    assert all(np.array_equal(a, b) for a, b in zip(spec.assignments, again.assignments))


def test_retry_exhaustion_is_an_error():
    # one sample per client and a very skewed split: every redraw leaves someone empty
    with pytest.raises(PartitionError, match="draws"):
        dirichlet_partition(np.arange(6) % 2, 6, 0.01, 0)


def test_single_client_gets_everything():
    labels = np.arange(20) % 4
    spec = dirichlet_partition(labels, 1, 0.5, 0)
    assert sorted(spec.assignments[0].tolist()) == list(range(20))


@pytest.mark.parametrize("k,alpha", [(0, 1.0), (3, 0.0), (3, -1.0), (50, 1.0)])
def test_partition_errors(k, alpha):
    with pytest.raises(PartitionError):
        dirichlet_partition(np.arange(20) % 4, k, alpha, 0)


def test_histogram_rows_sum_to_counts():
    labels = np.repeat(np.arange(5), 40)
    spec = dirichlet_partition(labels, 7, 1.0, 3)
    hist = class_histogram(labels, spec, 5)
    assert hist.sum(axis=1).tolist() == spec.client_counts
    assert hist.sum() == 200


def test_chi_square_zero_for_proportional_rows():
    hist = np.array([[10, 20], [5, 10]])
    np.testing.assert_allclose(chi_square_uniformity(hist), 0)


def test_chi_square_hand_computed():
    # global mix 50/50; client [10, 0] expects [5, 5] -> 5 + 5
    hist = np.array([[10, 0], [0, 10]])
    np.testing.assert_allclose(chi_square_uniformity(hist), [10, 10])


# -- batching ----------------------------------------------------------------


def test_batches_cover_shard_once():
    ds = synth_dataset(4, 10, 8, 0.1, 0)
    shard = np.arange(5, 38)
    seen = []
    sizes = []
    for xb, yb in batches(ds, shard, 8, seed=1, epoch=0):
        sizes.append(len(yb))
        seen.extend(xb.reshape(len(yb), -1)[:, 0].tolist())
    assert sizes == [8, 8, 8, 8, 1]
    assert sorted(seen) == sorted(ds.images[shard].reshape(len(shard), -1)[:, 0].tolist())


def test_batches_reshuffle_per_epoch():
    ds = synth_dataset(4, 10, 8, 0.1, 0)
    first = next(batches(ds, range(40), 40, 1, 0))[1]
    second = next(batches(ds, range(40), 40, 1, 1))[1]
    assert first.tolist() != second.tolist()
    assert first.tolist() == next(batches(ds, range(40), 40, 1, 0))[1].tolist()
