import numpy as np
import pytest

from kernelnorm import ops
from kernelnorm.autograd import Tensor, backward
from kernelnorm.data import (CIFAR10_MEAN, CIFAR10_STD, DataError, Dataset, PreprocessSpec,
                             augment_batch, crop_offsets, load_cifar, load_cifar_binary,
                             noniid_partition, preprocess, stratified_subset, synth_dataset,
                             train_holdout_split, unpreprocess)
from kernelnorm.rng import Rng


def records(count, which="cifar10", seed=0):
    gen = np.random.default_rng(seed)
    pixels = gen.integers(0, 256, (count, 3072), dtype=np.uint8)
    if which == "cifar10":
        labels = gen.integers(0, 10, (count, 1), dtype=np.uint8)
    else:
        labels = np.stack([gen.integers(0, 20, count), gen.integers(0, 100, count)], 1).astype(np.uint8)
    return np.concatenate([labels, pixels], axis=1), pixels, labels[:, -1]


# ---------------------------------------------------------------- CIFAR binary

@pytest.mark.parametrize("which", ["cifar10", "cifar100"])
def test_cifar_binary_round_trip(tmp_path, which):
    raw, pixels, labels = records(2, which)
    path = tmp_path / "batch.bin"
    raw.tofile(path)
    ds = load_cifar_binary(path, which)
    assert len(ds) == 2 and ds.class_count == (10 if which == "cifar10" else 100)
    assert np.array_equal(ds.images.reshape(2, -1), pixels)
    assert np.array_equal(ds.labels, labels)
    assert ds.labels.dtype == np.uint16 and ds.images.shape == (2, 3, 32, 32)


def test_cifar_binary_errors(tmp_path):
    raw, _, _ = records(2)
    (tmp_path / "t.bin").write_bytes(raw.tobytes()[:-5])
    with pytest.raises(DataError, match="truncated record"):
        load_cifar_binary(tmp_path / "t.bin")
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.raises(DataError, match="bad record count"):
        load_cifar_binary(tmp_path / "e.bin")
    with pytest.raises(DataError):
        load_cifar_binary(tmp_path / "t.bin", "svhn")


def test_load_cifar_directory_layout(tmp_path):
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    for i in range(1, 6):
        records(3, seed=i)[0].tofile(sub / f"data_batch_{i}.bin")
    records(4)[0].tofile(sub / "test_batch.bin")
    assert len(load_cifar("cifar10", "train", tmp_path)) == 15
    assert len(load_cifar("cifar10", "test", tmp_path)) == 4
    with pytest.raises(FileNotFoundError, match="KN_DATA_DIR"):
        load_cifar("cifar100", "train", tmp_path)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 5]), 5)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0]), 5)


# ---------------------------------------------------------------- synthetic data

def test_synth_count_and_determinism():
    a = synth_dataset(4, 50, seed=3)
    assert len(a) == 200 and np.bincount(a.labels).tolist() == [50] * 4
    b = synth_dataset(4, 50, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert synth_dataset(4, 50, seed=4).images.tobytes() != a.images.tobytes()


def test_synth_linear_probe_separable():
    ds = synth_dataset(10, 50, seed=0)
    x = preprocess(ds.images, PreprocessSpec(), np.float64).reshape(len(ds), -1)
    x = x - x.mean(axis=0)
    labels = ds.labels.astype(np.int64)
    w = Tensor(np.zeros((10, x.shape[1])), requires_grad=True)
    b = Tensor(np.zeros(10), requires_grad=True)
    order_gen = np.random.default_rng(0)
    for _ in range(20):
        for idx in np.array_split(order_gen.permutation(len(ds)), 10):
            loss = ops.cross_entropy(ops.linear(Tensor(x[idx]), w, b), labels[idx])
            grads = backward(loss)
            w.data -= 0.05 * grads[w]
            b.data -= 0.05 * grads[b]
    acc = (ops.linear(Tensor(x), w, b).data.argmax(1) == labels).mean()
    assert acc > 0.9


def test_stratified_subset_and_holdout():
    ds = synth_dataset(5, 20, seed=1)
    idx = stratified_subset(ds, 25, seed=2)
    assert len(idx) == 25 and np.bincount(ds.labels[idx]).tolist() == [5] * 5
    assert np.array_equal(idx, stratified_subset(ds, 25, seed=2))
    train, held = train_holdout_split(ds, 0.2, seed=0)
    assert len(held) == 20 and len(train) == 80 and not set(train) & set(held)
    assert np.bincount(ds.labels[held]).tolist() == [4] * 5
    with pytest.raises(DataError):
        stratified_subset(ds, 500)


# ---------------------------------------------------------------- preprocessing

def test_div255_maps_exactly_onto_unit_interval():
    u8 = np.arange(256, dtype=np.uint8).reshape(1, 1, 16, 16).repeat(3, axis=1)
    x = preprocess(u8, PreprocessSpec("div255"), np.float64)
    assert x.min() == 0.0 and x.max() == 1.0
    assert np.array_equal(x[0, 0].ravel(), np.arange(256) / 255.0)


def test_meanstd_round_trip():
    u8 = np.random.default_rng(0).integers(0, 256, (4, 3, 8, 8), dtype=np.uint8)
    spec = PreprocessSpec("meanstd", CIFAR10_MEAN, CIFAR10_STD)
    x = preprocess(u8, spec, np.float64)
    assert np.abs(x.mean(axis=(0, 2, 3))).max() < 3
    assert np.abs(unpreprocess(x, spec) - u8).max() <= 1e-6


def test_preprocess_spec_validation_and_presets():
    with pytest.raises(DataError):
        PreprocessSpec("meanstd", std=(0.2, 0.0, 0.2))
    with pytest.raises(DataError):
        PreprocessSpec("whiten")
    assert PreprocessSpec.cifar(kernel_model=True).mode == "div255"
    spec = PreprocessSpec.cifar(kernel_model=False, which="cifar100")
    assert spec.mode == "meanstd" and spec.pad_crop == (4, 32) and spec.hflip == 0.5


# ---------------------------------------------------------------- augmentation

def batch(n=8, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 3, 32, 32)).astype(np.float32)


def test_augmentation_disabled_is_identity():
    x = batch()
    assert augment_batch(x, PreprocessSpec.cifar(True, augment=False), Rng(0)) is x


def test_flip_twice_is_identity():
    x = batch()
    spec = PreprocessSpec(hflip=1.0, augment=True)
    once = augment_batch(x, spec, Rng(0))
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(augment_batch(once, spec, Rng(0)), x)


def test_crop_offsets_cover_range():
    offs = crop_offsets(Rng(5), 4, 32, 32, keys=(1,), sample_ids=range(1000))
    tops, lefts = zip(*offs)
    assert set(tops) == set(range(9)) and set(lefts) == set(range(9))


def test_crop_matches_reported_offsets():
    x = batch(16)
    spec = PreprocessSpec(pad_crop=(4, 32), augment=True)
    out = augment_batch(x, spec, Rng(2), keys=(7,), sample_ids=range(16))
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    for r, (top, left) in enumerate(crop_offsets(Rng(2), 4, 32, 32, (7,), range(16))):
        assert np.array_equal(out[r], padded[r, :, top:top + 32, left:left + 32])


def test_augmentation_deterministic_and_per_sample():
    x = batch(6)
    spec = PreprocessSpec.cifar(True)
    a = augment_batch(x, spec, Rng(1), keys=(3,), sample_ids=[10, 11, 12, 13, 14, 15])
    b = augment_batch(x, spec, Rng(1), keys=(3,), sample_ids=[10, 11, 12, 13, 14, 15])
    assert np.array_equal(a, b)
    # a sample's augmentation depends only on its own id, not on its batch neighbours
    c = augment_batch(x[2:3], spec, Rng(1), keys=(3,), sample_ids=[12])
    assert np.array_equal(a[2:3], c)
    assert a.shape == x.shape


def test_augmentation_preserves_order():
    # each sample is a constant image, so crop/flip keep its value and reveal order
    x = np.broadcast_to(np.arange(1.0, 9.0)[:, None, None, None], (8, 3, 32, 32)).copy()
    out = augment_batch(x, PreprocessSpec(hflip=0.5, augment=True), Rng(0))
    assert np.array_equal(out[:, 0, 5, 5], np.arange(1.0, 9.0))


# ---------------------------------------------------------------- partitioning

def test_noniid_ten_clients_two_labels():
    labels = np.repeat(np.arange(10), 100)
    shards = noniid_partition(labels, 10, 2, Rng(0))
    assert len(shards) == 10
    for s in shards:
        assert len(np.unique(labels[s])) == 2
    allidx = np.concatenate(shards)
    assert len(allidx) == len(set(allidx)) == len(labels)
    assert sorted(len(s) for s in shards) == [100] * 10


def test_noniid_single_client_gets_everything():
    ds = synth_dataset(4, 10, geometry=(8, 8))
    (only,) = noniid_partition(ds, 1, 4, Rng(0))
    assert np.array_equal(only, np.arange(len(ds)))


@pytest.mark.parametrize("clients, per", [(6, 2), (7, 3), (10, 1), (5, 10)])
def test_noniid_partition_properties(clients, per):
    labels = np.random.default_rng(clients).integers(0, 10, 600)
    shards = noniid_partition(labels, clients, per, Rng(4))
    allidx = np.concatenate(shards)
    assert np.array_equal(np.sort(allidx), np.arange(600))
    for s in shards:
        assert len(np.unique(labels[s])) == per
    again = noniid_partition(labels, clients, per, Rng(4))
    assert all(np.array_equal(a, b) for a, b in zip(shards, again))


@pytest.mark.parametrize("clients, per", [(2, 2), (3, 2), (1, 11), (0, 1)])
def test_noniid_infeasible(clients, per):
    with pytest.raises(DataError, match="infeasible label assignment"):
        noniid_partition(np.repeat(np.arange(10), 5), clients, per, Rng(0))
