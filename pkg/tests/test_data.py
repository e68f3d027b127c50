import numpy as np
import pytest

from otafl.data import (ClientShard, Dataset, EpochSampler, SizingError, export_digits_idx,
                        generate_synthetic_quadratic, load_idx_dataset, read_text_dataset,
                        read_text_shards, shard_by_label_skew, train_test_split,
                        write_idx_dataset, write_text_dataset, write_text_shards)


def _lstsq_optimum(shard):
    return np.linalg.lstsq(shard.features, shard.labels, rcond=None)[0]


def test_synthetic_is_deterministic():
    a = generate_synthetic_quadratic(7, 2, 10, 3, 0.0)
    b = generate_synthetic_quadratic(7, 2, 10, 3, 0.0)
    for sa, sb in zip(a, b):
        assert sa.features.tobytes() == sb.features.tobytes()
        assert sa.labels.tobytes() == sb.labels.tobytes()


def test_synthetic_client_count():
    shards = generate_synthetic_quadratic(0, 25, 4, 2, 0.5)
    assert len(shards) == 25
    assert [s.client_id for s in shards] == list(range(25))


def test_homogeneous_optima_concentrate_with_size():
    def spread(size):
        opts = np.array([_lstsq_optimum(s) for s in generate_synthetic_quadratic(3, 6, size, 3, 0.0)])
        return np.max(np.linalg.norm(opts - opts.mean(axis=0), axis=1))

    small, large = spread(10), spread(10000)
    assert large < small / 5
    assert large < 0.02


def test_heterogeneity_separates_optima():
    homo = np.array([_lstsq_optimum(s) for s in generate_synthetic_quadratic(3, 6, 2000, 3, 0.0)])
    het = np.array([_lstsq_optimum(s) for s in generate_synthetic_quadratic(3, 6, 2000, 3, 1.0)])
    assert np.ptp(het, axis=0).max() > 10 * np.ptp(homo, axis=0).max()


@pytest.mark.parametrize("args", [(0, 0, 5, 2, 0.1), (0, 2, 0, 2, 0.1), (0, 2, 5, 0, 0.1)])
def test_synthetic_rejects_bad_sizes(args):
    with pytest.raises(SizingError):
        generate_synthetic_quadratic(*args)


def _toy_classification(n_per_class=40, classes=10, m=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n_per_class)
    return Dataset(rng.normal(size=(len(y), m)), y, classes)


@pytest.mark.parametrize("cpc", [2, 4])
def test_label_skew_class_counts(cpc):
    shards = shard_by_label_skew(_toy_classification(), 25, cpc, seed=1)
    assert len(shards) == 25
    assert all(len(s.classes()) == cpc for s in shards)


def test_label_skew_on_digits_four_classes(tmp_path):
    ds = load_idx_dataset(export_digits_idx(tmp_path))
    shards = shard_by_label_skew(ds, 25, 4, seed=0)
    assert all(len(s.classes()) == 4 for s in shards)


def test_label_skew_disjoint_and_bounded():
    ds = _toy_classification()
    # tag every instance through its first feature so that overlaps are detectable
    ds = Dataset(np.column_stack([np.arange(len(ds)), ds.features]), ds.labels, ds.num_classes)
    shards = shard_by_label_skew(ds, 25, 3, seed=5)
    ids = np.concatenate([s.features[:, 0] for s in shards])
    assert len(ids) == len(set(ids.tolist()))
    assert sum(s.size for s in shards) <= len(ds)


def test_label_skew_all_classes_is_iid_style():
    ds = _toy_classification(n_per_class=50)
    shards = shard_by_label_skew(ds, 5, 10, seed=2)
    assert all(len(s.classes()) == 10 for s in shards)
    assert sum(s.size for s in shards) == len(ds)


def test_label_skew_rejects_zero_classes():
    with pytest.raises(SizingError):
        shard_by_label_skew(_toy_classification(), 5, 0, seed=0)


def test_label_skew_rejects_too_many_classes():
    with pytest.raises(SizingError):
        shard_by_label_skew(_toy_classification(), 5, 11, seed=0)


def test_shard_must_be_nonempty():
    with pytest.raises(SizingError):
        ClientShard(0, np.zeros((0, 2)), np.zeros(0))


def test_shard_instances_view():
    s = ClientShard(3, np.arange(6.0).reshape(3, 2), np.array([1, 0, 1]), 2)
    assert s.size == 3 == len(s.instances)
    np.testing.assert_array_equal(s.instances[2].features, [4.0, 5.0])


def test_epoch_sampler_covers_each_epoch_without_replacement():
    sampler = EpochSampler(10, 3, np.random.default_rng(0))
    for _ in range(3):
        seen = np.concatenate([next(sampler) for _ in range(4)])
        assert sorted(seen.tolist()) == list(range(10))


def test_epoch_sampler_reshuffles():
    sampler = EpochSampler(20, 20, np.random.default_rng(0))
    assert next(sampler).tolist() != next(sampler).tolist()


def test_train_test_split_partitions():
    ds = _toy_classification()
    train, test = train_test_split(ds, 0.1, seed=4)
    assert len(test) == 40 and len(train) == 360


def test_idx_dataset_roundtrip(tmp_path):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    write_idx_dataset(tmp_path, images, np.array([1, 0], dtype=np.uint8))
    ds = load_idx_dataset(tmp_path)
    assert ds.features.shape == (2, 9)
    assert ds.num_classes == 2
    np.testing.assert_allclose(ds.features[1], images[1].ravel() / 255.0)


def test_idx_dataset_from_env(tmp_path, monkeypatch):
    write_idx_dataset(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
    monkeypatch.setenv("OTAFL_DATA_DIR", str(tmp_path))
    assert len(load_idx_dataset()) == 1


def test_idx_dataset_missing_dir(tmp_path, monkeypatch):
    monkeypatch.delenv("OTAFL_DATA_DIR", raising=False)
    with pytest.raises(FileNotFoundError):
        load_idx_dataset()
    with pytest.raises(FileNotFoundError):
        load_idx_dataset(tmp_path)


def test_digits_export_shape(tmp_path):
    ds = load_idx_dataset(export_digits_idx(tmp_path))
    assert ds.features.shape == (1797, 64)
    assert ds.num_classes == 10
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0


def test_text_format_regression_roundtrip(tmp_path):
    shards = generate_synthetic_quadratic(1, 1, 5, 3, 0.2)
    ds = Dataset(shards[0].features, shards[0].labels)
    write_text_dataset(tmp_path / "d.txt", ds)
    back = read_text_dataset(tmp_path / "d.txt")
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    first = (tmp_path / "d.txt").read_text().splitlines()[0].split(",")
    assert float(first[0]) == ds.labels[0] and len(first) == 4


def test_text_format_classification_roundtrip(tmp_path):
    ds = _toy_classification(n_per_class=2)
    write_text_dataset(tmp_path / "c.txt", ds)
    back = read_text_dataset(tmp_path / "c.txt")
    assert back.num_classes == 10
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_text_shards_roundtrip(tmp_path):
    shards = generate_synthetic_quadratic(2, 3, 4, 2, 0.5)
    write_text_shards(tmp_path, shards)
    back = read_text_shards(tmp_path)
    for a, b in zip(shards, back):
        np.testing.assert_array_equal(a.features, b.features)
