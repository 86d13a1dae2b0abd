import gzip
import struct

import numpy as np
import pytest
from scipy.optimize import linprog

from clusterfl.utility.helper_data import (LabeledDataset, DevicePartition, ClusterDataProfile, wasserstein_1d,
                                           contribution, cluster_weight_gc, intra_weights_gk, info_matrix,
                                           partition_devices, cluster_profiles, make_synthetic_blobs, read_idx,
                                           load_idx_dataset, label_pmf, contribution_exponent, MAX_EXPONENT)


def transport_cost(a, b):
    """Earth mover's distance by linear programming over the |i - j| ground metric"""
    n = a.size
    cost = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).ravel()
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n:(i + 1) * n] = 1.0
        a_eq[n + i, i::n] = 1.0
    result = linprog(cost, A_eq=a_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method='highs')
    return result.fun


def test_wasserstein_examples():
    assert wasserstein_1d([1, 0, 0], [0, 0, 1]) == pytest.approx(2.0)
    assert wasserstein_1d([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert wasserstein_1d([1, 0, 0], [0, 0, 1], metric='discrete') == pytest.approx(1.0)


def test_wasserstein_rejects_bad_input():
    with pytest.raises(ValueError):
        wasserstein_1d([0.5, 0.5], [1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        wasserstein_1d([0.7, 0.7], [0.5, 0.5])
    with pytest.raises(ValueError):
        wasserstein_1d([0.5, 0.5], [0.5, 0.5], metric='cosine')


def test_wasserstein_matches_transport_program():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        a = rng.dirichlet(np.ones(n))
        b = rng.dirichlet(np.ones(n))
        a /= a.sum()
        b /= b.sum()
        assert wasserstein_1d(a, b) == pytest.approx(transport_cost(a, b), abs=1e-8)


def test_contribution_examples():
    profile = ClusterDataProfile(cluster_id=0, sample_count=100, pmf=np.array([0.5, 0.5]), wasserstein_to_global=0.5)
    assert profile.contribution == pytest.approx(100 * np.exp(2.0))
    identical = ClusterDataProfile(cluster_id=1, sample_count=100, pmf=np.array([0.5, 0.5]), wasserstein_to_global=0.0)
    assert np.isfinite(contribution(identical))


def test_gc_with_equal_distances_is_size_proportional():
    profiles = [ClusterDataProfile(c, size, np.array([1.0]), 0.25) for c, size in enumerate([10, 30, 60])]
    np.testing.assert_allclose(cluster_weight_gc(profiles), [0.1, 0.3, 0.6])


def test_gc_survives_tiny_distances():
    profiles = [ClusterDataProfile(0, 10, np.array([1.0]), 0.0), ClusterDataProfile(1, 10, np.array([1.0]), 0.5)]
    weights = cluster_weight_gc(profiles)
    assert np.all(np.isfinite(weights))
    assert weights.sum() == pytest.approx(1.0)
    assert weights[0] > weights[1]


def test_gc_and_contributions_share_the_exponent_cap():
    profiles = [ClusterDataProfile(0, 10, np.array([1.0]), 1e-4), ClusterDataProfile(1, 10, np.array([1.0]), 1.0 / 699)]
    assert contribution_exponent(1e-4) == MAX_EXPONENT
    contributions = np.array([contribution(p) for p in profiles])
    np.testing.assert_allclose(cluster_weight_gc(profiles), contributions / contributions.sum(), rtol=1e-9)


def test_gk_is_size_proportional():
    partitions = [DevicePartition(0, np.arange(10)), DevicePartition(1, np.arange(10, 40))]
    np.testing.assert_allclose(intra_weights_gk(partitions), [0.25, 0.75])


def test_info_matrix():
    labels = np.array([0, 1, 0, 1, 0, 0, 1, 1])
    dataset = LabeledDataset(np.zeros((8, 1)), labels, 2)
    iid = [DevicePartition(0, [0, 1, 2, 3]), DevicePartition(1, [4, 5, 6, 7])]
    np.testing.assert_allclose(info_matrix(iid, dataset), 0.0, atol=1e-15)

    split = [DevicePartition(0, [0, 2, 4, 5]), DevicePartition(1, [1, 3, 6, 7])]
    xi = info_matrix(split, dataset)
    np.testing.assert_allclose(xi, [[0.5 * np.log(2), 0.0], [0.0, 0.5 * np.log(2)]])


def test_iid_partition_is_disjoint_and_covering(blobs):
    train, _ = blobs
    partitions = partition_devices(train, 'iid', 7, seed=1)
    indices = np.concatenate([p.sample_indices for p in partitions])
    assert indices.size == len(train)
    assert np.unique(indices).size == len(train)
    assert max(len(p) for p in partitions) - min(len(p) for p in partitions) <= 1


def test_label_limited_partition(blobs):
    train, _ = blobs
    partitions = partition_devices(train, dict(kind='label_limited', labels_per_device=1), 3, seed=2)
    for partition in partitions:
        assert np.unique(train.labels[partition.sample_indices]).size == 1
        assert partition.kind == 'non_iid'
    indices = np.concatenate([p.sample_indices for p in partitions])
    assert np.unique(indices).size == indices.size


def test_mixed_partition_puts_iid_devices_first(blobs):
    train, _ = blobs
    scheme = dict(kind='mixed', labels_per_device=1, iid_devices=2, non_iid_devices=3)
    partitions = partition_devices(train, scheme, 5, seed=3)
    assert [p.kind for p in partitions] == ['iid', 'iid', 'non_iid', 'non_iid', 'non_iid']
    assert [p.device_id for p in partitions] == list(range(5))
    indices = np.concatenate([p.sample_indices for p in partitions])
    assert np.unique(indices).size == indices.size


def test_partition_errors(blobs):
    train, _ = blobs
    with pytest.raises(ValueError):
        partition_devices(train, 'iid', len(train) + 1, seed=0)
    with pytest.raises(ValueError):
        partition_devices(train, dict(kind='label_limited', labels_per_device=4), 3, seed=0)
    with pytest.raises(ValueError):
        partition_devices(train, 'dirichlet', 3, seed=0)


def test_partitions_are_seeded(blobs):
    train, _ = blobs
    first = partition_devices(train, 'iid', 4, seed=5)
    second = partition_devices(train, 'iid', 4, seed=5)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.sample_indices, b.sample_indices)


def test_cluster_profiles_of_iid_clusters_are_close_to_global(blobs):
    train, _ = blobs
    partitions = partition_devices(train, 'iid', 4, seed=0)
    profiles = cluster_profiles([(0, [0, 1]), (2, [2, 3])], partitions, train)
    assert [p.sample_count for p in profiles] == [150, 150]
    for profile in profiles:
        assert profile.pmf.sum() == pytest.approx(1.0)
        assert profile.wasserstein_to_global < 0.2


def test_blobs_are_class_balanced(blobs):
    train, test = blobs
    assert train.features.shape == (300, 4)
    assert test.features.shape == (90, 4)
    np.testing.assert_allclose(label_pmf(np.arange(len(train)), train), [1 / 3] * 3)
    again, _ = make_synthetic_blobs(n_samples=300, feature_dim=4, label_count=3, test_samples=90, seed=7)
    np.testing.assert_array_equal(train.features, again.features)


def write_idx(file_path, array, magic, compress=False):
    opener = gzip.open if compress else open
    with opener(file_path, 'wb') as file:
        file.write(struct.pack('>I', magic))
        file.write(struct.pack('>' + 'I' * array.ndim, *array.shape))
        file.write(array.astype(np.uint8).tobytes())


@pytest.mark.parametrize('compress', [False, True])
def test_idx_dataset(tmp_path, compress):
    suffix = '.gz' if compress else ''
    images = np.arange(4 * 2 * 3).reshape(4, 2, 3) * 10 % 256
    labels = np.array([0, 1, 2, 1])
    images_path = str(tmp_path / ('images' + suffix))
    labels_path = str(tmp_path / ('labels' + suffix))
    write_idx(images_path, images, 0x00000803, compress)
    write_idx(labels_path, labels, 0x00000801, compress)

    magic, array = read_idx(images_path)
    assert magic == 0x00000803
    assert array.shape == (4, 2, 3)

    dataset = load_idx_dataset(images_path, labels_path, label_count=3)
    assert dataset.features.shape == (4, 6)
    assert dataset.features.max() <= 1.0
    np.testing.assert_array_equal(dataset.labels, labels)
    assert len(load_idx_dataset(images_path, labels_path, label_count=3, limit=2)) == 2


def test_idx_errors(tmp_path):
    images_path = str(tmp_path / 'images')
    labels_path = str(tmp_path / 'labels')
    write_idx(images_path, np.zeros((3, 2, 2)), 0x00000803)
    write_idx(labels_path, np.zeros(4), 0x00000801)
    with pytest.raises(ValueError, match='count'):
        load_idx_dataset(images_path, labels_path)
    with pytest.raises(ValueError, match='magic'):
        load_idx_dataset(labels_path, labels_path)
