"""Datasets, device partitions and label-distribution statistics.

Covers label PMFs, 1-D Wasserstein distances between them, the aggregation weights derived
from those distances, cluster contribution scores and the per-device information matrix
used for data-driven clustering. Also reads IDX files and generates synthetic Gaussian blobs.
"""
import gzip
import struct
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from clusterfl.utility.helper import make_rng

EPS_WASSERSTEIN = 1e-3  # lower clamp for W_c
MAX_EXPONENT = 700.0    # exp() overflows a float64 just above 709
PMF_TOL = 1e-9

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    label_count: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2D array, got shape {}".format(features.shape))
        if features.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if labels.min() < 0 or labels.max() >= self.label_count:
            raise ValueError("labels must lie in [0, {})".format(self.label_count))
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class DevicePartition:
    device_id: int
    sample_indices: np.ndarray
    kind: str = 'iid'

    def __post_init__(self):
        indices = np.asarray(self.sample_indices, dtype=np.int64)
        if indices.size == 0:
            raise ValueError("partition of device {} is empty".format(self.device_id))
        if np.unique(indices).size != indices.size:
            raise ValueError("partition of device {} has duplicate indices".format(self.device_id))
        object.__setattr__(self, 'sample_indices', indices)

    def __len__(self):
        return self.sample_indices.size


@dataclass
class ClusterDataProfile:
    cluster_id: int
    sample_count: int
    pmf: np.ndarray
    wasserstein_to_global: float
    contribution: float = field(default=None)

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")
        if self.contribution is None:
            self.contribution = contribution(self)


def check_pmf(mass, name='pmf'):
    mass = np.asarray(mass, dtype=np.float64)
    if mass.ndim != 1 or mass.size == 0:
        raise ValueError("{} must be a nonempty vector".format(name))
    if np.any(mass < 0) or abs(mass.sum() - 1.0) > PMF_TOL:
        raise ValueError("{} must be nonnegative and sum to 1".format(name))
    return mass


def label_pmf(indices, dataset: LabeledDataset):
    """Label probability mass of a subset of the dataset

    Arguments:
        indices {ndarray} -- Sample indices
        dataset {LabeledDataset} -- Source dataset

    Returns:
        ndarray -- length L, sums to 1
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("label_pmf needs a nonempty index set")
    counts = np.bincount(dataset.labels[indices], minlength=dataset.label_count)
    return counts / counts.sum()


def wasserstein_1d(a, b, metric='index'):
    """Optimal transport distance between two label PMFs

    With the index ground metric |i - j| the transport problem has the closed form
    sum_i |CDF_a(i) - CDF_b(i)|. The 'discrete' 0/1 metric gives the total variation distance.

    Arguments:
        a {ndarray} -- PMF
        b {ndarray} -- PMF of the same length

    Keyword Arguments:
        metric {str} -- 'index' or 'discrete' (default: {'index'})

    Returns:
        float -- distance >= 0
    """
    a = check_pmf(a, 'a')
    b = check_pmf(b, 'b')
    if a.shape != b.shape:
        raise ValueError("PMF length mismatch: {} vs {}".format(a.size, b.size))
    if metric == 'index':
        return float(np.abs(np.cumsum(a - b)).sum())
    if metric == 'discrete':
        return float(0.5 * np.abs(a - b).sum())
    raise ValueError("unknown ground metric {!r}".format(metric))


def contribution_exponent(w):
    """1/W with W clamped below at EPS_WASSERSTEIN and the result capped at MAX_EXPONENT"""
    return min(1.0 / max(float(w), EPS_WASSERSTEIN), MAX_EXPONENT)


def contribution(profile: ClusterDataProfile):
    """|D_c| * exp(1/W_c), W_c clamped below at EPS_WASSERSTEIN and the exponent capped at MAX_EXPONENT"""
    exponent = contribution_exponent(profile.wasserstein_to_global)
    return float(profile.sample_count * np.exp(exponent))


def cluster_weight_gc(profiles):
    """Global aggregation weights G_c, proportional to the cluster contributions.

    Evaluated as a softmax over log|D_c| + contribution_exponent(W_c), so G_c and the CAMU
    contributions share one clamp.
    """
    if len(profiles) == 0:
        raise ValueError("cluster_weight_gc needs at least one profile")
    logits = np.array([np.log(p.sample_count) + contribution_exponent(p.wasserstein_to_global) for p in profiles])
    return softmax(logits)


def intra_weights_gk(partitions):
    if len(partitions) == 0:
        raise ValueError("intra_weights_gk needs at least one partition")
    sizes = np.array([len(p) for p in partitions], dtype=np.float64)
    return sizes / sizes.sum()


def make_profile(cluster_id, partitions, dataset: LabeledDataset, global_pmf, metric='index'):
    indices = np.concatenate([p.sample_indices for p in partitions])
    pmf = label_pmf(indices, dataset)
    distance = wasserstein_1d(pmf, global_pmf, metric=metric)
    if distance < EPS_WASSERSTEIN:
        logging.debug("Cluster %d is within %.0e of the global PMF, W_c clamped", cluster_id, EPS_WASSERSTEIN)
    return ClusterDataProfile(cluster_id=cluster_id, sample_count=int(indices.size), pmf=pmf,
                              wasserstein_to_global=distance)


def cluster_profiles(clusters, partitions, dataset: LabeledDataset, metric='index'):
    """One ClusterDataProfile per (leader, members) cluster

    Arguments:
        clusters {list} -- (leader, members) pairs with device indices into partitions
        partitions {list[DevicePartition]} -- All device partitions

    Returns:
        list[ClusterDataProfile] -- In cluster order
    """
    all_indices = np.concatenate([p.sample_indices for p in partitions])
    global_pmf = label_pmf(all_indices, dataset)
    return [make_profile(c, [partitions[k] for k in members], dataset, global_pmf, metric=metric)
            for c, (_, members) in enumerate(clusters)]


def info_matrix(partitions, dataset: LabeledDataset):
    """Per-device information matrix Xi[k, l] = (C_k^l / D) log(D C_k^l / (D_k C^l)), 0 log 0 = 0.

    Global counts are taken over the union of the partitions.
    """
    if len(partitions) == 0:
        raise ValueError("info_matrix needs at least one partition")
    counts = np.stack([np.bincount(dataset.labels[p.sample_indices], minlength=dataset.label_count)
                       for p in partitions]).astype(np.float64)
    total = counts.sum()
    device_totals = counts.sum(axis=1, keepdims=True)
    label_totals = counts.sum(axis=0, keepdims=True)
    xi = np.zeros_like(counts)
    mask = counts > 0
    ratio = (total * counts) / (device_totals * label_totals)
    xi[mask] = (counts[mask] / total) * np.log(ratio[mask])
    return xi


def _split_labels(dataset, pool, device_ids, labels_per_device, rng):
    """Label-limited split of a pool of sample indices over device_ids"""
    label_count = dataset.label_count
    if labels_per_device > label_count:
        raise ValueError("labels_per_device ({}) exceeds label count ({})".format(labels_per_device, label_count))
    order = rng.permutation(label_count)
    wanted = {device: [int(order[(j * labels_per_device + i) % label_count]) for i in range(labels_per_device)]
              for j, device in enumerate(device_ids)}
    pool_labels = dataset.labels[pool]
    assigned = {device: [] for device in device_ids}
    for label in range(label_count):
        requesters = [device for device in device_ids if label in wanted[device]]
        if not requesters:
            continue
        label_pool = rng.permutation(pool[pool_labels == label])
        for device, chunk in zip(requesters, np.array_split(label_pool, len(requesters))):
            assigned[device].append(chunk)
    partitions = []
    for device in device_ids:
        indices = np.concatenate(assigned[device]) if assigned[device] else np.empty(0, dtype=np.int64)
        if indices.size == 0:
            raise ValueError("device {} received no samples, the dataset is too small".format(device))
        partitions.append(DevicePartition(device, np.sort(indices), kind='non_iid'))
    return partitions


def partition_devices(dataset: LabeledDataset, scheme, K: int, seed: int):
    """Splits a dataset over K devices

    Arguments:
        dataset {LabeledDataset} -- Source dataset
        scheme {dict|str} -- kind: iid | label_limited | mixed, plus labels_per_device,
                             iid_devices and non_iid_devices for the mixed kind
        K {int} -- Number of devices
        seed {int} -- Partition seed

    Returns:
        list[DevicePartition] -- K disjoint partitions, IID devices first
    """
    if isinstance(scheme, str):
        scheme = dict(kind=scheme)
    kind = scheme.get('kind', 'iid')
    labels_per_device = int(scheme.get('labels_per_device', 2))
    n = len(dataset)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise ValueError("K ({}) exceeds the sample count ({})".format(K, n))
    if labels_per_device > dataset.label_count:
        raise ValueError("labels_per_device ({}) exceeds label count ({})".format(labels_per_device, dataset.label_count))
    rng = make_rng(seed)
    perm = rng.permutation(n)

    if kind == 'iid':
        return [DevicePartition(k, np.sort(chunk), kind='iid') for k, chunk in enumerate(np.array_split(perm, K))]
    if kind == 'label_limited':
        return _split_labels(dataset, perm, list(range(K)), labels_per_device, rng)
    if kind == 'mixed':
        iid_devices = int(scheme['iid_devices'])
        non_iid_devices = int(scheme['non_iid_devices'])
        if iid_devices + non_iid_devices != K or iid_devices < 0 or non_iid_devices < 0:
            raise ValueError("mixed scheme needs iid_devices + non_iid_devices == K")
        n_iid = int(round(n * iid_devices / K))
        partitions = [DevicePartition(k, np.sort(chunk), kind='iid')
                      for k, chunk in enumerate(np.array_split(perm[:n_iid], iid_devices))] if iid_devices else []
        if non_iid_devices:
            partitions += _split_labels(dataset, perm[n_iid:], list(range(iid_devices, K)), labels_per_device, rng)
        return partitions
    raise ValueError("unknown partition scheme {!r}".format(kind))


def make_synthetic_blobs(n_samples=6000, feature_dim=20, label_count=10, separation=3.0, noise_std=1.0,
                         test_samples=2000, seed=0):
    """Class-balanced Gaussian blobs, a train set and a held-out test set from the same centres

    Returns:
        tuple(LabeledDataset, LabeledDataset|None) -- train, test
    """
    rng = make_rng(seed)
    centres = rng.normal(0.0, separation / np.sqrt(feature_dim), size=(label_count, feature_dim))

    def draw(count, stream):
        draw_rng = make_rng(seed, stream)
        labels = draw_rng.permutation(np.arange(count) % label_count)
        features = centres[labels] + draw_rng.normal(0.0, noise_std, size=(count, feature_dim))
        return LabeledDataset(features, labels, label_count)

    test = draw(test_samples, 2) if test_samples else None
    return draw(n_samples, 1), test


def read_idx(file_path):
    """Reads an IDX file (optionally gzipped) into an ndarray, the magic number selects the rank"""
    opener = gzip.open if str(file_path).endswith('.gz') else open
    with opener(file_path, 'rb') as file:
        zero, dtype_code, ndim = struct.unpack('>HBB', file.read(4))
        if zero != 0 or dtype_code != 0x08:
            raise ValueError("{} is not an unsigned byte IDX file".format(file_path))
        shape = struct.unpack('>' + 'I' * ndim, file.read(4 * ndim))
        data = np.frombuffer(file.read(), dtype=np.uint8)
    if data.size != int(np.prod(shape)):
        raise ValueError("{} is truncated: expected {} values, found {}".format(file_path, int(np.prod(shape)), data.size))
    magic = (dtype_code << 8) | ndim
    return magic, data.reshape(shape)


def load_idx_dataset(images_path, labels_path, label_count=10, limit=None):
    magic, images = read_idx(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError("{} has magic {:#010x}, expected {:#010x}".format(images_path, magic, IDX_IMAGES_MAGIC))
    magic, labels = read_idx(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise ValueError("{} has magic {:#010x}, expected {:#010x}".format(labels_path, magic, IDX_LABELS_MAGIC))
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image count {} does not match label count {}".format(images.shape[0], labels.shape[0]))
    if limit:
        images, labels = images[:limit], labels[:limit]
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    logging.info("Loaded %d IDX samples of dimension %d", features.shape[0], features.shape[1])
    return LabeledDataset(features, labels.astype(np.int64), label_count)
