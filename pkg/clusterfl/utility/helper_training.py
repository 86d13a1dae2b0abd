"""Hierarchical federated training with cluster-aware multi-round local updates.

The model is a softmax-linear classifier with L2 regularisation, which is mu-strongly convex
and L-smooth. Parameters are kept as a flat vector of length L * (d + 1) (bias included).
"""
import time
import logging
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from clusterfl.utility.helper import (make_rng, write_frame, DivergenceError, STREAM_LOCAL, STREAM_UPLINK)

WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class ConvexModelSpec:
    feature_dim: int
    label_count: int
    l2_reg: float = 0.01
    fit_bias: bool = True
    kind: str = 'softmax_linear'

    def __post_init__(self):
        if self.kind != 'softmax_linear':
            raise ValueError("unsupported model kind {!r}".format(self.kind))
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be non-negative")

    @property
    def input_dim(self):
        return self.feature_dim + (1 if self.fit_bias else 0)

    @property
    def size(self):
        return self.label_count * self.input_dim

    def zeros(self):
        return np.zeros(self.size)


def design_matrix(features, spec: ConvexModelSpec):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if spec.fit_bias:
        return np.hstack([features, np.ones((features.shape[0], 1))])
    return features


def _check_model(model, spec):
    model = np.asarray(model, dtype=np.float64)
    if model.shape != (spec.size,):
        raise ValueError("model has shape {}, expected ({},)".format(model.shape, spec.size))
    return model.reshape(spec.label_count, spec.input_dim)


def _sample_weights(n, sample_weight):
    if sample_weight is None:
        return np.full(n, 1.0 / n)
    return np.asarray(sample_weight, dtype=np.float64)


def softmax_loss(model, features, labels, spec: ConvexModelSpec, sample_weight=None):
    """Weighted cross entropy plus (mu/2)||w||^2, uniform weights give the mean"""
    weights = _check_model(model, spec)
    x = design_matrix(features, spec)
    logits = x @ weights.T
    per_sample = logsumexp(logits, axis=1) - logits[np.arange(x.shape[0]), labels]
    omega = _sample_weights(x.shape[0], sample_weight)
    return float(omega @ per_sample + 0.5 * spec.l2_reg * np.dot(model, model))


def softmax_gradient(model, features, labels, spec: ConvexModelSpec, sample_weight=None):
    """Gradient of softmax_loss, (P - Y)^T diag(omega) X + mu W, flattened"""
    weights = _check_model(model, spec)
    x = design_matrix(features, spec)
    probs = softmax(x @ weights.T, axis=1)
    probs[np.arange(x.shape[0]), labels] -= 1.0
    omega = _sample_weights(x.shape[0], sample_weight)
    grad = (probs * omega[:, None]).T @ x + spec.l2_reg * weights
    return grad.ravel()


def predict(model, features, spec: ConvexModelSpec):
    weights = _check_model(model, spec)
    return np.argmax(design_matrix(features, spec) @ weights.T, axis=1)


def accuracy(model, dataset, spec: ConvexModelSpec):
    return float(np.mean(predict(model, dataset.features, spec) == dataset.labels))


def local_gradient(model, partition, dataset, spec: ConvexModelSpec, batch_fraction=1.0, seed=0):
    """Mini-batch gradient on a device's data

    Arguments:
        model {ndarray} -- Flat parameters
        partition {DevicePartition} -- The device's samples
        dataset {LabeledDataset} -- Source dataset

    Keyword Arguments:
        batch_fraction {float} -- Fraction of the partition per step, 1 gives the exact mean gradient (default: {1.0})
        seed {int|Generator} -- Batch sampling stream (default: {0})

    Returns:
        ndarray -- Flat gradient
    """
    if not 0 < batch_fraction <= 1:
        raise ValueError("batch_fraction must lie in (0, 1]")
    indices = np.asarray(partition.sample_indices)
    if indices.size == 0:
        raise ValueError("empty partition")
    if batch_fraction < 1.0:
        batch = max(1, int(np.ceil(batch_fraction * indices.size)))
        indices = make_rng(seed).choice(indices, size=batch, replace=False)
    return softmax_gradient(model, dataset.features[indices], dataset.labels[indices], spec)


def local_update(model, partition, dataset, spec, lr, steps=1, batch_fraction=1.0, seed=0, gradient_fn=None):
    """steps sequential SGD steps w <- w - lr g

    gradient_fn(w, rng) replaces the mini-batch gradient when given.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    rng = make_rng(seed)
    w = np.array(model, dtype=np.float64, copy=True)
    for _ in range(steps):
        if gradient_fn is not None:
            grad = gradient_fn(w, rng)
        else:
            grad = local_gradient(w, partition, dataset, spec, batch_fraction, rng)
        w = w - lr * grad
    return w


@dataclass(frozen=True)
class CamuEntry:
    cluster_id: int
    multi_round: int
    extra_updates: int
    passes: int


@dataclass(frozen=True)
class CamuSchedule:
    per_cluster: tuple

    @property
    def passes(self):
        return np.array([entry.passes for entry in self.per_cluster], dtype=np.int64)

    @property
    def multi_round_count(self):
        return int(sum(entry.multi_round for entry in self.per_cluster))

    @classmethod
    def uniform(cls, passes):
        passes = np.asarray(passes, dtype=np.int64)
        return cls(tuple(CamuEntry(c, int(p > 1), int(p - 1), int(p)) for c, p in enumerate(passes)))


def camu_schedule(contributions, threshold, capacities):
    """S_c = 1 iff contribution >= threshold, N_c = 1 + S_c n_c"""
    contributions = np.asarray(contributions, dtype=np.float64)
    capacities = np.asarray(capacities, dtype=np.int64)
    if contributions.shape != capacities.shape:
        raise ValueError("need one capacity per cluster")
    if np.any(capacities < 0):
        raise ValueError("capacities must be non-negative")
    entries = []
    for c, (theta, n_c) in enumerate(zip(contributions, capacities)):
        gate = int(theta >= threshold)
        entries.append(CamuEntry(c, gate, int(n_c), 1 + gate * int(n_c)))
    return CamuSchedule(tuple(entries))


def cluster_capacities(clusters, partitions, cycles_per_sample, cpu_hz, batch_fraction, max_extra=3):
    """Extra local passes each cluster fits inside the round deadline

    A pass takes as long as the slowest member (l_k * batch_k / f_k); the deadline is the
    slowest cluster's single pass, so n_c = floor(deadline / T_c) - 1, capped at max_extra.
    """
    cycles_per_sample = np.asarray(cycles_per_sample, dtype=np.float64)
    cpu_hz = np.asarray(cpu_hz, dtype=np.float64)
    step_time = np.array([cycles_per_sample[k] * max(1, int(np.ceil(batch_fraction * len(p)))) / cpu_hz[k]
                          for k, p in enumerate(partitions)])
    pass_time = np.array([step_time[members].max() for _, members in clusters])
    deadline = pass_time.max()
    extra = np.floor(deadline / pass_time + 1e-12).astype(np.int64) - 1
    return np.clip(extra, 0, int(max_extra))


def _weighted_average(models, weights, name):
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) == 0 or len(models) != weights.size:
        raise ValueError("{}: need one weight per model".format(name))
    if abs(weights.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError("{}: weights sum to {}, expected 1".format(name, weights.sum()))
    shapes = {np.shape(m) for m in models}
    if len(shapes) != 1:
        raise ValueError("{}: model shape mismatch {}".format(name, sorted(shapes)))
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in models])
    return np.tensordot(weights, stacked, axes=1)


def intra_aggregate(models, weights):
    return _weighted_average(models, weights, 'intra_aggregate')


def global_aggregate(cluster_models, weights):
    return _weighted_average(cluster_models, weights, 'global_aggregate')


def uplink_transmit(model, power, h_norm, sigma_n, seed=0):
    """Adds zero-mean Gaussian error with std sigma_n / (p ||h||) to every coordinate"""
    if power <= 0 or h_norm <= 0:
        raise ValueError("power and h_norm must be positive")
    model = np.array(model, dtype=np.float64, copy=True)
    if sigma_n == 0:
        return model
    std = sigma_n / (power * h_norm)
    return model + make_rng(seed).normal(0.0, std, size=model.shape)


@dataclass
class FederatedScenario:
    dataset: object
    partitions: list
    clusters: list
    spec: ConvexModelSpec
    gc: np.ndarray
    gkc: list
    schedule: CamuSchedule
    powers: np.ndarray
    h_norms: np.ndarray
    sigma_n: float = 0.0
    lr: float = 0.05
    batch_fraction: float = 0.2
    rounds: int = 50
    seed: int = 0
    test_dataset: object = None
    aggregate_every_pass: bool = True
    workers: int = 1
    round_energy: float = 0.0
    initial_model: np.ndarray = None
    keep_models: bool = False


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    models: list = field(default_factory=list)
    final_model: np.ndarray = None
    seed: int = 0

    def to_frame(self):
        return pd.DataFrame.from_records(self.records)

    def to_csv(self, file_path):
        return write_frame(self.to_frame(), file_path, header=dict(master_seed=self.seed))


def device_sample_weights(scenario: FederatedScenario):
    """Sample weights omega_i = G_c G_kc / |D_k| over the concatenated device samples"""
    indices, omega = [], []
    for c, (_, members) in enumerate(scenario.clusters):
        for k, g_k in zip(members, scenario.gkc[c]):
            part = scenario.partitions[k]
            indices.append(part.sample_indices)
            omega.append(np.full(len(part), scenario.gc[c] * g_k / len(part)))
    return np.concatenate(indices), np.concatenate(omega)


def global_objective(model, scenario: FederatedScenario, cache=None):
    """F(w) = sum_c G_c sum_k G_kc F_k(w)"""
    indices, omega = cache if cache is not None else device_sample_weights(scenario)
    data = scenario.dataset
    return softmax_loss(model, data.features[indices], data.labels[indices], scenario.spec, sample_weight=omega)


def _train_cluster(scenario: FederatedScenario, model, round_index, c):
    _, members = scenario.clusters[c]
    passes = int(scenario.schedule.passes[c])
    weights = scenario.gkc[c]
    data, spec = scenario.dataset, scenario.spec

    def step(w, k, p, steps):
        return local_update(w, scenario.partitions[k], data, spec, scenario.lr, steps=steps,
                            batch_fraction=scenario.batch_fraction,
                            seed=make_rng(scenario.seed, STREAM_LOCAL, round_index, c, p, k))

    w_c = model
    if scenario.aggregate_every_pass:
        for p in range(passes):
            w_c = intra_aggregate([step(w_c, k, p, 1) for k in members], weights)
    else:
        w_c = intra_aggregate([step(w_c, k, 0, passes) for k in members], weights)
    return w_c


def run_training(scenario: FederatedScenario):
    """Runs the global rounds of hierarchical training

    Each round every cluster makes N_c local passes from the global model, intra-aggregating
    after each pass (or once, when aggregate_every_pass is off). Leaders uplink with noise and
    the BS aggregates with G_c. Cluster work may fan out over threads; aggregation always
    reduces in cluster order.

    Arguments:
        scenario {FederatedScenario} -- Everything the run needs

    Returns:
        TrainingHistory -- One record per round
    """
    C = len(scenario.clusters)
    if len(scenario.gkc) != C or np.size(scenario.gc) != C or len(scenario.schedule.per_cluster) != C:
        raise ValueError("clusters, weights and schedule disagree on the cluster count")
    spec = scenario.spec
    model = spec.zeros() if scenario.initial_model is None else np.array(scenario.initial_model, dtype=np.float64)
    cache = device_sample_weights(scenario)
    evaluation = scenario.test_dataset if scenario.test_dataset is not None else scenario.dataset
    history = TrainingHistory(seed=scenario.seed)
    cumulative = 0.0
    passes = scenario.schedule.passes

    executor = ThreadPoolExecutor(max_workers=scenario.workers) if scenario.workers > 1 else None
    t0 = time.perf_counter()
    try:
        for t in range(scenario.rounds):
            if scenario.keep_models:
                history.models.append(model.copy())
            if executor is not None:
                cluster_models = list(executor.map(lambda c: _train_cluster(scenario, model, t, c), range(C)))
            else:
                cluster_models = [_train_cluster(scenario, model, t, c) for c in range(C)]
            received = [uplink_transmit(w_c, scenario.powers[c], scenario.h_norms[c], scenario.sigma_n,
                                        seed=make_rng(scenario.seed, STREAM_UPLINK, t, c))
                        for c, w_c in enumerate(cluster_models)]
            model = global_aggregate(received, scenario.gc)

            loss = global_objective(model, scenario, cache) if np.all(np.isfinite(model)) else np.nan
            cumulative += scenario.round_energy
            record = dict(round=t + 1, loss=loss, accuracy=accuracy(model, evaluation, spec) if np.isfinite(loss) else np.nan,
                          energy_J=scenario.round_energy, cumulative_energy_J=cumulative)
            record.update({'n_c{}'.format(c): int(passes[c]) for c in range(C)})
            history.records.append(record)
            if not np.isfinite(loss):
                history.final_model = model
                raise DivergenceError("non-finite loss at round {}".format(t + 1), history=history)
            logging.debug("Round %d: loss %.5f, accuracy %.4f", t + 1, loss, record['accuracy'])
    finally:
        if executor is not None:
            executor.shutdown()
    t1 = time.perf_counter()
    logging.info("Training %d rounds over %d clusters Took (ms): %.2f", scenario.rounds, C, (t1 - t0) * 1000)
    if scenario.keep_models:
        history.models.append(model.copy())
    history.final_model = model
    return history
