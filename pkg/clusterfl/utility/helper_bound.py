"""Convergence bound for hierarchical training with noisy uplinks.

Evaluates the per-round contraction factor A, the learning-rate ceiling, the steady-state GAP,
the bound curve and the per-cluster convergence conditions, and estimates the constants
(mu, L, delta, delta_c) from a running system.
"""
import math
import time
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from clusterfl.utility.helper import make_rng, NonConvergentError, STREAM_POWER_ITER
from clusterfl.utility.helper_training import design_matrix, softmax_gradient, softmax_loss

SUM_TOL = 1e-9


@dataclass(frozen=True)
class ConvergenceParams:
    mu: float
    lipschitz: float
    delta: float
    delta_c: np.ndarray
    lr: float
    gc: np.ndarray
    gkc: tuple
    n_per_cluster: np.ndarray
    powers: np.ndarray
    h_norms: np.ndarray
    sigma_n: float = 0.0

    def __post_init__(self):
        gc = np.atleast_1d(np.asarray(self.gc, dtype=np.float64))
        C = gc.size
        delta_c = np.broadcast_to(np.asarray(self.delta_c, dtype=np.float64), (C,)).copy()
        gkc = tuple(np.atleast_1d(np.asarray(g, dtype=np.float64)) for g in self.gkc)
        n_per_cluster = np.broadcast_to(np.asarray(self.n_per_cluster, dtype=np.int64), (C,)).copy()
        powers = np.broadcast_to(np.asarray(self.powers, dtype=np.float64), (C,)).copy()
        h_norms = np.broadcast_to(np.asarray(self.h_norms, dtype=np.float64), (C,)).copy()
        if len(gkc) != C:
            raise ValueError("need one intra-cluster weight vector per cluster")
        if abs(gc.sum() - 1.0) > SUM_TOL:
            raise ValueError("gc must sum to 1, got {}".format(gc.sum()))
        for c, g in enumerate(gkc):
            if abs(g.sum() - 1.0) > SUM_TOL:
                raise ValueError("gkc[{}] must sum to 1, got {}".format(c, g.sum()))
        if not 0 < self.mu <= self.lipschitz:
            raise ValueError("need 0 < mu <= L, got mu={}, L={}".format(self.mu, self.lipschitz))
        if self.delta < 1 or np.any(delta_c < 1):
            raise ValueError("dissimilarity constants must be >= 1")
        if self.lr < 0 or self.sigma_n < 0:
            raise ValueError("lr and sigma_n must be non-negative")
        if np.any(n_per_cluster < 1) or np.any(powers <= 0) or np.any(h_norms <= 0):
            raise ValueError("N_c must be >= 1, powers and channel norms positive")
        for name, value in (('gc', gc), ('delta_c', delta_c), ('gkc', gkc), ('n_per_cluster', n_per_cluster),
                            ('powers', powers), ('h_norms', h_norms)):
            object.__setattr__(self, name, value)

    @property
    def cluster_count(self):
        return self.gc.size

    def with_allocation(self, powers=None, n_per_cluster=None):
        return replace(self, powers=self.powers if powers is None else powers,
                       n_per_cluster=self.n_per_cluster if n_per_cluster is None else n_per_cluster)


def _cluster_terms(params: ConvergenceParams):
    """Per-cluster N_c (mu L lr^2 delta^2 G_c^2 delta_c^2 sum G_kc^2 - 2 mu lr delta G_c delta_c sum G_kc)"""
    sum_g = np.array([g.sum() for g in params.gkc])
    sum_g2 = np.array([np.dot(g, g) for g in params.gkc])
    mu, lip, lr, delta = params.mu, params.lipschitz, params.lr, params.delta
    quadratic = mu * lip * lr ** 2 * delta ** 2 * params.gc ** 2 * params.delta_c ** 2 * sum_g2
    linear = 2.0 * mu * lr * delta * params.gc * params.delta_c * sum_g
    return params.n_per_cluster * (quadratic - linear)


def a_factor(params: ConvergenceParams):
    return float(1.0 + _cluster_terms(params).sum())


def rate_decomposition(params: ConvergenceParams):
    """Splits A - 1 into the single-pass (N_c = 1) and multi-pass (N_c > 1) cluster sums"""
    terms = _cluster_terms(params)
    multi = params.n_per_cluster > 1
    return dict(single_pass=float(terms[~multi].sum()), multi_pass=float(terms[multi].sum()),
                per_cluster=terms)


def lr_max(params: ConvergenceParams):
    """min_c 2 sum G_kc / (L delta G_c delta_c sum G_kc^2)"""
    sum_g = np.array([g.sum() for g in params.gkc])
    sum_g2 = np.array([np.dot(g, g) for g in params.gkc])
    bound = 2.0 * sum_g / (params.lipschitz * params.delta * params.gc * params.delta_c * sum_g2)
    return float(bound.min())


def noise_sum(params: ConvergenceParams, include_smoothness=False):
    """sum_c G_c^2 sigma_n^2 / (p_c^2 ||h_c||^2), times L/2 for the smoothness-scaled variant"""
    total = float(np.sum(params.gc ** 2 * params.sigma_n ** 2 / (params.powers ** 2 * params.h_norms ** 2)))
    return total * params.lipschitz / 2.0 if include_smoothness else total


def gap(params: ConvergenceParams, T=math.inf, include_smoothness=False):
    """Noise residual after T rounds, (1 - A^T) / (1 - A) times the noise sum

    Raises:
        NonConvergentError -- T infinite and A >= 1
    """
    A = a_factor(params)
    noise = noise_sum(params, include_smoothness)
    if math.isinf(T):
        if A >= 1.0:
            raise NonConvergentError("A = {:.6g} >= 1, the bound does not converge".format(A))
        return noise / (1.0 - A)
    if A == 1.0:
        return noise * T
    return (1.0 - A ** T) / (1.0 - A) * noise


def bound_curve(params: ConvergenceParams, f0_gap, T, include_smoothness=False):
    """B(t) = A^t F0 + (1 - A^t) / (1 - A) noise for t = 1..T"""
    if f0_gap < 0:
        raise ValueError("f0_gap must be non-negative")
    A = a_factor(params)
    noise = noise_sum(params, include_smoothness)
    t = np.arange(1, int(T) + 1, dtype=np.float64)
    decay = A ** t
    if A == 1.0:
        return f0_gap + noise * t
    return decay * f0_gap + (1.0 - decay) / (1.0 - A) * noise


def corollary_check(params: ConvergenceParams):
    """Per cluster: delta G_c < 1 and 1 < 2 lr delta_c sum G_kc / (L lr^2 delta_c^2 sum G_kc^2)"""
    sum_g = np.array([g.sum() for g in params.gkc])
    sum_g2 = np.array([np.dot(g, g) for g in params.gkc])
    inter = params.delta * params.gc < 1.0
    denominator = params.lipschitz * params.lr ** 2 * params.delta_c ** 2 * sum_g2
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(denominator > 0, 2.0 * params.lr * params.delta_c * sum_g / denominator, 0.0)
    return inter & (ratio > 1.0)


@dataclass
class BoundReport:
    a_factor: float
    gap_infinite: float
    gap_at_T: float
    lr_max: float
    converges: bool
    corollary_ok: list
    T: int
    gap_infinite_smooth: float = math.inf
    gap_at_T_smooth: float = math.inf
    over_aggressive: bool = False
    decomposition: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(a_factor=self.a_factor, gap_infinite=self.gap_infinite, gap_at_T=self.gap_at_T,
                    gap_infinite_smooth=self.gap_infinite_smooth, gap_at_T_smooth=self.gap_at_T_smooth,
                    lr_max=self.lr_max, converges=self.converges, over_aggressive=self.over_aggressive,
                    corollary_ok=[bool(v) for v in self.corollary_ok], T=self.T,
                    single_pass=self.decomposition.get('single_pass'),
                    multi_pass=self.decomposition.get('multi_pass'))


def bound_report(params: ConvergenceParams, T=50):
    """Gap fields are finite only when 0 < A < 1, A <= 0 is flagged as an over-aggressive step size"""
    A = a_factor(params)
    converges = 0.0 < A < 1.0
    report = BoundReport(a_factor=A, gap_infinite=math.inf, gap_at_T=math.inf, lr_max=lr_max(params),
                         converges=converges, corollary_ok=list(corollary_check(params)), T=int(T),
                         over_aggressive=A <= 0.0, decomposition=rate_decomposition(params))
    if converges:
        report.gap_infinite = gap(params)
        report.gap_at_T = gap(params, T)
        report.gap_infinite_smooth = gap(params, include_smoothness=True)
        report.gap_at_T_smooth = gap(params, T, include_smoothness=True)
    elif report.over_aggressive:
        logging.warning("A = %.4g <= 0: over-aggressive step size, the bound is not claimed", A)
    return report


def estimate_mu_l(spec, features, sample_weight=None, tol=1e-6, max_iter=1000, seed=0):
    """mu = l2_reg and L = mu + lambda_max(X^T diag(omega) X) / 2 by power iteration

    The 1/2 is the curvature cap of softmax cross entropy. Uniform weights give X^T X / n.

    Arguments:
        spec {ConvexModelSpec} -- Model spec, l2_reg must be positive
        features {ndarray|LabeledDataset} -- Feature matrix

    Returns:
        tuple(float, float) -- mu, L
    """
    if spec.l2_reg <= 0:
        raise ValueError("estimate_mu_l needs l2_reg > 0")
    features = getattr(features, 'features', features)
    x = design_matrix(features, spec)
    omega = np.full(x.shape[0], 1.0 / x.shape[0]) if sample_weight is None else np.asarray(sample_weight)
    mu = float(spec.l2_reg)
    if not np.any(x):
        return mu, mu

    def matvec(v):
        return x.T @ (omega * (x @ v))

    t0 = time.perf_counter()
    v = make_rng(seed, STREAM_POWER_ITER).normal(size=x.shape[1])
    v /= np.linalg.norm(v)
    eigenvalue = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        estimate = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        v = w / norm
        if abs(estimate - eigenvalue) <= tol * max(abs(estimate), 1e-300):
            eigenvalue = estimate
            break
        eigenvalue = estimate
    t1 = time.perf_counter()
    logging.debug("Power iteration Took (ms): %.2f; lambda_max = %.6g", (t1 - t0) * 1000, eigenvalue)
    return mu, mu + 0.5 * eigenvalue


def estimate_dissimilarity(global_grad, unit_grads, weights, tol=1e-12):
    """sqrt(E_weights ||grad_unit||^2 / ||grad||^2) floored at 1, None when the global gradient vanishes"""
    global_norm = float(np.dot(global_grad, global_grad))
    if global_norm <= tol ** 2:
        return None
    weights = np.asarray(weights, dtype=np.float64)
    unit_norms = np.array([np.dot(g, g) for g in unit_grads])
    return max(1.0, float(np.sqrt(weights @ unit_norms / global_norm)))


def device_gradients(model, partitions, dataset, spec):
    return [softmax_gradient(model, dataset.features[p.sample_indices], dataset.labels[p.sample_indices], spec)
            for p in partitions]


def estimate_dissimilarities(models, partitions, dataset, spec, clusters, gc, gkc):
    """Running maxima of delta (clusters as units) and delta_c (members as units) over visited models"""
    delta = 1.0
    delta_c = np.ones(len(clusters))
    skipped = 0
    for model in models:
        device_grads = device_gradients(model, partitions, dataset, spec)
        cluster_grads = []
        for c, (_, members) in enumerate(clusters):
            member_grads = [device_grads[k] for k in members]
            cluster_grad = np.tensordot(gkc[c], np.stack(member_grads), axes=1)
            cluster_grads.append(cluster_grad)
            value = estimate_dissimilarity(cluster_grad, member_grads, gkc[c])
            if value is None:
                skipped += 1
            else:
                delta_c[c] = max(delta_c[c], value)
        global_grad = np.tensordot(gc, np.stack(cluster_grads), axes=1)
        value = estimate_dissimilarity(global_grad, cluster_grads, gc)
        if value is None:
            skipped += 1
        else:
            delta = max(delta, value)
    if skipped:
        logging.warning("Excluded %d stationary dissimilarity samples", skipped)
    return delta, delta_c


def estimate_convergence_params(spec, dataset, partitions, clusters, gc, gkc, models, n_per_cluster, powers,
                                h_norms, sigma_n, lr, sample_weight=None, features=None):
    """Plug-in ConvergenceParams: mu and L from the data, delta and delta_c over a trajectory"""
    if features is None:
        indices = np.concatenate([partitions[k].sample_indices for _, members in clusters for k in members])
        features = dataset.features[indices]
    mu, lipschitz = estimate_mu_l(spec, features, sample_weight=sample_weight)
    delta, delta_c = estimate_dissimilarities(models, partitions, dataset, spec, clusters, gc, gkc)
    return ConvergenceParams(mu=mu, lipschitz=lipschitz, delta=delta, delta_c=delta_c, lr=lr, gc=gc,
                             gkc=tuple(gkc), n_per_cluster=n_per_cluster, powers=powers, h_norms=h_norms,
                             sigma_n=sigma_n)


def reference_optimum(spec, features, labels, lipschitz, sample_weight=None, steps=10000, initial_model=None):
    """Long full-batch noiseless descent at lr = 1/L, returns (w*, F(w*))"""
    w = spec.zeros() if initial_model is None else np.array(initial_model, dtype=np.float64)
    lr = 1.0 / lipschitz
    t0 = time.perf_counter()
    for _ in range(steps):
        w = w - lr * softmax_gradient(w, features, labels, spec, sample_weight=sample_weight)
    t1 = time.perf_counter()
    logging.debug("Reference optimum Took (ms): %.2f", (t1 - t0) * 1000)
    return w, softmax_loss(w, features, labels, spec, sample_weight=sample_weight)


def bound_frame(params: ConvergenceParams, f0_gap, T, measured_gap=None):
    """Table of the bound curve (both forms), with the measured gap when available"""
    frame = pd.DataFrame(dict(round=np.arange(1, int(T) + 1), bound=bound_curve(params, f0_gap, T),
                              bound_smooth=bound_curve(params, f0_gap, T, include_smoothness=True)))
    if measured_gap is not None:
        frame['measured_gap'] = np.asarray(measured_gap)[:int(T)]
    return frame
