import math
from dataclasses import replace

import numpy as np
import pytest

from clusterfl.utility.helper import NonConvergentError
from clusterfl.utility.helper_data import partition_devices
from clusterfl.utility.helper_training import ConvexModelSpec, design_matrix, softmax_gradient
from clusterfl.utility.helper_bound import (ConvergenceParams, a_factor, rate_decomposition, lr_max, noise_sum, gap,
                                            bound_curve, corollary_check, bound_report, estimate_mu_l,
                                            estimate_dissimilarity, estimate_dissimilarities,
                                            estimate_convergence_params, reference_optimum, bound_frame)


def unit_params(**kwargs):
    options = dict(mu=1.0, lipschitz=1.0, delta=1.0, delta_c=1.0, lr=0.5, gc=[1.0], gkc=([1.0],),
                   n_per_cluster=1, powers=0.5, h_norms=0.02, sigma_n=0.01)
    options.update(kwargs)
    return ConvergenceParams(**options)


def test_a_factor_examples():
    assert a_factor(unit_params()) == pytest.approx(0.25)
    assert a_factor(unit_params(lr=0.0)) == 1.0


def test_lr_max_examples():
    assert lr_max(unit_params()) == pytest.approx(2.0)
    assert lr_max(unit_params(delta=2.0)) == pytest.approx(1.0)


def test_gap_examples():
    params = unit_params()
    assert noise_sum(params) == pytest.approx(1.0)
    assert gap(params) == pytest.approx(4.0 / 3.0)
    assert gap(params, T=1) == pytest.approx(1.0)
    assert gap(unit_params(sigma_n=0.0)) == 0.0
    assert gap(params, include_smoothness=True) == pytest.approx(0.5 * 4.0 / 3.0)


def test_gap_requires_contraction():
    with pytest.raises(NonConvergentError):
        gap(unit_params(lr=0.0))
    assert gap(unit_params(lr=0.0), T=5) == pytest.approx(5.0)


def test_bound_curve_example():
    curve = bound_curve(unit_params(), f0_gap=1.0, T=3)
    assert curve.shape == (3,)
    assert curve[0] == pytest.approx(0.25 + 1.0)
    assert curve[1] == pytest.approx(1.3125)
    with pytest.raises(ValueError):
        bound_curve(unit_params(), f0_gap=-1.0, T=3)


def test_corollary_examples():
    two_clusters = unit_params(lr=1e-3, gc=[0.5, 0.5], gkc=([1.0], [1.0]))
    assert list(corollary_check(two_clusters)) == [True, True]
    assert list(corollary_check(unit_params(lr=1e-3))) == [False]


def test_parameter_validation():
    with pytest.raises(ValueError):
        unit_params(gc=[0.5, 0.6], gkc=([1.0], [1.0]))
    with pytest.raises(ValueError):
        unit_params(mu=2.0)
    with pytest.raises(ValueError):
        unit_params(delta=0.5)
    with pytest.raises(ValueError):
        unit_params(powers=0.0)


def test_decomposition_sums_to_a_minus_one():
    params = unit_params(lr=0.05, gc=[0.2, 0.3, 0.5], gkc=([0.5, 0.5], [1.0], [0.1, 0.2, 0.7]),
                         n_per_cluster=[1, 3, 2], delta_c=[1.0, 1.5, 2.0], delta=1.2, lipschitz=2.0)
    parts = rate_decomposition(params)
    assert parts['single_pass'] + parts['multi_pass'] == pytest.approx(a_factor(params) - 1.0, abs=1e-12)
    assert parts['per_cluster'].shape == (3,)


def test_gap_is_monotone_in_power_and_noise():
    base = unit_params(lr=0.1)
    assert gap(base.with_allocation(powers=1.0)) < gap(base)
    assert gap(unit_params(lr=0.1, sigma_n=0.02)) > gap(base)
    assert base.with_allocation(n_per_cluster=3).n_per_cluster[0] == 3


def test_contraction_matches_lr_ceiling():
    rng = np.random.default_rng(5)
    for _ in range(100):
        members = int(rng.integers(1, 5))
        params = unit_params(mu=float(rng.uniform(0.01, 1.0)), lipschitz=float(rng.uniform(1.0, 5.0)),
                             delta=float(rng.uniform(1.0, 3.0)), delta_c=float(rng.uniform(1.0, 3.0)),
                             gkc=(rng.dirichlet(np.ones(members)),), n_per_cluster=int(rng.integers(1, 4)))
        lr = float(rng.uniform(0.0, 2.0 * lr_max(params)))
        params = replace(params, lr=lr)
        assert (a_factor(params) < 1.0) == (lr < lr_max(params))


def test_bound_report_flags():
    report = bound_report(unit_params(), T=10)
    assert report.converges
    assert report.gap_infinite == pytest.approx(4.0 / 3.0)
    assert report.to_dict()['T'] == 10

    aggressive = bound_report(unit_params(lr=1.0))
    assert aggressive.a_factor == pytest.approx(0.0)
    assert aggressive.over_aggressive
    assert not aggressive.converges
    assert math.isinf(aggressive.gap_infinite)


def test_estimate_mu_l_identity_features():
    spec = ConvexModelSpec(feature_dim=4, label_count=2, l2_reg=0.1, fit_bias=False)
    mu, lipschitz = estimate_mu_l(spec, np.eye(4))
    assert mu == pytest.approx(0.1)
    assert lipschitz == pytest.approx(0.1 + 0.5 / 4)
    assert estimate_mu_l(spec, np.zeros((5, 4))) == (0.1, 0.1)
    with pytest.raises(ValueError):
        estimate_mu_l(ConvexModelSpec(4, 2, l2_reg=0.0), np.eye(4))


def test_estimate_mu_l_matches_dense_eigenvalue(blobs):
    train, _ = blobs
    spec = ConvexModelSpec(train.feature_dim, train.label_count, l2_reg=0.01)
    omega = np.random.default_rng(0).dirichlet(np.ones(len(train)))
    x = design_matrix(train.features, spec)
    expected = 0.01 + 0.5 * np.linalg.eigvalsh(x.T @ (omega[:, None] * x)).max()
    _, lipschitz = estimate_mu_l(spec, train, sample_weight=omega)
    assert lipschitz == pytest.approx(expected, rel=0.01)


def test_dissimilarity_examples():
    assert estimate_dissimilarity(np.array([1.0]), [np.array([2.0]), np.array([0.0])], [0.5, 0.5]) == \
        pytest.approx(math.sqrt(2.0))
    same = [np.array([1.0, 2.0])] * 3
    assert estimate_dissimilarity(np.array([1.0, 2.0]), same, [0.2, 0.3, 0.5]) == pytest.approx(1.0)
    grads = [np.array([1.0, -2.0]), np.array([3.0, 0.5])]
    weights = np.array([0.4, 0.6])
    global_grad = weights @ np.stack(grads)
    scaled = estimate_dissimilarity(3 * global_grad, [3 * g for g in grads], weights)
    assert scaled == pytest.approx(estimate_dissimilarity(global_grad, grads, weights))
    assert estimate_dissimilarity(np.zeros(2), grads, weights) is None


def test_plug_in_params_on_a_trajectory(blobs):
    train, _ = blobs
    spec = ConvexModelSpec(train.feature_dim, train.label_count, l2_reg=0.01)
    partitions = partition_devices(train, dict(kind='label_limited', labels_per_device=1), 3, seed=0)
    clusters = [(0, [0, 1]), (2, [2])]
    gc = np.array([0.6, 0.4])
    gkc = [np.array([0.5, 0.5]), np.array([1.0])]
    models = [spec.zeros(), np.full(spec.size, 0.05)]
    delta, delta_c = estimate_dissimilarities(models, partitions, train, spec, clusters, gc, gkc)
    assert delta >= 1.0
    assert delta_c[0] > 1.0
    assert delta_c[1] == 1.0

    params = estimate_convergence_params(spec, train, partitions, clusters, gc, gkc, models, n_per_cluster=[2, 1],
                                         powers=[0.5, 0.5], h_norms=[0.02, 0.02], sigma_n=1e-6, lr=0.01)
    assert params.mu == pytest.approx(0.01)
    assert params.lipschitz > params.mu
    assert params.delta == delta
    np.testing.assert_array_equal(params.n_per_cluster, [2, 1])


def test_reference_optimum_is_stationary(blobs):
    train, _ = blobs
    spec = ConvexModelSpec(train.feature_dim, train.label_count, l2_reg=0.1)
    _, lipschitz = estimate_mu_l(spec, train)
    w, f_star = reference_optimum(spec, train.features, train.labels, lipschitz, steps=2000)
    assert np.linalg.norm(softmax_gradient(w, train.features, train.labels, spec)) < 1e-6
    assert f_star > 0


def test_bound_frame_columns():
    frame = bound_frame(unit_params(), f0_gap=1.0, T=4, measured_gap=np.linspace(1.0, 0.1, 6))
    assert list(frame.columns) == ['round', 'bound', 'bound_smooth', 'measured_gap']
    assert frame['round'].tolist() == [1, 2, 3, 4]
    assert np.all(frame['bound_smooth'] <= frame['bound'])
