from os import path

import numpy as np
import pytest

from clusterfl.utility.helper import read_json, read_frame, ProtocolMismatchError
from clusterfl.scenarios import (run_scenario, rerun_manifest, compare_runs, cluster_report, build_environment,
                                 bound_soundness, SCENARIOS)
from clusterfl.simulate import main, EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL


def read_text(file_path):
    with open(file_path) as file:
        return file.read()


def test_unknown_scenario(tiny_config):
    with pytest.raises(ValueError, match='config1_cluster'):
        run_scenario('config9_magic', tiny_config)


def test_environment_is_seeded(tiny_config):
    first = build_environment(tiny_config, 4)
    second = build_environment(tiny_config, 4)
    np.testing.assert_array_equal(first.gamma, second.gamma)
    np.testing.assert_array_equal(first.cpu_hz, second.cpu_hz)
    assert len(first.partitions) == 6
    assert first.xi.shape == (6, 3)


def test_cluster_report_covers_every_device(tiny_config, tmp_path):
    report = cluster_report(tiny_config, str(tmp_path / 'out'))
    members = sorted(k for cluster in report['clusters'] for k in cluster['members'])
    assert members == list(range(6))
    assert sum(p['gc'] for p in report['profiles']) == pytest.approx(1.0)
    assert path.exists(str(tmp_path / 'out' / 'cluster' / 'channels.csv'))


def test_bundle_is_reproducible(tiny_config, tmp_path):
    first = run_scenario('config1_cluster', tiny_config, str(tmp_path / 'a'), plots=False)
    second = run_scenario('config1_cluster', tiny_config, str(tmp_path / 'b'), plots=False)
    assert read_text(path.join(first, 'history.csv')) == read_text(path.join(second, 'history.csv'))

    history = read_frame(path.join(first, 'history.csv'))
    assert history['round'].tolist() == [1, 2, 3]
    summary = read_json(path.join(first, 'summary.json'))
    assert summary['runs'][0]['variant'] == 'cluster'
    manifest = read_json(path.join(first, 'manifest.json'))
    assert manifest['seeds'] == [tiny_config['seed']]
    assert set(manifest['stage_seeds'][str(tiny_config['seed'])]) >= {'dataset', 'channel', 'training'}


def test_rerun_from_manifest(tiny_config, tmp_path):
    bundle = run_scenario('benchmark1_fedavg', tiny_config, str(tmp_path / 'a'), seeds=2, plots=False)
    rerun = rerun_manifest(path.join(bundle, 'manifest.json'), str(tmp_path / 'b'), plots=False)
    assert read_text(path.join(bundle, 'history.csv')) == read_text(path.join(rerun, 'history.csv'))
    assert sorted(read_frame(path.join(rerun, 'history.csv'))['seed'].unique()) == [0, 1]


def test_plots_are_written(tiny_config, tmp_path):
    bundle = run_scenario('config2_wasserstein_only', tiny_config, str(tmp_path), plots=True)
    assert path.exists(path.join(bundle, 'plots', 'history.png'))
    assert 'plots/history.png' in read_json(path.join(bundle, 'manifest.json'))['outputs']


def test_camu_levels_gate_fewer_clusters(tiny_config, tmp_path):
    bundle = run_scenario('config3_camu', tiny_config, str(tmp_path), plots=False)
    runs = read_json(path.join(bundle, 'summary.json'))['runs']
    assert [run['variant'] for run in runs] == ['level=0.5', 'level=1', 'level=1.5']
    counts = [run['multi_round_count'] for run in runs]
    assert all(a >= b for a, b in zip(counts, counts[1:]))

    single = run_scenario('config3_camu', tiny_config, str(tmp_path / 'single'), threshold=2.0, plots=False)
    assert [run['variant'] for run in read_json(path.join(single, 'summary.json'))['runs']] == ['level=2']


def test_compare_against_itself(tiny_config, tmp_path):
    bundle = run_scenario('config1_cluster', tiny_config, str(tmp_path), seeds=2, plots=False)
    table, deltas = compare_runs([bundle, bundle], str(tmp_path / 'compare'))
    assert len(table) == 1
    assert table.loc[0, 'seeds'] == 2
    assert table.loc[0, 'mean_accuracy_delta'] == 0.0
    assert table.loc[0, 'ties'] == 2
    assert table.loc[0, 'sign_test_p'] == 1.0
    assert np.all(deltas['loss_delta'] == 0.0)
    assert path.exists(str(tmp_path / 'compare' / 'compare.csv'))


def test_compare_three_bundles_and_protocol_mismatch(tiny_config, tmp_path):
    bundles = [run_scenario(name, tiny_config, str(tmp_path), plots=False)
               for name in ('config1_cluster', 'config4_single_round', 'benchmark1_fedavg')]
    table, _ = compare_runs(bundles)
    assert len(table) == 3
    assert set(table.columns) >= {'a', 'b', 'wins', 'losses', 'ties', 'sign_test_p'}

    paired = run_scenario('benchmark2_capacity_multi', tiny_config, str(tmp_path / 'two'), seeds=2, plots=False)
    with pytest.raises(ProtocolMismatchError):
        compare_runs([bundles[0], paired])
    with pytest.raises(ValueError):
        compare_runs([bundles[0]])


def test_joint_allocation_respects_budgets(tiny_config, tmp_path):
    bundle = run_scenario('config5_ppo_joint', tiny_config, str(tmp_path), plots=False)
    allocation = read_json(path.join(bundle, 'allocation.json'))[0]
    run = read_json(path.join(bundle, 'summary.json'))['runs'][0]
    p_max = tiny_config['energy']['p_max']
    assert allocation['action']['power_sq_sum'] <= p_max + 1e-9
    assert run['power_sq_sum'] == pytest.approx(allocation['action']['power_sq_sum'])
    assert run['round_energy_J'] == pytest.approx(allocation['energy_J'], rel=1e-9)
    assert run['passes'] == allocation['action']['passes']
    if allocation['feasible']:
        assert allocation['gap'] <= allocation['baseline']['gap']
        assert allocation['energy_J'] <= allocation['e_total_J'] * (1 + 1e-9)
    assert allocation['complexity']['per_iteration'] > 0
    assert path.exists(path.join(bundle, 'policy_{}.bin'.format(tiny_config['seed'])))
    curve = read_frame(path.join(bundle, 'learning_curve.csv'))
    assert len(curve) == tiny_config['ppo']['episodes']


def test_iterations_only_keeps_uniform_power(tiny_config, tmp_path):
    bundle = run_scenario('benchmark3_iters_only', tiny_config, str(tmp_path), plots=False)
    allocation = read_json(path.join(bundle, 'allocation.json'))[0]
    leader_power = tiny_config['uplink']['leader_power_w']
    np.testing.assert_allclose(allocation['action']['powers'], leader_power)


def test_bound_soundness_small_run():
    result = bound_soundness(scenario_seeds=1, noise_seeds=2, rounds=5, reference_steps=2000)
    assert result['passed']
    assert result['rows'][0]['a_factor'] < 1.0


def test_cli_exit_codes(tiny_config_file, tmp_path):
    assert main(['-c', tiny_config_file, 'cluster']) == EXIT_OK
    assert main(['-c', str(tmp_path / 'missing.yaml'), 'cluster']) == EXIT_CONFIG
    assert main(['-c', tiny_config_file, 'scenario']) == EXIT_CONFIG

    out = str(tmp_path / 'cli')
    assert main(['-c', tiny_config_file, '-o', out, 'scenario', 'config1_cluster']) == EXIT_OK
    assert main(['-c', tiny_config_file, '-o', out, '-s', '3', 'train']) == EXIT_OK
    assert main(['-c', tiny_config_file, '-o', str(tmp_path / 'two'), 'scenario', 'config1_cluster',
                 '--seeds', '2']) == EXIT_OK
    assert main(['compare', path.join(out, 'config1_cluster'),
                 str(tmp_path / 'two' / 'config1_cluster')]) == EXIT_PROTOCOL


def test_logging_is_configured_by_main_only(tiny_config_file, monkeypatch):
    import importlib
    import logging
    import clusterfl.simulate
    calls = []
    monkeypatch.setattr(logging, 'basicConfig', lambda **kwargs: calls.append(kwargs))
    module = importlib.reload(clusterfl.simulate)
    assert calls == []
    assert module.main(['-v', '-c', tiny_config_file, 'cluster']) == EXIT_OK
    assert calls == [dict(level=logging.DEBUG)]


def test_every_recipe_is_registered():
    from clusterfl.scenarios import RECIPES
    assert set(RECIPES) == set(SCENARIOS)
