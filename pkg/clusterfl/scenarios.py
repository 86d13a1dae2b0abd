"""Experiment recipes: the five configurations and three benchmarks, run bundles and comparisons.

Every recipe starts from the same seeded environment (dataset, partition, geometry, channels,
compute profile) so bundles produced with the same config and seeds are paired run for run.
"""
import math
import time
import logging
import platform
import itertools
from os import path
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd
import scipy
from scipy.stats import binomtest

import clusterfl
from clusterfl.utility.helper import (config_hash, stage_seed, make_rng, ensure_dir, write_json, read_json,
                                      write_frame, read_frame, validate_config, DivergenceError,
                                      ProtocolMismatchError)
from clusterfl.utility.helper_data import (make_synthetic_blobs, load_idx_dataset, partition_devices, info_matrix,
                                           cluster_profiles, cluster_weight_gc, intra_weights_gk)
from clusterfl.utility.helper_channel import (ChannelParams, layout_devices, build_channels, snr_matrix,
                                              uplink_gains, export_channels_csv)
from clusterfl.utility.helper_clustering import dual_segment_cluster
from clusterfl.utility.helper_training import (ConvexModelSpec, CamuSchedule, FederatedScenario, camu_schedule,
                                               cluster_capacities, run_training, device_sample_weights,
                                               global_objective)
from clusterfl.utility.helper_bound import (estimate_convergence_params, reference_optimum, bound_report,
                                            bound_curve, bound_frame)
from clusterfl.utility.helper_ppo import (EnergyModel, AllocationAction, AllocationEnvironment, PpoConfig,
                                          energy_per_round, optimize, random_search, complexity_report,
                                          save_checkpoint)
from clusterfl.utility.helper_plot import emit_plots

SCENARIOS = ('config1_cluster', 'config2_wasserstein_only', 'benchmark1_fedavg', 'config3_camu',
             'config4_single_round', 'benchmark2_capacity_multi', 'benchmark3_iters_only', 'config5_ppo_joint')
STAGES = ('dataset', 'partition', 'geometry', 'channel', 'compute', 'training', 'policy', 'search')
PROTOCOL_SECTIONS = ('dataset', 'partition', 'geometry', 'channel')
CHANNEL_KEYS = ('bs_gain_dbi', 'device_gain_dbi', 'carrier_hz', 'pathloss_exp', 'noise_power_w', 'fading')
BITS_PER_PARAMETER = 32


@dataclass
class Environment:
    seed: int
    dataset: object
    test_dataset: object
    partitions: list
    geometry: object
    channels: object
    gamma: np.ndarray
    xi: np.ndarray
    cycles_per_sample: np.ndarray
    cpu_hz: np.ndarray
    spec: ConvexModelSpec
    noise_w: float
    sigma_n: float
    timings: dict = field(default_factory=dict)


@dataclass
class Run:
    """One training run of a recipe, plus what its summary row reports"""
    variant: str
    scenario: FederatedScenario
    info: dict = field(default_factory=dict)
    allocation: dict = None
    learning_curve: list = None


def load_dataset(dataset_config, seed):
    if dataset_config['source'] == 'idx':
        idx = dataset_config['idx']
        label_count = int(idx.get('label_count', 10))
        train = load_idx_dataset(idx['train_images'], idx['train_labels'], label_count, idx.get('limit'))
        test = None
        if idx.get('test_images') and idx.get('test_labels'):
            test = load_idx_dataset(idx['test_images'], idx['test_labels'], label_count)
        return train, test
    return make_synthetic_blobs(**dataset_config['synthetic'], seed=seed)


def build_environment(config, seed):
    """Dataset, partitions, layout, channels, SNR and information matrices and compute profile for one seed"""
    timings = dict()
    t0 = time.perf_counter()
    dataset, test_dataset = load_dataset(config['dataset'], stage_seed(seed, 'dataset'))
    geometry_config = config['geometry']
    K = sum(int(region['devices']) for region in geometry_config['regions'])
    partitions = partition_devices(dataset, config['partition'], K, stage_seed(seed, 'partition'))
    t1 = time.perf_counter()

    geometry = layout_devices(geometry_config['regions'], geometry_config['bs_position'],
                              geometry_config['bs_antennas'], seed=stage_seed(seed, 'geometry'))
    channel = config['channel']
    params = ChannelParams(**{key: channel[key] for key in CHANNEL_KEYS if key in channel})
    channels = build_channels(geometry, params, seed=stage_seed(seed, 'channel'))
    gamma = snr_matrix(channels, np.full(K, float(channel.get('device_power_w', 0.5))), params.noise_power_w)
    xi = info_matrix(partitions, dataset)
    t2 = time.perf_counter()

    energy = config['energy']
    compute_rng = make_rng(stage_seed(seed, 'compute'))
    cycles_per_sample = compute_rng.uniform(*energy['cycles_per_sample'], size=K)
    cpu_hz = compute_rng.uniform(*energy['cpu_hz'], size=K)

    sigma_n = config['uplink'].get('sigma_n')
    sigma_n = math.sqrt(params.noise_power_w) if sigma_n is None else float(sigma_n)
    spec = ConvexModelSpec(feature_dim=dataset.feature_dim, label_count=dataset.label_count,
                           l2_reg=float(config['training']['l2_reg']))
    timings['t_data'] = (t1 - t0) * 1000
    timings['t_channel'] = (t2 - t1) * 1000
    logging.info("Environment for seed %d: %d devices, %d samples, sigma_n = %.3g", seed, K, len(dataset), sigma_n)
    return Environment(seed=seed, dataset=dataset, test_dataset=test_dataset, partitions=partitions,
                       geometry=geometry, channels=channels, gamma=gamma, xi=xi, cycles_per_sample=cycles_per_sample,
                       cpu_hz=cpu_hz, spec=spec, noise_w=params.noise_power_w, sigma_n=sigma_n, timings=timings)


def cluster_devices(env: Environment, config):
    clustering = dict(config['clustering'])
    clustering.pop('wasserstein_metric', None)
    t0 = time.perf_counter()
    assignment = dual_segment_cluster(env.gamma, env.xi, env.geometry, **clustering)
    env.timings['t_cluster'] = (time.perf_counter() - t0) * 1000
    return assignment


def singleton_clusters(K):
    return [(k, [k]) for k in range(K)]


def aggregation_weights(env: Environment, clusters, metric='index', size_only=False):
    """Cluster profiles, G_c (Wasserstein based, or by size) and G_kc"""
    profiles = cluster_profiles(clusters, env.partitions, env.dataset, metric=metric)
    if size_only:
        sizes = np.array([p.sample_count for p in profiles], dtype=np.float64)
        gc = sizes / sizes.sum()
    else:
        gc = cluster_weight_gc(profiles)
    gkc = [intra_weights_gk([env.partitions[k] for k in members]) for _, members in clusters]
    return profiles, gc, gkc


def camu_threshold(contributions, camu, level):
    """level times the threshold scale, 'auto' scales by the median contribution"""
    scale = camu.get('threshold_scale', 'auto')
    if scale == 'auto':
        scale = float(np.median(contributions))
    return float(level) * float(scale)


def energy_model(config, env: Environment, C, e_total=math.inf):
    energy = config['energy']
    bits = energy.get('model_bits') or BITS_PER_PARAMETER * env.spec.size
    return EnergyModel(bandwidth_hz=np.full(C, float(energy['bandwidth_hz'])), model_bits=float(bits),
                       cycles_per_sample=env.cycles_per_sample, cpu_hz=env.cpu_hz,
                       compute_power_w=float(energy['compute_power_w']), e_total_j=e_total,
                       p_max=float(energy['p_max']))


def ppo_config(config):
    names = {f.name for f in fields(PpoConfig)}
    return PpoConfig(**{key: value for key, value in config['ppo'].items() if key in names})


def make_scenario(env: Environment, config, clusters, gc, gkc, passes, powers, round_energy=0.0):
    training = config['training']
    leaders = [leader for leader, _ in clusters]
    return FederatedScenario(dataset=env.dataset, partitions=env.partitions, clusters=clusters, spec=env.spec,
                             gc=np.asarray(gc), gkc=list(gkc), schedule=CamuSchedule.uniform(passes),
                             powers=np.asarray(powers, dtype=np.float64),
                             h_norms=np.sqrt(uplink_gains(env.channels, leaders)), sigma_n=env.sigma_n,
                             lr=float(training['lr']), batch_fraction=float(training['batch_fraction']),
                             rounds=int(training['rounds']), seed=stage_seed(env.seed, 'training'),
                             test_dataset=env.test_dataset,
                             aggregate_every_pass=training.get('intra_aggregation', 'per_pass') == 'per_pass',
                             workers=int(training.get('workers', 1)), round_energy=round_energy)


class RecipeContext:
    """Quantities shared by the recipes of one environment, computed on first use"""

    def __init__(self, env: Environment, config):
        self.env, self.config = env, config
        self.metric = config['clustering'].get('wasserstein_metric', 'index')
        self.leader_power = float(config['uplink']['leader_power_w'])
        self._clustered = None

    @property
    def K(self):
        return len(self.env.partitions)

    def clustered(self):
        """(assignment, profiles, gc, gkc, capacities) of the dual-segment clustering"""
        if self._clustered is None:
            assignment = cluster_devices(self.env, self.config)
            profiles, gc, gkc = aggregation_weights(self.env, assignment.clusters, self.metric)
            capacities = cluster_capacities(assignment.clusters, self.env.partitions, self.env.cycles_per_sample,
                                            self.env.cpu_hz, float(self.config['training']['batch_fraction']),
                                            int(self.config['camu']['max_extra_updates']))
            self._clustered = (assignment, profiles, gc, gkc, capacities)
        return self._clustered

    def round_energy(self, clusters, powers, passes, e_total=math.inf):
        leaders = [leader for leader, _ in clusters]
        action = AllocationAction(powers, np.asarray(passes, dtype=np.int64) - 1)
        model = energy_model(self.config, self.env, len(clusters), e_total)
        return energy_per_round(action, uplink_gains(self.env.channels, leaders), self.env.noise_w, model,
                                [members for _, members in clusters])

    def run(self, variant, clusters, gc, gkc, passes, powers=None, **info):
        powers = np.full(len(clusters), self.leader_power) if powers is None else np.asarray(powers)
        energy = self.round_energy(clusters, powers, passes)
        scenario = make_scenario(self.env, self.config, clusters, gc, gkc, passes, powers, energy)
        info.update(clusters=len(clusters), leaders=[leader for leader, _ in clusters],
                    passes=[int(p) for p in passes], multi_round_count=int(np.sum(np.asarray(passes) > 1)),
                    round_energy_J=energy, power_sq_sum=float(np.sum(powers ** 2)))
        return Run(variant=variant, scenario=scenario, info=info)

    def benchmark2_energy(self):
        assignment, _, _, _, capacities = self.clustered()
        powers = np.full(assignment.cluster_count, self.leader_power)
        return self.round_energy(assignment.clusters, powers, 1 + capacities)


def _single_pass(C):
    return np.ones(C, dtype=np.int64)


def recipe_benchmark1_fedavg(ctx: RecipeContext, **_):
    clusters = singleton_clusters(ctx.K)
    _, gc, gkc = aggregation_weights(ctx.env, clusters, ctx.metric, size_only=True)
    return [ctx.run('fedavg', clusters, gc, gkc, _single_pass(ctx.K))]


def recipe_config2_wasserstein_only(ctx: RecipeContext, **_):
    clusters = singleton_clusters(ctx.K)
    _, gc, gkc = aggregation_weights(ctx.env, clusters, ctx.metric)
    return [ctx.run('wasserstein', clusters, gc, gkc, _single_pass(ctx.K))]


def recipe_config1_cluster(ctx: RecipeContext, **_):
    assignment, _, gc, gkc, _ = ctx.clustered()
    return [ctx.run('cluster', assignment.clusters, gc, gkc, _single_pass(assignment.cluster_count))]


def recipe_config4_single_round(ctx: RecipeContext, **_):
    assignment, _, gc, gkc, _ = ctx.clustered()
    return [ctx.run('single_round', assignment.clusters, gc, gkc, _single_pass(assignment.cluster_count))]


def recipe_benchmark2_capacity_multi(ctx: RecipeContext, **_):
    assignment, _, gc, gkc, capacities = ctx.clustered()
    return [ctx.run('capacity_multi', assignment.clusters, gc, gkc, 1 + capacities)]


def recipe_config3_camu(ctx: RecipeContext, threshold=None, **_):
    """One run per threshold level, a level given on the command line replaces the preset levels"""
    assignment, profiles, gc, gkc, capacities = ctx.clustered()
    camu = ctx.config['camu']
    contributions = np.array([p.contribution for p in profiles])
    levels = [threshold] if threshold is not None else camu.get('threshold_levels', [0.5, 1.0, 1.5])
    runs = []
    for level in levels:
        theta = camu_threshold(contributions, camu, level)
        schedule = camu_schedule(contributions, theta, capacities)
        runs.append(ctx.run('level={:g}'.format(level), assignment.clusters, gc, gkc, schedule.passes,
                            threshold_level=float(level), threshold=theta))
    return runs


def allocation_environment(ctx: RecipeContext, fixed_powers=False):
    """Bound-based environment of the clustered system, with E_total from the capacity benchmark"""
    env, config = ctx.env, ctx.config
    assignment, profiles, gc, gkc, capacities = ctx.clustered()
    clusters = assignment.clusters
    C = assignment.cluster_count
    uniform = np.full(C, ctx.leader_power)

    t0 = time.perf_counter()
    noiseless = make_scenario(env, config, clusters, gc, gkc, _single_pass(C), uniform)
    noiseless = replace(noiseless, sigma_n=0.0, keep_models=True)
    trajectory = run_training(noiseless)
    indices, omega = device_sample_weights(noiseless)
    params = estimate_convergence_params(env.spec, env.dataset, env.partitions, clusters, gc, gkc,
                                         trajectory.models, _single_pass(C), uniform, noiseless.h_norms, env.sigma_n,
                                         noiseless.lr, sample_weight=omega, features=env.dataset.features[indices])
    env.timings['t_estimate'] = (time.perf_counter() - t0) * 1000

    e_total = config['energy'].get('e_total_j') or ctx.benchmark2_energy()
    contributions = np.array([p.contribution for p in profiles])
    theta = camu_threshold(contributions, config['camu'], config['camu'].get('threshold', 1.0))
    schedule = camu_schedule(contributions, theta, capacities)
    mask = np.array([entry.multi_round for entry in schedule.per_cluster], dtype=bool)
    energy = config['energy']
    baseline = AllocationAction(uniform, capacities)
    allocation_env = AllocationEnvironment(params, energy_model(config, env, C, float(e_total)),
                                           uplink_gains(env.channels, assignment.leaders), env.noise_w,
                                           [members for _, members in clusters], mask, ppo_config(config),
                                           p_cap=float(energy['p_cap']), p_min=float(energy.get('p_min', 0.0)),
                                           n_cap=capacities, baseline=baseline,
                                           fixed_powers=uniform if fixed_powers else None)
    return allocation_env, dict(mask=mask.tolist(), threshold=theta, e_total_J=float(e_total),
                                mu=params.mu, lipschitz=params.lipschitz, delta=params.delta,
                                delta_c=params.delta_c.tolist(), a_factor_baseline=allocation_env.baseline_evaluation.a_factor)


def _allocated_run(ctx: RecipeContext, variant, fixed_powers):
    config = ctx.config
    allocation_env, details = allocation_environment(ctx, fixed_powers=fixed_powers)
    cfg = ppo_config(config)
    result = optimize(allocation_env, cfg, seed=stage_seed(ctx.env.seed, 'policy'))
    search = random_search(allocation_env, samples=int(config['ppo'].get('random_search_samples', 200)),
                           seed=stage_seed(ctx.env.seed, 'search'))
    ctx.env.timings['t_optimize'] = result.wall_time_s * 1000

    assignment, _, gc, gkc, _ = ctx.clustered()
    action = result.action
    run = ctx.run(variant, assignment.clusters, gc, gkc, action.passes, powers=action.powers,
                  e_total_J=details['e_total_J'], feasible=result.feasible)
    allocation = dict(details, **result.to_dict())
    allocation['baseline'] = dict(action=allocation_env.baseline.to_dict(), gap=allocation_env.baseline_evaluation.gap,
                                  energy_J=allocation_env.baseline_evaluation.energy)
    allocation['random_search'] = result_summary(search)
    allocation['complexity'] = complexity_report(cfg, result.nets.parameter_count, allocation_env.C,
                                                 result.wall_time_s)
    run.allocation = allocation
    run.learning_curve = result.reward_curve
    run.info['nets'] = result.nets
    return run


def result_summary(result):
    summary = result.to_dict()
    summary.pop('wall_time_s', None)
    return summary


def recipe_benchmark3_iters_only(ctx: RecipeContext, **_):
    return [_allocated_run(ctx, 'iters_only', fixed_powers=True)]


def recipe_config5_ppo_joint(ctx: RecipeContext, **_):
    return [_allocated_run(ctx, 'ppo_joint', fixed_powers=False)]


RECIPES = dict(config1_cluster=recipe_config1_cluster, config2_wasserstein_only=recipe_config2_wasserstein_only,
               benchmark1_fedavg=recipe_benchmark1_fedavg, config3_camu=recipe_config3_camu,
               config4_single_round=recipe_config4_single_round,
               benchmark2_capacity_multi=recipe_benchmark2_capacity_multi,
               benchmark3_iters_only=recipe_benchmark3_iters_only, config5_ppo_joint=recipe_config5_ppo_joint)


def check_scenario(name):
    if name not in RECIPES:
        raise ValueError("unknown scenario {!r}, valid names: {}".format(name, ", ".join(SCENARIOS)))


def versions():
    return dict(clusterfl=clusterfl.__version__, python=platform.python_version(), numpy=np.__version__,
                scipy=scipy.__version__, pandas=pd.__version__)


def _history_frame(history, seed, variant):
    frame = history.to_frame()
    frame.insert(0, 'seed', seed)
    frame.insert(1, 'variant', variant)
    return frame


def _write_history(frames, bundle_dir, name, config):
    history = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    n_columns = sorted((c for c in history.columns if c.startswith('n_c')), key=lambda c: int(c[3:]))
    history = history[[c for c in history.columns if not c.startswith('n_c')] + n_columns]
    return write_frame(history, path.join(bundle_dir, 'history.csv'),
                       header=dict(scenario=name, master_seed=config['seed'], config_hash=config_hash(config)))


def run_scenario(name, config, output_dir=None, seeds=1, threshold=None, plots=True):
    """Runs a recipe over paired seeds (master seed + i) and writes its bundle

    The bundle holds history.csv, summary.json and manifest.json, plus allocation.json,
    learning_curve.csv and policy checkpoints for the allocation recipes and plots/.

    Arguments:
        name {str} -- One of SCENARIOS
        config {dict} -- Validated configuration

    Keyword Arguments:
        output_dir {str} -- Parent directory of the bundle (default: {config output.directory})
        seeds {int} -- Number of paired seeds (default: {1})
        threshold {float} -- Single CAMU threshold level for config3_camu (default: {None})

    Returns:
        str -- Bundle directory
    """
    check_scenario(name)
    validate_config(config)
    bundle_dir = ensure_dir(path.join(output_dir or config['output']['directory'], name))
    master = int(config['seed'])
    seed_list = [master + i for i in range(int(seeds))]
    t_start = time.perf_counter()
    timings = dict()
    frames, rows, allocations, curves, outputs = [], [], [], [], ['history.csv', 'summary.json', 'manifest.json']

    def add_timings(env_timings):
        for key, value in env_timings.items():
            timings[key] = timings.get(key, 0.0) + value

    for seed in seed_list:
        env = build_environment(config, seed)
        ctx = RecipeContext(env, config)
        runs = RECIPES[name](ctx, threshold=threshold)
        for run in runs:
            t0 = time.perf_counter()
            try:
                history = run_training(run.scenario)
            except DivergenceError as exc:
                frames.append(_history_frame(exc.history, seed, run.variant))
                _write_history(frames, bundle_dir, name, config)
                write_json(dict(scenario=name, diverged=True, seed=seed, variant=run.variant, message=str(exc)),
                           path.join(bundle_dir, 'summary.json'))
                raise
            timings['t_train'] = timings.get('t_train', 0.0) + (time.perf_counter() - t0) * 1000
            history.seed = seed
            frames.append(_history_frame(history, seed, run.variant))
            last = history.records[-1]
            nets = run.info.pop('nets', None)
            rows.append(dict(seed=seed, variant=run.variant, final_loss=last['loss'], final_accuracy=last['accuracy'],
                             cumulative_energy_J=last['cumulative_energy_J'], **run.info))
            if run.allocation is not None:
                allocations.append(dict(seed=seed, variant=run.variant, **run.allocation))
                curves += [dict(seed=seed, episode=e + 1, mean_reward=r) for e, r in enumerate(run.learning_curve)]
                checkpoint = 'policy_{}.bin'.format(seed)
                save_checkpoint(nets, path.join(bundle_dir, checkpoint))
                outputs.append(checkpoint)
        add_timings(env.timings)

    _write_history(frames, bundle_dir, name, config)
    summary = dict(scenario=name, seeds=seed_list, runs=rows,
                   mean_final_accuracy=float(np.mean([r['final_accuracy'] for r in rows])),
                   mean_final_loss=float(np.mean([r['final_loss'] for r in rows])))
    write_json(summary, path.join(bundle_dir, 'summary.json'))
    if allocations:
        for allocation in allocations:
            allocation.pop('wall_time_s', None)
            allocation.get('complexity', {}).pop('wall_time_s', None)
        write_json(allocations, path.join(bundle_dir, 'allocation.json'))
        write_frame(pd.DataFrame.from_records(curves), path.join(bundle_dir, 'learning_curve.csv'),
                    header=dict(scenario=name, master_seed=master))
        outputs += ['allocation.json', 'learning_curve.csv']

    if plots:
        try:
            outputs += [path.relpath(p, bundle_dir) for p in emit_plots(bundle_dir)]
        except Exception:
            logging.exception("Plotting failed for %s, data outputs are unaffected", bundle_dir)

    wall_time = time.perf_counter() - t_start
    manifest = dict(scenario=name, config=config, config_hash=config_hash(config), seeds=seed_list,
                    threshold=threshold, stage_seeds={str(s): {stage: stage_seed(s, stage) for stage in STAGES}
                                                      for s in seed_list},
                    versions=versions(), outputs=outputs, timings=timings, wall_time_s=wall_time)
    write_json(manifest, path.join(bundle_dir, 'manifest.json'))
    logging.info("Scenario %s over %d seeds Took (s): %.2f; mean final accuracy %.4f", name, len(seed_list),
                 wall_time, summary['mean_final_accuracy'])
    logging.info("Timings (ms): %s", ", ".join("{}={:.1f}".format(k, v) for k, v in sorted(timings.items())))
    return bundle_dir


def rerun_manifest(manifest_file, output_dir=None, plots=True):
    """Regenerates a bundle from its manifest"""
    manifest = read_json(manifest_file)
    config = manifest['config']
    if config_hash(config) != manifest['config_hash']:
        raise ProtocolMismatchError("manifest config does not match its recorded hash")
    return run_scenario(manifest['scenario'], config, output_dir=output_dir, seeds=len(manifest['seeds']),
                        threshold=manifest.get('threshold'), plots=plots)


def load_bundle(bundle_dir):
    manifest = read_json(path.join(bundle_dir, 'manifest.json'))
    history = read_frame(path.join(bundle_dir, 'history.csv'))
    return manifest, history


def protocol_of(manifest):
    """Hash of the sections and seeds that make two bundles pairable"""
    config = manifest['config']
    protocol = {section: config[section] for section in PROTOCOL_SECTIONS}
    protocol['seeds'] = manifest['seeds']
    protocol['rounds'] = config['training']['rounds']
    return config_hash(protocol)


def final_metrics(history):
    last = history.sort_values('round').groupby(['variant', 'seed'], sort=True).tail(1)
    return {variant: group.set_index('seed')[['accuracy', 'loss']].sort_index()
            for variant, group in last.groupby('variant', sort=True)}


def compare_runs(bundle_dirs, output_dir=None):
    """Paired-seed final accuracy and loss deltas between every pair of runs

    A bundle with several variants contributes one run per variant. Each comparison reports
    the mean deltas (second minus first), wins, losses, ties and a two-sided sign test over the
    nonzero accuracy deltas.

    Returns:
        tuple(DataFrame, DataFrame) -- comparison table, per-seed deltas
    """
    if len(bundle_dirs) < 2:
        raise ValueError("compare_runs needs at least two bundles")
    runs, protocol = [], None
    for i, bundle_dir in enumerate(bundle_dirs):
        manifest, history = load_bundle(bundle_dir)
        bundle_protocol = protocol_of(manifest)
        if protocol is None:
            protocol = bundle_protocol
        elif bundle_protocol != protocol:
            raise ProtocolMismatchError("{} does not share the dataset and seed protocol of {}".format(
                bundle_dir, bundle_dirs[0]))
        for variant, metrics in final_metrics(history).items():
            runs.append(("{}#{}[{}]".format(manifest['scenario'], i, variant), metrics))

    rows, deltas = [], []
    for (name_a, a), (name_b, b) in itertools.combinations(runs, 2):
        seeds = a.index.intersection(b.index)
        accuracy_delta = b.loc[seeds, 'accuracy'] - a.loc[seeds, 'accuracy']
        loss_delta = b.loc[seeds, 'loss'] - a.loc[seeds, 'loss']
        wins, losses = int((accuracy_delta > 0).sum()), int((accuracy_delta < 0).sum())
        p_value = binomtest(wins, wins + losses, 0.5).pvalue if wins + losses else 1.0
        rows.append(dict(a=name_a, b=name_b, seeds=len(seeds), mean_accuracy_delta=float(accuracy_delta.mean()),
                         mean_loss_delta=float(loss_delta.mean()), wins=wins, losses=losses,
                         ties=len(seeds) - wins - losses, sign_test_p=float(p_value)))
        deltas += [dict(a=name_a, b=name_b, seed=int(s), accuracy_delta=float(accuracy_delta[s]),
                        loss_delta=float(loss_delta[s])) for s in seeds]
    table, delta_frame = pd.DataFrame.from_records(rows), pd.DataFrame.from_records(deltas)
    if output_dir:
        ensure_dir(output_dir)
        write_frame(table, path.join(output_dir, 'compare.csv'))
        write_frame(delta_frame, path.join(output_dir, 'compare_deltas.csv'))
    return table, delta_frame


def cluster_report(config, output_dir=None):
    """Clusters the devices of the master seed and writes clusters.json and channels.csv"""
    env = build_environment(config, int(config['seed']))
    ctx = RecipeContext(env, config)
    assignment, profiles, gc, gkc, capacities = ctx.clustered()
    report = assignment.to_dict()
    report['profiles'] = [dict(cluster=p.cluster_id, sample_count=p.sample_count,
                               wasserstein=p.wasserstein_to_global, contribution=p.contribution, gc=g)
                          for p, g in zip(profiles, gc)]
    report['capacities'] = capacities.tolist()
    out = ensure_dir(path.join(output_dir or config['output']['directory'], 'cluster'))
    write_json(report, path.join(out, 'clusters.json'))
    export_channels_csv(env.channels, path.join(out, 'channels.csv'))
    logging.info("Clustering timings (ms): %s", ", ".join("{}={:.1f}".format(k, v) for k, v in sorted(env.timings.items())))
    return report


def bound_for_config(config, output_dir=None):
    """Plug-in bound for the clustered single-pass system of the master seed against its measured gap

    Writes history.csv (the noisy run), bound.csv and bound.json.
    """
    env = build_environment(config, int(config['seed']))
    ctx = RecipeContext(env, config)
    assignment, _, gc, gkc, _ = ctx.clustered()
    C = assignment.cluster_count
    run = recipe_config1_cluster(ctx)[0]
    scenario = run.scenario
    indices, omega = device_sample_weights(scenario)
    features, labels = env.dataset.features[indices], env.dataset.labels[indices]

    noiseless = run_training(replace(scenario, sigma_n=0.0, keep_models=True))
    params = estimate_convergence_params(env.spec, env.dataset, env.partitions, assignment.clusters, gc, gkc,
                                         noiseless.models, _single_pass(C), scenario.powers, scenario.h_norms,
                                         env.sigma_n, scenario.lr, sample_weight=omega, features=features)
    bound_config = config['bound']
    T = int(bound_config.get('T', scenario.rounds))
    _, f_star = reference_optimum(env.spec, features, labels, params.lipschitz, sample_weight=omega,
                                  steps=int(bound_config.get('reference_steps', 10000)))
    f0_gap = max(global_objective(env.spec.zeros(), scenario) - f_star, 0.0)
    history = run_training(replace(scenario, rounds=T))
    history.seed = env.seed
    measured = history.to_frame()['loss'].to_numpy() - f_star

    report = bound_report(params, T)
    out = ensure_dir(path.join(output_dir or config['output']['directory'], 'bound'))
    _write_history([_history_frame(history, env.seed, 'cluster')], out, 'bound', config)
    write_frame(bound_frame(params, f0_gap, T, measured), path.join(out, 'bound.csv'),
                header=dict(master_seed=env.seed))
    write_json(dict(report.to_dict(), mu=params.mu, lipschitz=params.lipschitz, delta=params.delta,
                    delta_c=params.delta_c, f_star=f_star, f0_gap=f0_gap), path.join(out, 'bound.json'))
    try:
        emit_plots(out)
    except Exception:
        logging.exception("Plotting failed for %s", out)
    return report


def soundness_scenario(seed, sigma_n=1e-5, lr=0.02, l2_reg=0.01, rounds=50, power=0.5, h_norm=0.02):
    """Reference strongly convex system: 360 IID samples (d=5, 3 labels) over 12 devices in 3 clusters"""
    dataset, _ = make_synthetic_blobs(n_samples=360, feature_dim=5, label_count=3, test_samples=0, seed=seed)
    partitions = partition_devices(dataset, 'iid', 12, seed)
    clusters = [(4 * c, list(range(4 * c, 4 * c + 4))) for c in range(3)]
    sizes = np.array([sum(len(partitions[k]) for k in members) for _, members in clusters], dtype=np.float64)
    gkc = [intra_weights_gk([partitions[k] for k in members]) for _, members in clusters]
    return FederatedScenario(dataset=dataset, partitions=partitions, clusters=clusters,
                             spec=ConvexModelSpec(feature_dim=5, label_count=3, l2_reg=l2_reg), gc=sizes / sizes.sum(),
                             gkc=gkc, schedule=CamuSchedule.uniform(np.ones(3, dtype=np.int64)),
                             powers=np.full(3, power), h_norms=np.full(3, h_norm), sigma_n=sigma_n, lr=lr,
                             batch_fraction=1.0, rounds=rounds, seed=seed)


def bound_soundness(scenario_seeds=20, noise_seeds=20, rounds=50, sigma_n=1e-5, lr=0.02, l2_reg=0.01,
                    reference_steps=10000, master_seed=0, pass_rate=0.95):
    """Measured E[F(w^t) - F(w*)] (mean over noise seeds) against bound_curve(t), t = 1..rounds

    Returns:
        dict -- per-scenario rows, pass fraction, largest violation and the overall verdict
    """
    t0 = time.perf_counter()
    rows = []
    for i in range(int(scenario_seeds)):
        seed = master_seed + i
        base = soundness_scenario(seed, sigma_n, lr, l2_reg, rounds)
        indices, omega = device_sample_weights(base)
        features, labels = base.dataset.features[indices], base.dataset.labels[indices]
        noiseless = run_training(replace(base, sigma_n=0.0, keep_models=True))
        params = estimate_convergence_params(base.spec, base.dataset, base.partitions, base.clusters, base.gc, base.gkc,
                                             noiseless.models, base.schedule.passes, base.powers, base.h_norms, sigma_n,
                                             lr, sample_weight=omega, features=features)
        _, f_star = reference_optimum(base.spec, features, labels, params.lipschitz, sample_weight=omega,
                                      steps=reference_steps)
        f0_gap = max(global_objective(base.spec.zeros(), base) - f_star, 0.0)
        losses = np.mean([run_training(replace(base, seed=stage_seed(seed, 'noise{}'.format(j))))
                          .to_frame()['loss'].to_numpy() for j in range(int(noise_seeds))], axis=0)
        measured = losses - f_star
        curve = bound_curve(params, f0_gap, rounds)
        violation = float(np.max(measured - curve))
        passed = violation <= 0.0
        if not passed:
            logging.warning("Bound violated for scenario seed %d by %.3g", seed, violation)
        rows.append(dict(seed=seed, passed=passed, max_violation=violation, a_factor=float(bound_report(params).a_factor),
                         delta=params.delta, mu=params.mu, lipschitz=params.lipschitz, f0_gap=f0_gap))
    fraction = float(np.mean([row['passed'] for row in rows]))
    wall_time = time.perf_counter() - t0
    logging.info("Bound soundness over %d scenarios Took (s): %.2f; pass fraction %.2f", len(rows), wall_time, fraction)
    return dict(rows=rows, pass_fraction=fraction, max_violation=max(row['max_violation'] for row in rows),
                passed=fraction >= pass_rate, wall_time_s=wall_time)
