"""Shared plumbing: configuration, seeding, hashing, file output and error types.

"""
import json
import copy
import hashlib
import logging
from os import path, makedirs

import numpy as np
import yaml
import pandas as pd

THIS_DIR = path.dirname(__file__)
CONFIG_DIR = path.join(THIS_DIR, '..', 'config')
DEFAULT_CONFIG_FILE = path.join(CONFIG_DIR, "default.yaml")
PAPER_CONFIG_FILE = path.join(CONFIG_DIR, "paper", "default.yaml")

REQUIRED_SECTIONS = ('scenario', 'seed', 'dataset', 'partition', 'geometry', 'channel', 'clustering',
                     'camu', 'training', 'uplink', 'energy', 'ppo', 'bound', 'output')
# Presentation-only keys, they never change a result
HASH_EXCLUDED = (('output',), ('scenario', 'description'))

# Stream tags for np.random.default_rng([seed, tag, ...])
STREAM_LOCAL = 1
STREAM_UPLINK = 2
STREAM_CHANNEL = 3
STREAM_POLICY = 4
STREAM_SEARCH = 5
STREAM_POWER_ITER = 6


class ClusterFLError(Exception):
    """Base class for every simulator error"""


class ConfigError(ClusterFLError):
    pass


class DivergenceError(ClusterFLError):
    """Training produced a non-finite loss. Keeps the partial history for diagnosis."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class NonConvergentError(ClusterFLError, ValueError):
    """The contraction factor is >= 1 where a finite GAP was required"""


class InfeasibleError(ClusterFLError):
    pass


class ProtocolMismatchError(ClusterFLError):
    pass


def deep_merge(base: dict, override: dict):
    """Recursively merges override into a copy of base

    Arguments:
        base {dict} -- Default mapping
        override {dict} -- User mapping, wins on conflicts

    Returns:
        dict -- Merged mapping
    """
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_yaml(config_file):
    with open(config_file) as file:
        try:
            config = yaml.safe_load(file)
        except yaml.YAMLError as exc:
            logging.exception("Error parsing yaml")
            raise ConfigError("Could not parse {}: {}".format(config_file, exc)) from exc
    if config is None:
        return dict()
    if not isinstance(config, dict):
        raise ConfigError("Top level of {} must be a mapping".format(config_file))
    return config


def load_config(config_file=DEFAULT_CONFIG_FILE, overrides=None):
    """Loads an experiment configuration, merged over the desk preset and validated

    Arguments:
        config_file {str} -- Path to a yaml file (default: {DEFAULT_CONFIG_FILE})

    Keyword Arguments:
        overrides {dict} -- Extra values merged last, e.g. a seed from the command line (default: {None})

    Returns:
        dict -- Validated configuration
    """
    if not path.exists(config_file):
        raise ConfigError("Configuration file does not exist: {}".format(config_file))
    base = read_yaml(DEFAULT_CONFIG_FILE)
    config = deep_merge(base, read_yaml(config_file))
    config = deep_merge(config, overrides)
    validate_config(config)
    return config


def _require(condition, key, message):
    if not condition:
        raise ConfigError("{}: {}".format(key, message))


def validate_config(config: dict):
    """Raises ConfigError naming the first offending key"""
    for section in REQUIRED_SECTIONS:
        _require(section in config and config[section] is not None, section, "missing section")

    seed = config['seed']
    _require(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0, 'seed',
             "must be a non-negative integer")

    dataset = config['dataset']
    _require(dataset.get('source') in ('synthetic', 'idx'), 'dataset.source', "must be synthetic or idx")
    if dataset['source'] == 'idx':
        idx = dataset.get('idx') or dict()
        for key in ('train_images', 'train_labels'):
            _require(idx.get(key) and path.exists(idx[key]), 'dataset.idx.' + key, "file does not exist")
        for key in ('test_images', 'test_labels'):
            if idx.get(key):
                _require(path.exists(idx[key]), 'dataset.idx.' + key, "file does not exist")
    else:
        synthetic = dataset['synthetic']
        for key in ('n_samples', 'feature_dim', 'label_count'):
            _require(int(synthetic[key]) >= 1, 'dataset.synthetic.' + key, "must be >= 1")

    partition = config['partition']
    _require(partition.get('kind') in ('iid', 'label_limited', 'mixed'), 'partition.kind',
             "must be iid, label_limited or mixed")
    _require(int(partition.get('labels_per_device', 2)) >= 1, 'partition.labels_per_device', "must be >= 1")

    geometry = config['geometry']
    _require(int(geometry['bs_antennas']) >= 1, 'geometry.bs_antennas', "must be >= 1")
    _require(len(geometry['bs_position']) == 3, 'geometry.bs_position', "must have three coordinates")
    _require(len(geometry['regions']) >= 1, 'geometry.regions', "at least one region")
    device_count = sum(int(region['devices']) for region in geometry['regions'])
    if partition['kind'] == 'mixed':
        _require(int(partition['iid_devices']) + int(partition['non_iid_devices']) == device_count,
                 'partition', "iid_devices + non_iid_devices must equal the device count ({})".format(device_count))

    channel = config['channel']
    _require(float(channel['carrier_hz']) > 0, 'channel.carrier_hz', "must be positive")
    _require(float(channel['pathloss_exp']) > 0, 'channel.pathloss_exp', "must be positive")
    _require(float(channel['noise_power_w']) > 0, 'channel.noise_power_w', "must be positive")
    _require(channel.get('fading', 'none') in ('none', 'rayleigh'), 'channel.fading', "must be none or rayleigh")

    clustering = config['clustering']
    _require(0.5 <= float(clustering['damping']) < 1.0, 'clustering.damping', "must lie in [0.5, 1)")
    _require(int(clustering['max_iter']) >= int(clustering['stable_window']) >= 1, 'clustering.max_iter',
             "need max_iter >= stable_window >= 1")
    _require(clustering.get('similarity_mode') in ('literal', 'difference'), 'clustering.similarity_mode',
             "must be literal or difference")

    camu = config['camu']
    _require(int(camu['max_extra_updates']) >= 0, 'camu.max_extra_updates', "must be >= 0")
    scale = camu.get('threshold_scale', 'auto')
    _require(scale == 'auto' or float(scale) > 0, 'camu.threshold_scale', "must be auto or positive")

    training = config['training']
    _require(int(training['rounds']) >= 1, 'training.rounds', "must be >= 1")
    _require(float(training['lr']) > 0, 'training.lr', "must be positive")
    _require(0 < float(training['batch_fraction']) <= 1, 'training.batch_fraction', "must lie in (0, 1]")
    _require(float(training['l2_reg']) >= 0, 'training.l2_reg', "must be non-negative")
    _require(training.get('intra_aggregation', 'per_pass') in ('per_pass', 'end_only'),
             'training.intra_aggregation', "must be per_pass or end_only")
    _require(int(training.get('workers', 1)) >= 1, 'training.workers', "must be >= 1")

    uplink = config['uplink']
    _require(uplink.get('sigma_n') is None or float(uplink['sigma_n']) >= 0, 'uplink.sigma_n',
             "must be null or non-negative")
    _require(float(uplink['leader_power_w']) > 0, 'uplink.leader_power_w', "must be positive")

    energy = config['energy']
    for key in ('bandwidth_hz', 'compute_power_w', 'p_max', 'p_cap'):
        _require(float(energy[key]) > 0, 'energy.' + key, "must be positive")
    _require(0 <= float(energy.get('p_min', 0.0)) < float(energy['p_cap']), 'energy.p_min', "must lie in [0, p_cap)")

    ppo = config['ppo']
    _require(0 < float(ppo['clip_eps']) < 1, 'ppo.clip_eps', "must lie in (0, 1)")
    _require(0 < float(ppo['discount']) < 1, 'ppo.discount', "must lie in (0, 1)")
    _require(float(ppo['penalty_alpha']) > 0, 'ppo.penalty_alpha', "must be positive")
    for key in ('episodes', 'steps_per_episode', 'trajectories'):
        _require(int(ppo[key]) >= 1, 'ppo.' + key, "must be >= 1")
    _require(int(ppo['epochs_per_update']) >= 0, 'ppo.epochs_per_update', "must be >= 0")
    return config


def to_builtin(obj):
    """Converts numpy scalars/arrays (nested) into plain python objects for json"""
    if isinstance(obj, dict):
        return {str(k): to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_builtin(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj):
    return json.dumps(to_builtin(obj), sort_keys=True, separators=(',', ':'))


def config_hash(config: dict):
    """SHA-256 of the canonical json of the config with presentation-only keys removed"""
    stripped = copy.deepcopy(config)
    for key_path in HASH_EXCLUDED:
        node = stripped
        for key in key_path[:-1]:
            node = node.get(key, {}) if isinstance(node, dict) else {}
        if isinstance(node, dict):
            node.pop(key_path[-1], None)
    return hashlib.sha256(canonical_json(stripped).encode('utf-8')).hexdigest()


def stage_seed(master_seed: int, stage: str):
    """Derives an independent 63 bit seed for a named pipeline stage"""
    digest = hashlib.sha256("{}:{}".format(master_seed, stage).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') >> 1


def make_rng(seed, *keys):
    """Generator keyed by a seed and a tuple of non-negative integers.

    Key tuples of one stream must share a length, numpy pads short entropy with zeros.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])


def ensure_dir(directory):
    if directory and not path.exists(directory):
        makedirs(directory, exist_ok=True)
    return directory


def write_json(obj, file_path):
    ensure_dir(path.dirname(file_path))
    with open(file_path, 'w') as file:
        json.dump(to_builtin(obj), file, indent=2, sort_keys=True)
    return file_path


def read_json(file_path):
    with open(file_path) as file:
        return json.load(file)


def write_frame(df: pd.DataFrame, file_path, header=None):
    """Writes a DataFrame as csv, optionally preceded by '# key=value' comment lines

    Arguments:
        df {DataFrame} -- Table to write
        file_path {str} -- Output path

    Keyword Arguments:
        header {dict} -- Values rendered as comment lines (default: {None})

    Returns:
        str -- file_path
    """
    ensure_dir(path.dirname(file_path))
    with open(file_path, 'w', newline='') as file:
        for key, value in (header or {}).items():
            file.write("# {}={}\n".format(key, value))
        df.to_csv(file, index=False)
    return file_path


def read_frame(file_path):
    return pd.read_csv(file_path, comment='#')
