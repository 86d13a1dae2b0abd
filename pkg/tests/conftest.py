import yaml
import pytest

from clusterfl.utility.helper import read_yaml, deep_merge, DEFAULT_CONFIG_FILE
from clusterfl.utility.helper_data import make_synthetic_blobs

TINY_OVERRIDES = dict(
    dataset=dict(synthetic=dict(n_samples=300, feature_dim=4, label_count=3, test_samples=90)),
    partition=dict(kind='mixed', labels_per_device=1, iid_devices=3, non_iid_devices=3),
    geometry=dict(regions=[dict(x=[-10.0, 0.0], y=[-5.0, 5.0], z=0.0, devices=3),
                           dict(x=[10.0, 20.0], y=[-5.0, 5.0], z=0.0, devices=3)]),
    camu=dict(max_extra_updates=2),
    training=dict(rounds=3),
    ppo=dict(episodes=2, steps_per_episode=2, trajectories=2, hidden=[8, 8], random_search_samples=10),
    bound=dict(T=3, reference_steps=200,
               soundness=dict(scenario_seeds=1, noise_seeds=2, rounds=5, reference_steps=500)),
)


@pytest.fixture
def blobs():
    return make_synthetic_blobs(n_samples=300, feature_dim=4, label_count=3, test_samples=90, seed=7)


@pytest.fixture
def tiny_config(tmp_path):
    config = deep_merge(read_yaml(DEFAULT_CONFIG_FILE), TINY_OVERRIDES)
    config['output'] = dict(directory=str(tmp_path / 'results'))
    return config


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    file_path = tmp_path / 'tiny.yaml'
    with open(file_path, 'w') as file:
        yaml.safe_dump(tiny_config, file)
    return str(file_path)
