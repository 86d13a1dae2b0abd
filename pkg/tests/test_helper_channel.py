import numpy as np
import pytest

from clusterfl.utility.helper import read_frame
from clusterfl.utility.helper_channel import (Geometry, ChannelParams, ChannelState, path_loss, build_channels, snr,
                                              snr_matrix, uplink_gains, layout_devices, export_channels_csv,
                                              SPEED_OF_LIGHT)


def line_geometry(antennas=4):
    return Geometry(bs_position=[0.0, 0.0, 10.0],
                    device_positions=[[10.0, 0.0, 0.0], [20.0, 0.0, 0.0], [20.0, 5.0, 0.0]],
                    bs_antennas=antennas)


def test_path_loss_formula():
    params = ChannelParams()
    expected = 10 ** 0.5 * (SPEED_OF_LIGHT / (4 * np.pi * 915e6 * 100.0)) ** 3.76
    assert path_loss(100.0, params) == pytest.approx(expected)
    assert path_loss(100.0, params) > path_loss(200.0, params)


def test_path_loss_without_exponent_or_gain_is_unity():
    params = ChannelParams(bs_gain_dbi=0.0, device_gain_dbi=0.0, pathloss_exp=0.0)
    np.testing.assert_allclose(path_loss(np.array([1.0, 50.0]), params), [1.0, 1.0])


def test_path_loss_rejects_nonpositive_distance():
    with pytest.raises(ValueError):
        path_loss(0.0, ChannelParams())
    with pytest.raises(ValueError):
        path_loss(np.array([1.0, -2.0]), ChannelParams())


def test_channels_without_fading():
    geometry = line_geometry(antennas=4)
    params = ChannelParams()
    channels = build_channels(geometry, params, seed=0)
    distances = np.linalg.norm(geometry.device_positions - geometry.bs_position, axis=1)
    np.testing.assert_allclose(channels.bs_gains, 4 * path_loss(distances, params))

    d2d = channels.d2d_gains
    np.testing.assert_allclose(d2d, d2d.T)
    np.testing.assert_array_equal(np.diag(d2d), 0.0)
    assert d2d[0, 1] == pytest.approx(path_loss(10.0, params, tx_gain_dbi=0.0))


def test_rayleigh_fading_is_seeded():
    params = ChannelParams(fading='rayleigh')
    first = build_channels(line_geometry(), params, seed=3)
    second = build_channels(line_geometry(), params, seed=3)
    other = build_channels(line_geometry(), params, seed=4)
    np.testing.assert_array_equal(first.to_bs, second.to_bs)
    assert not np.allclose(first.to_bs, other.to_bs)
    np.testing.assert_allclose(first.device_to_device, first.device_to_device.T)


def test_rayleigh_gain_averages_to_path_loss():
    geometry = line_geometry(antennas=64)
    params = ChannelParams(fading='rayleigh')
    distances = np.linalg.norm(geometry.device_positions - geometry.bs_position, axis=1)
    gains = np.mean([build_channels(geometry, params, seed=seed).bs_gains / 64 for seed in range(1000)], axis=0)
    np.testing.assert_allclose(gains, path_loss(distances, params), rtol=0.02)


def test_doubling_distance_quarters_free_space_loss():
    params = ChannelParams(pathloss_exp=2.0)
    for distance in (1.0, 35.0, 400.0):
        assert path_loss(2 * distance, params) / path_loss(distance, params) == pytest.approx(0.25)


def test_coincident_devices_are_rejected():
    geometry = Geometry(bs_position=[0.0, 0.0, 10.0], device_positions=[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    with pytest.raises(ValueError, match='coincident'):
        build_channels(geometry, ChannelParams())


def test_snr_example():
    assert snr(0.5, 4e-4, 1e-4) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        snr(0.5, 4e-4, 0.0)


def test_snr_matrix_is_min_symmetric():
    d2d = np.array([[0.0, 2.0, 1.0], [2.0, 0.0, 3.0], [1.0, 3.0, 0.0]])
    channels = ChannelState(to_bs=np.ones((3, 2)), device_to_device=d2d)
    powers = np.array([1.0, 0.5, 2.0])
    gamma = snr_matrix(channels, powers, noise_w=0.5)
    np.testing.assert_allclose(gamma, gamma.T)
    np.testing.assert_allclose(np.diag(gamma), powers * 2.0 / 0.5)
    # |h_01|^2 = 4: device 1 hears 1.0 * 4 / 0.5 = 8, device 0 hears 0.5 * 4 / 0.5 = 4
    assert gamma[0, 1] == pytest.approx(4.0)
    with pytest.raises(ValueError):
        snr_matrix(channels, powers[:2], noise_w=0.5)


def test_uplink_gains_pick_leaders():
    channels = build_channels(line_geometry(), ChannelParams())
    np.testing.assert_array_equal(uplink_gains(channels, [2, 0]), channels.bs_gains[[2, 0]])


def test_layout_devices_stays_in_regions():
    regions = [dict(x=[-10.0, 0.0], y=[-5.0, 5.0], z=0.0, devices=4),
               dict(x=[10.0, 20.0], y=[-5.0, 5.0], z=1.5, devices=3)]
    geometry = layout_devices(regions, seed=2)
    positions = geometry.device_positions
    assert positions.shape == (7, 3)
    assert np.all((positions[:4, 0] >= -10) & (positions[:4, 0] <= 0))
    assert np.all((positions[4:, 0] >= 10) & (positions[4:, 0] <= 20))
    assert np.all(np.abs(positions[:, 1]) <= 5)
    np.testing.assert_array_equal(positions[4:, 2], 1.5)
    assert geometry.bs_antennas == 15


def test_export_channels(tmp_path):
    channels = build_channels(line_geometry(), ChannelParams())
    frame = read_frame(export_channels_csv(channels, str(tmp_path / 'channels.csv')))
    assert len(frame) == 3 + 3
    assert set(frame['kind']) == {'bs', 'd2d'}
