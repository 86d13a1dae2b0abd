"""Device geometry, path loss, channel coefficients and SNR matrices."""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from clusterfl.utility.helper import make_rng, write_frame, STREAM_CHANNEL

SPEED_OF_LIGHT = 2.998e8


@dataclass(frozen=True)
class Geometry:
    bs_position: np.ndarray
    device_positions: np.ndarray
    bs_antennas: int = 1

    def __post_init__(self):
        bs = np.asarray(self.bs_position, dtype=np.float64)
        devices = np.atleast_2d(np.asarray(self.device_positions, dtype=np.float64))
        if bs.shape != (3,) or devices.shape[1] != 3:
            raise ValueError("positions must be 3D")
        if not (np.all(np.isfinite(bs)) and np.all(np.isfinite(devices))):
            raise ValueError("positions must be finite")
        if int(self.bs_antennas) < 1:
            raise ValueError("bs_antennas must be >= 1")
        object.__setattr__(self, 'bs_position', bs)
        object.__setattr__(self, 'device_positions', devices)

    @property
    def device_count(self):
        return self.device_positions.shape[0]


@dataclass(frozen=True)
class ChannelParams:
    bs_gain_dbi: float = 5.0
    device_gain_dbi: float = 0.0
    carrier_hz: float = 915e6
    pathloss_exp: float = 3.76
    noise_power_w: float = 1e-4
    fading: str = 'none'

    def __post_init__(self):
        if self.carrier_hz <= 0:
            raise ValueError("carrier_hz must be positive")
        if self.pathloss_exp < 0:
            raise ValueError("pathloss_exp must be non-negative")
        if self.noise_power_w <= 0:
            raise ValueError("noise_power_w must be positive")
        if self.fading not in ('none', 'rayleigh'):
            raise ValueError("fading must be 'none' or 'rayleigh'")


@dataclass(frozen=True)
class ChannelState:
    to_bs: np.ndarray
    device_to_device: np.ndarray

    def __post_init__(self):
        to_bs = np.atleast_2d(np.asarray(self.to_bs, dtype=np.complex128))
        d2d = np.atleast_2d(np.asarray(self.device_to_device, dtype=np.complex128))
        if d2d.shape != (to_bs.shape[0], to_bs.shape[0]):
            raise ValueError("device_to_device must be K x K")
        if not np.allclose(d2d, d2d.T):
            raise ValueError("device_to_device must be symmetric")
        object.__setattr__(self, 'to_bs', to_bs)
        object.__setattr__(self, 'device_to_device', d2d)

    @property
    def bs_gains(self):
        """||h_k||^2 per device"""
        return np.sum(np.abs(self.to_bs) ** 2, axis=1)

    @property
    def d2d_gains(self):
        return np.abs(self.device_to_device) ** 2


def dbi_to_linear(dbi):
    return 10.0 ** (np.asarray(dbi, dtype=np.float64) / 10.0)


def path_loss(distance_m, params: ChannelParams, tx_gain_dbi=None, rx_gain_dbi=None):
    """PL = G_tx G_rx (c / (4 pi f_c d))^P

    Arguments:
        distance_m {float|ndarray} -- Link distance in meters, must be positive
        params {ChannelParams} -- Channel parameters

    Keyword Arguments:
        tx_gain_dbi {float} -- Overrides the BS gain (default: {None})
        rx_gain_dbi {float} -- Overrides the device gain (default: {None})

    Returns:
        float|ndarray -- Linear power gain
    """
    distance = np.asarray(distance_m, dtype=np.float64)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive, got {}".format(distance_m))
    tx = params.bs_gain_dbi if tx_gain_dbi is None else tx_gain_dbi
    rx = params.device_gain_dbi if rx_gain_dbi is None else rx_gain_dbi
    gains = dbi_to_linear(tx) * dbi_to_linear(rx)
    loss = gains * (SPEED_OF_LIGHT / (4.0 * np.pi * params.carrier_hz * distance)) ** params.pathloss_exp
    return float(loss) if loss.ndim == 0 else loss


def pairwise_distances(positions):
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def build_channels(geometry: Geometry, params: ChannelParams, seed=0):
    """Channel coefficients to the BS and between devices

    Without fading every antenna coefficient is sqrt(PL). Rayleigh fading draws
    sqrt(PL/2) (x + iy), so E ||h_k||^2 = N_a PL(d_k). Device-to-device links use G_D on
    both ends and are generated once per unordered pair.

    Returns:
        ChannelState -- K x N_a and K x K coefficients
    """
    K, n_a = geometry.device_count, int(geometry.bs_antennas)
    to_bs_distance = np.linalg.norm(geometry.device_positions - geometry.bs_position, axis=1)
    pl_bs = path_loss(to_bs_distance, params)

    distances = pairwise_distances(geometry.device_positions)
    upper = np.triu_indices(K, k=1)
    if np.any(distances[upper] <= 0):
        raise ValueError("coincident device positions")
    pl_d2d = np.zeros((K, K))
    if upper[0].size:
        pl_d2d[upper] = path_loss(distances[upper], params, tx_gain_dbi=params.device_gain_dbi)

    if params.fading == 'rayleigh':
        rng = make_rng(seed, STREAM_CHANNEL)
        fading_bs = (rng.normal(size=(K, n_a)) + 1j * rng.normal(size=(K, n_a))) / np.sqrt(2.0)
        fading_d2d = (rng.normal(size=(K, K)) + 1j * rng.normal(size=(K, K))) / np.sqrt(2.0)
    else:
        fading_bs = np.ones((K, n_a), dtype=np.complex128)
        fading_d2d = np.ones((K, K), dtype=np.complex128)

    to_bs = np.sqrt(pl_bs)[:, None] * fading_bs
    d2d = np.zeros((K, K), dtype=np.complex128)
    d2d[upper] = np.sqrt(pl_d2d[upper]) * fading_d2d[upper]
    d2d = d2d + d2d.T
    logging.debug("Built channels for %d devices, mean ||h||^2 = %.3e", K, np.mean(np.abs(to_bs) ** 2) * n_a)
    return ChannelState(to_bs=to_bs, device_to_device=d2d)


def snr(power_w, channel_gain, noise_w):
    if np.any(np.asarray(noise_w) <= 0):
        raise ValueError("noise_w must be positive")
    return np.asarray(power_w) * np.asarray(channel_gain) / noise_w


def snr_matrix(channels: ChannelState, powers, noise_w):
    """Gamma[i, i] = device-to-BS SNR, Gamma[i, j] = min(gamma_ij, gamma_ji) for i != j"""
    powers = np.asarray(powers, dtype=np.float64)
    K = channels.to_bs.shape[0]
    if powers.shape != (K,):
        raise ValueError("need one power per device, got {} for {} devices".format(powers.shape, K))
    directed = snr(powers[:, None], channels.d2d_gains, noise_w)  # row transmits
    gamma = np.minimum(directed, directed.T)
    np.fill_diagonal(gamma, snr(powers, channels.bs_gains, noise_w))
    return gamma


def uplink_gains(channels: ChannelState, leaders):
    return channels.bs_gains[np.asarray(leaders, dtype=np.int64)]


def layout_devices(regions, bs_position=(-50.0, 0.0, 10.0), bs_antennas=15, seed=0):
    """Uniformly places devices in axis-aligned regions

    Arguments:
        regions {list[dict]} -- Each with x, y ranges, z height and a device count

    Returns:
        Geometry -- Devices ordered region by region
    """
    rng = make_rng(seed)
    positions = []
    for region in regions:
        count = int(region['devices'])
        x = rng.uniform(region['x'][0], region['x'][1], size=count)
        y = rng.uniform(region['y'][0], region['y'][1], size=count)
        z = np.full(count, float(region.get('z', 0.0)))
        positions.append(np.column_stack([x, y, z]))
    return Geometry(bs_position=np.asarray(bs_position, dtype=np.float64),
                    device_positions=np.vstack(positions), bs_antennas=int(bs_antennas))


def export_channels_csv(channels: ChannelState, file_path):
    K = channels.to_bs.shape[0]
    records = [dict(kind='bs', i=k, j=-1, gain=g) for k, g in enumerate(channels.bs_gains)]
    d2d = channels.d2d_gains
    records += [dict(kind='d2d', i=i, j=j, gain=d2d[i, j]) for i in range(K) for j in range(i + 1, K)]
    write_frame(pd.DataFrame.from_records(records), file_path)
    return file_path
