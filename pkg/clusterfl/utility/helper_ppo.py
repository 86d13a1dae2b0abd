"""Joint transmit power / local update allocation under energy and power budgets.

The environment is the deterministic convergence bound: an action sets per-cluster powers and
extra local passes, the bound gives the GAP and the energy model the per-round cost. A small
torch actor-critic trained with the clipped PPO surrogate searches the action space.
"""
import copy
import math
import time
import struct
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torch.optim as optim
from scipy.special import expit
from torch.distributions import Normal
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from clusterfl.utility.helper import make_rng, STREAM_POLICY, STREAM_SEARCH
from clusterfl.utility.helper_bound import gap as bound_gap, a_factor, ConvergenceParams
from clusterfl.utility.helper_channel import snr

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
CHECKPOINT_MAGIC = b'CFLPPO'
CHECKPOINT_VERSION = 1
FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class EnergyModel:
    bandwidth_hz: np.ndarray
    model_bits: float
    cycles_per_sample: np.ndarray
    cpu_hz: np.ndarray
    compute_power_w: float = 0.1
    e_total_j: float = math.inf
    p_max: float = 2.0

    def __post_init__(self):
        for name in ('bandwidth_hz', 'cycles_per_sample', 'cpu_hz'):
            value = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if np.any(value <= 0):
                raise ValueError("{} must be positive".format(name))
            object.__setattr__(self, name, value)
        if self.model_bits <= 0 or self.compute_power_w <= 0 or self.e_total_j <= 0 or self.p_max <= 0:
            raise ValueError("model_bits, compute_power_w, e_total_j and p_max must be positive")


@dataclass(frozen=True)
class AllocationAction:
    powers: np.ndarray
    extra_updates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'powers', np.atleast_1d(np.asarray(self.powers, dtype=np.float64)))
        object.__setattr__(self, 'extra_updates', np.atleast_1d(np.asarray(self.extra_updates, dtype=np.int64)))
        if self.powers.shape != self.extra_updates.shape:
            raise ValueError("need one power and one update count per cluster")
        if np.any(self.extra_updates < 0):
            raise ValueError("extra_updates must be non-negative")

    @property
    def passes(self):
        return 1 + self.extra_updates

    def to_dict(self):
        return dict(powers=self.powers.tolist(), extra_updates=self.extra_updates.tolist(),
                    passes=self.passes.tolist(), power_sq_sum=float(np.sum(self.powers ** 2)))


@dataclass(frozen=True)
class RlState:
    prev_powers: np.ndarray
    prev_n: np.ndarray
    prev_gap: float
    prev_energy: float

    def vector(self, p_cap=1.0, n_scale=1.0, gap_scale=1.0, energy_scale=1.0, clip=10.0):
        """Scaled feature vector fed to the networks"""
        return np.concatenate([self.prev_powers / p_cap, self.prev_n / max(n_scale, 1.0),
                               [min(self.prev_gap / gap_scale, clip), min(self.prev_energy / energy_scale, clip)]])


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    discount: float = 0.95
    penalty_alpha: float = 10.0
    epochs_per_update: int = 4
    trajectories: int = 8
    episodes: int = 60
    steps_per_episode: int = 10
    actor_lr: float = 3e-3
    critic_lr: float = 1e-2
    hidden: tuple = (64, 64)
    reward_floor: float = -50.0
    init_log_std: float = 0.0

    def __post_init__(self):
        if not 0 < self.clip_eps:
            raise ValueError("clip_eps must be positive")
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)


def energy_breakdown(powers, passes, leader_gains, noise_w, energy: EnergyModel, members):
    """Per-cluster transmission and computation energy of one round

    transmission_c = p_c q / (B_c log2(1 + gamma_c)), infinite when gamma_c = 0
    computation_c = N_c sum_{k in c} (l_k q / f_k) p_cmp

    Returns:
        tuple(ndarray, ndarray) -- transmission, computation
    """
    powers = np.atleast_1d(np.asarray(powers, dtype=np.float64))
    passes = np.atleast_1d(np.asarray(passes, dtype=np.float64))
    gamma = snr(powers, np.asarray(leader_gains, dtype=np.float64), noise_w)
    bandwidth = np.broadcast_to(energy.bandwidth_hz, powers.shape)
    rate = bandwidth * np.log2(1.0 + gamma)
    with np.errstate(divide='ignore', invalid='ignore'):
        transmission = np.where(rate > 0, powers * energy.model_bits / rate, np.inf)
    per_pass = np.array([np.sum(energy.cycles_per_sample[m] * energy.model_bits / energy.cpu_hz[m])
                         for m in members]) * energy.compute_power_w
    return transmission, passes * per_pass


def energy_per_round(action: AllocationAction, leader_gains, noise_w, energy: EnergyModel, members):
    transmission, computation = energy_breakdown(action.powers, action.passes, leader_gains, noise_w, energy, members)
    return float(np.sum(transmission) + np.sum(computation))


def project_action(raw, mask, energy: EnergyModel, p_cap=1.0, p_min=0.0, n_cap=None):
    """Maps an unconstrained 2C vector onto a feasible allocation

    Powers go through a sigmoid onto (p_min, p_cap] and are scaled down together when
    sum p^2 exceeds P_max. Update counts are round(softplus(raw)), capped, and zeroed where the
    CAMU gate is closed.
    """
    raw = np.nan_to_num(np.asarray(raw, dtype=np.float64), nan=0.0, posinf=50.0, neginf=-50.0)
    mask = np.atleast_1d(np.asarray(mask, dtype=bool))
    C = mask.size
    if raw.shape != (2 * C,):
        raise ValueError("raw action must have length 2C = {}".format(2 * C))
    powers = p_min + (p_cap - p_min) * expit(np.clip(raw[:C], -700, 700))
    square_sum = np.sum(powers ** 2)
    if square_sum > energy.p_max:
        powers = powers * np.sqrt(energy.p_max / square_sum)
    extra = np.rint(np.logaddexp(0.0, raw[C:]))
    if n_cap is not None:
        extra = np.minimum(extra, n_cap)
    extra[~mask] = 0
    return AllocationAction(powers=powers, extra_updates=extra.astype(np.int64))


def reward(gap_value, energy, cfg: PpoConfig, e_total):
    """-gap - alpha max(0, energy - E_total); cfg.reward_floor when the gap or the energy is not finite

    A non-convergent allocation (A >= 1 or A <= 0) reaches here with an infinite gap.
    """
    if gap_value is None or not np.isfinite(gap_value) or not np.isfinite(energy):
        return float(cfg.reward_floor)
    return float(-gap_value - cfg.penalty_alpha * max(0.0, energy - e_total))


def advantage(r, v_s, v_next, discount):
    """One-step TD advantage r + discount V(s') - V(s)"""
    return r + discount * v_next - v_s


def mlp(sizes, rng, output_scale=1.0):
    """Tanh network with a linear output layer, float64, weights drawn N(0, 1/fan_in) from `rng`"""
    layers = []
    pairs = list(zip(sizes[:-1], sizes[1:]))
    for i, (fan_in, fan_out) in enumerate(pairs):
        linear = nn.Linear(int(fan_in), int(fan_out), dtype=torch.float64)
        scale = 1.0 / np.sqrt(fan_in) * (output_scale if i == len(pairs) - 1 else 1.0)
        with torch.no_grad():
            linear.weight.copy_(torch.from_numpy(rng.normal(0.0, scale, size=(int(fan_out), int(fan_in)))))
            linear.bias.zero_()
        layers.append(linear)
        if i < len(pairs) - 1:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


def flat_size(module: nn.Module):
    return sum(p.numel() for p in module.parameters())


class PolicyValueNets(nn.Module):
    """Gaussian actor (mean and log-std heads) and a scalar critic"""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), seed=0, init_log_std=0.0):
        super().__init__()
        rng = make_rng(seed, STREAM_POLICY, 0)
        self.state_dim, self.action_dim = int(state_dim), int(action_dim)
        self.actor = mlp([state_dim, *hidden, 2 * action_dim], rng, output_scale=0.01)
        with torch.no_grad():
            self.actor[-1].bias[action_dim:] = init_log_std
        self.critic = mlp([state_dim, *hidden, 1], rng)

    @property
    def parameter_count(self):
        return flat_size(self)

    def forward(self, states):
        """Mean, clipped log-std and raw log-std tensors for a batch of states"""
        out = self.actor(torch.as_tensor(np.atleast_2d(states), dtype=torch.float64))
        mean, raw_log_std = torch.chunk(out, 2, dim=-1)
        return mean, raw_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX), raw_log_std

    def distribution(self, states):
        mean, log_std, _ = self(states)
        return Normal(mean, log_std.exp())

    def state_values(self, states):
        return self.critic(torch.as_tensor(np.atleast_2d(states), dtype=torch.float64))[:, 0]

    def policy(self, states):
        with torch.no_grad():
            return tuple(t.numpy() for t in self(states))

    def value(self, states):
        with torch.no_grad():
            return self.state_values(states).numpy()

    def get_flat(self):
        return parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.parameter_count:
            raise ValueError("expected {} parameters, got {}".format(self.parameter_count, flat.size))
        with torch.no_grad():
            vector_to_parameters(torch.from_numpy(flat.copy()), self.parameters())


def gaussian_log_prob(actions, mean, log_std):
    """Diagonal Gaussian log-density summed over action dimensions"""
    mean, log_std = torch.as_tensor(mean, dtype=torch.float64), torch.as_tensor(log_std, dtype=torch.float64)
    dist = Normal(mean, log_std.exp())
    return dist.log_prob(torch.as_tensor(actions, dtype=torch.float64)).sum(-1).numpy()


def clipped_surrogate(nets: PolicyValueNets, states, actions, old_log_prob, advantages, clip_eps):
    """E[min(r A, clip(r, 1-eps, 1+eps) A)] as a differentiable tensor, plus diagnostics"""
    actions = torch.as_tensor(actions, dtype=torch.float64)
    old_log_prob = torch.as_tensor(old_log_prob, dtype=torch.float64)
    advantages = torch.as_tensor(advantages, dtype=torch.float64)
    log_prob = nets.distribution(states).log_prob(actions).sum(-1)
    ratio = torch.exp(log_prob - old_log_prob)
    surr1 = ratio * advantages
    surr2 = torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    objective = torch.min(surr1, surr2).mean()
    diagnostics = dict(mean_ratio=ratio.detach().mean().item(),
                       clip_fraction=(surr1 > surr2).detach().double().mean().item())
    return objective, diagnostics


def _actor_gradient(nets: PolicyValueNets, objective):
    grads = torch.autograd.grad(objective, list(nets.actor.parameters()))
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy()


def surrogate_gradient(nets: PolicyValueNets, states, actions, old_log_prob, advantages, clip_eps):
    """Clipped surrogate and its actor gradient

    Returns:
        tuple(float, ndarray, dict) -- objective, flat gradient (ascent direction), diagnostics
    """
    objective, diagnostics = clipped_surrogate(nets, states, actions, old_log_prob, advantages, clip_eps)
    return objective.item(), _actor_gradient(nets, objective), diagnostics


def policy_gradient(nets: PolicyValueNets, states, actions, advantages):
    """Vanilla E[A grad log pi] on the actor parameters"""
    log_prob = nets.distribution(states).log_prob(torch.as_tensor(actions, dtype=torch.float64)).sum(-1)
    return _actor_gradient(nets, (torch.as_tensor(advantages, dtype=torch.float64) * log_prob).mean())


def make_optimizers(nets: PolicyValueNets, cfg: PpoConfig):
    return (optim.Adam(nets.actor.parameters(), lr=cfg.actor_lr),
            optim.Adam(nets.critic.parameters(), lr=cfg.critic_lr))


def ppo_update(batch, nets: PolicyValueNets, cfg: PpoConfig, actor_opt: optim.Optimizer, critic_opt: optim.Optimizer):
    """epochs_per_update passes of clipped-surrogate ascent on the actor and TD regression on the critic

    Critic targets and advantages are frozen at the start of each epoch. batch['advantages'], when
    present, replaces the critic-based advantages. A non-finite loss restores the parameters and
    optimizer states held before the update.

    Arguments:
        batch {dict} -- states, actions, rewards, next_states, old_log_prob
        nets {PolicyValueNets} -- Updated in place

    Returns:
        dict -- diagnostics: mean_ratio, clip_fraction, actor_objective, critic_loss, aborted
    """
    states, actions = batch['states'], batch['actions']
    rewards, next_states, old_log_prob = batch['rewards'], batch['next_states'], batch['old_log_prob']
    if len(rewards) == 0:
        raise ValueError("ppo_update needs a nonempty batch")
    rewards = torch.as_tensor(rewards, dtype=torch.float64)
    snapshot = (nets.get_flat(), copy.deepcopy(actor_opt.state_dict()), copy.deepcopy(critic_opt.state_dict()))
    diagnostics = dict(aborted=False, epochs=0, mean_ratio=1.0, clip_fraction=0.0, actor_objective=0.0,
                       critic_loss=0.0)
    for _ in range(int(cfg.epochs_per_update)):
        with torch.no_grad():
            v_s, v_next = nets.state_values(states), nets.state_values(next_states)
            targets = rewards + cfg.discount * v_next
            advantages = batch.get('advantages')
            if advantages is None:
                advantages = advantage(rewards, v_s, v_next, cfg.discount)
        objective, surrogate_diag = clipped_surrogate(nets, states, actions, old_log_prob, advantages, cfg.clip_eps)
        critic_loss = F.mse_loss(nets.state_values(states), targets)

        actor_opt.zero_grad()
        critic_opt.zero_grad()
        (-objective).backward()
        critic_loss.backward()
        grads = [p.grad for p in nets.parameters() if p.grad is not None]
        finite = torch.isfinite(objective) and torch.isfinite(critic_loss) and \
            all(torch.isfinite(g).all() for g in grads)
        if not finite:
            nets.set_flat(snapshot[0])
            actor_opt.load_state_dict(snapshot[1])
            critic_opt.load_state_dict(snapshot[2])
            logging.warning("Non-finite PPO loss, update aborted and parameters restored")
            diagnostics['aborted'] = True
            return diagnostics
        actor_opt.step()
        critic_opt.step()
        diagnostics.update(surrogate_diag, actor_objective=objective.item(), critic_loss=critic_loss.item())
        diagnostics['epochs'] += 1
    return diagnostics


@dataclass(frozen=True)
class Evaluation:
    gap: float
    energy: float
    reward: float
    feasible: bool
    a_factor: float


class AllocationEnvironment:
    """Deterministic bound-based environment: an allocation maps to (gap, energy, reward)

    Rewards are computed on the GAP relative to the baseline allocation and on the energy
    relative to E_total, so both terms are O(1) for the networks.
    """

    def __init__(self, params: ConvergenceParams, energy: EnergyModel, leader_gains, noise_w, members, mask,
                 cfg: PpoConfig, p_cap=1.0, p_min=0.0, n_cap=3, baseline=None, fixed_powers=None):
        self.params, self.energy, self.cfg = params, energy, cfg
        self.leader_gains = np.asarray(leader_gains, dtype=np.float64)
        self.noise_w = noise_w
        self.members = [list(m) for m in members]
        self.mask = np.atleast_1d(np.asarray(mask, dtype=bool))
        self.C = self.mask.size
        self.p_cap, self.p_min = p_cap, p_min
        self.n_cap = np.broadcast_to(np.asarray(n_cap, dtype=np.int64), (self.C,)).copy()
        self.fixed_powers = None if fixed_powers is None else np.asarray(fixed_powers, dtype=np.float64)
        if baseline is None:
            uniform = min(p_cap, math.sqrt(energy.p_max / self.C))
            baseline = AllocationAction(np.full(self.C, uniform), np.zeros(self.C, dtype=np.int64))
        self.baseline = self._gate(self._apply_fixed(baseline))
        self.gap_scale, self.energy_scale = 1.0, 1.0
        base = self.evaluate(self.baseline)
        if np.isfinite(base.gap) and base.gap > 0:
            self.gap_scale = base.gap
        self.energy_scale = energy.e_total_j if np.isfinite(energy.e_total_j) else max(base.energy, 1e-300)
        self.baseline_evaluation = self.evaluate(self.baseline)

    @property
    def state_dim(self):
        return 2 * self.C + 2

    @property
    def action_dim(self):
        return 2 * self.C

    def _apply_fixed(self, action):
        if self.fixed_powers is None:
            return action
        return AllocationAction(self.fixed_powers, action.extra_updates)

    def _gate(self, action):
        """Update counts capped at n_cap and zeroed on clusters the CAMU mask leaves out"""
        extra = np.minimum(action.extra_updates, self.n_cap)
        extra[~self.mask] = 0
        return AllocationAction(action.powers, extra)

    def project(self, raw):
        return self._apply_fixed(project_action(raw, self.mask, self.energy, self.p_cap, self.p_min, self.n_cap))

    def evaluate(self, action: AllocationAction):
        params = self.params.with_allocation(powers=action.powers, n_per_cluster=action.passes)
        A = a_factor(params)
        try:
            gap_value = bound_gap(params)
        except ValueError:
            gap_value = math.inf
        if A <= 0:
            gap_value = math.inf
        energy = energy_per_round(action, self.leader_gains, self.noise_w, self.energy, self.members)
        r = reward(gap_value / self.gap_scale, energy / self.energy_scale, self.cfg,
                   self.energy.e_total_j / self.energy_scale)
        feasible = (np.isfinite(gap_value) and energy <= self.energy.e_total_j * (1 + FEASIBILITY_TOL)
                    and np.sum(action.powers ** 2) <= self.energy.p_max + FEASIBILITY_TOL)
        return Evaluation(gap=gap_value, energy=energy, reward=r, feasible=bool(feasible), a_factor=A)

    def state_vector(self, action: AllocationAction, evaluation: Evaluation):
        gap_value = evaluation.gap if np.isfinite(evaluation.gap) else 10.0 * self.gap_scale
        energy = evaluation.energy if np.isfinite(evaluation.energy) else 10.0 * self.energy_scale
        state = RlState(action.powers, action.extra_updates.astype(np.float64), gap_value, energy)
        return state.vector(self.p_cap, float(self.n_cap.max()), self.gap_scale, self.energy_scale)


@dataclass
class AllocationResult:
    action: AllocationAction = None
    evaluation: Evaluation = None
    feasible: bool = False
    reward_curve: list = field(default_factory=list)
    evaluations: int = 0
    diagnostics: list = field(default_factory=list)
    wall_time_s: float = 0.0
    nets: PolicyValueNets = None

    def offer(self, action, evaluation):
        """Keeps the feasible action with the lowest GAP, else the least energy overshoot"""
        self.evaluations += 1
        if evaluation.feasible:
            if (not self.feasible or evaluation.gap < self.evaluation.gap
                    or (evaluation.gap == self.evaluation.gap and evaluation.energy < self.evaluation.energy)):
                self.action, self.evaluation, self.feasible = action, evaluation, True
        elif not self.feasible and (self.evaluation is None or evaluation.energy < self.evaluation.energy):
            self.action, self.evaluation = action, evaluation

    def to_dict(self):
        return dict(action=self.action.to_dict() if self.action is not None else None,
                    gap=self.evaluation.gap if self.evaluation else None,
                    energy_J=self.evaluation.energy if self.evaluation else None,
                    reward=self.evaluation.reward if self.evaluation else None,
                    a_factor=self.evaluation.a_factor if self.evaluation else None,
                    feasible=self.feasible, infeasible=not self.feasible, evaluations=self.evaluations,
                    wall_time_s=self.wall_time_s)


def optimize(env: AllocationEnvironment, cfg: PpoConfig, seed=0):
    """PPO search over allocations

    Every episode runs cfg.trajectories parallel trajectories of cfg.steps_per_episode steps from
    the baseline state, then one ppo_update. The baseline action and the greedy (mean) action after
    each update are candidates too.

    Returns:
        AllocationResult -- best feasible action (or the least violating one), per-episode mean reward
    """
    t0 = time.perf_counter()
    rng = make_rng(seed, STREAM_POLICY, 1)
    nets = PolicyValueNets(env.state_dim, env.action_dim, cfg.hidden, seed=seed, init_log_std=cfg.init_log_std)
    actor_opt, critic_opt = make_optimizers(nets, cfg)
    result = AllocationResult(nets=nets)
    result.offer(env.baseline, env.baseline_evaluation)
    initial_state = env.state_vector(env.baseline, env.baseline_evaluation)

    for episode in range(int(cfg.episodes)):
        states = np.tile(initial_state, (cfg.trajectories, 1))
        buffers = dict(states=[], actions=[], rewards=[], next_states=[], old_log_prob=[])
        for _ in range(int(cfg.steps_per_episode)):
            mean, log_std, _ = nets.policy(states)
            raw = mean + np.exp(log_std) * rng.normal(size=mean.shape)
            log_prob = gaussian_log_prob(raw, mean, log_std)
            rewards, next_states = [], []
            for row in raw:
                action = env.project(row)
                evaluation = env.evaluate(action)
                result.offer(action, evaluation)
                rewards.append(evaluation.reward)
                next_states.append(env.state_vector(action, evaluation))
            next_states = np.array(next_states)
            for key, value in (('states', states), ('actions', raw), ('rewards', np.array(rewards)),
                               ('next_states', next_states), ('old_log_prob', log_prob)):
                buffers[key].append(value)
            states = next_states
        batch = {key: np.concatenate(value) for key, value in buffers.items()}
        diagnostics = ppo_update(batch, nets, cfg, actor_opt, critic_opt)
        result.diagnostics.append(diagnostics)

        greedy, _, _ = nets.policy(initial_state[None, :])
        greedy_action = env.project(greedy[0])
        result.offer(greedy_action, env.evaluate(greedy_action))
        result.reward_curve.append(float(np.mean(batch['rewards'])))
        logging.debug("Episode %d: mean reward %.4f, clip fraction %.3f", episode, result.reward_curve[-1],
                      diagnostics['clip_fraction'])

    result.wall_time_s = time.perf_counter() - t0
    if not result.feasible:
        logging.warning("No feasible allocation found, returning the least violating action")
    logging.info("PPO allocation Took (s): %.2f; best gap %.4g, energy %.4g J, feasible %r", result.wall_time_s,
                 result.evaluation.gap, result.evaluation.energy, result.feasible)
    return result


def random_search(env: AllocationEnvironment, samples=200, seed=0, scale=2.0):
    """Best of `samples` random raw actions, projected like the policy's"""
    t0 = time.perf_counter()
    rng = make_rng(seed, STREAM_SEARCH)
    result = AllocationResult()
    for raw in rng.normal(0.0, scale, size=(int(samples), env.action_dim)):
        action = env.project(raw)
        result.offer(action, env.evaluate(action))
    result.wall_time_s = time.perf_counter() - t0
    return result


def complexity_report(cfg: PpoConfig, parameter_count, C, wall_time_s=None):
    """Operation counts W + C + K N W per iteration and E T_RL times that in total"""
    per_iteration = parameter_count + C + cfg.epochs_per_update * cfg.trajectories * parameter_count
    return dict(parameter_count=int(parameter_count), clusters=int(C), per_iteration=int(per_iteration),
                total=int(cfg.episodes * cfg.steps_per_episode * per_iteration), wall_time_s=wall_time_s)


def save_checkpoint(nets: PolicyValueNets, file_path):
    payload = nets.get_flat().astype('<f8')
    with open(file_path, 'wb') as file:
        file.write(CHECKPOINT_MAGIC)
        file.write(struct.pack('<HI', CHECKPOINT_VERSION, payload.size))
        file.write(payload.tobytes())
    return file_path


def load_checkpoint(nets: PolicyValueNets, file_path):
    with open(file_path, 'rb') as file:
        magic = file.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("{} is not a policy checkpoint".format(file_path))
        version, count = struct.unpack('<HI', file.read(6))
        if version != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version {}".format(version))
        if count != nets.parameter_count:
            raise ValueError("checkpoint holds {} parameters, networks need {}".format(count, nets.parameter_count))
        payload = np.frombuffer(file.read(8 * count), dtype='<f8')
    if payload.size != count:
        raise ValueError("{} is truncated".format(file_path))
    nets.set_flat(payload.astype(np.float64))
    return nets
