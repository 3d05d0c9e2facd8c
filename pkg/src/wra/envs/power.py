"""Multi-link power-control environment on the fading interference channel.

Each transmitter is an agent adjusting its power by a discrete dB delta
(or switching off); everyone receives the same reward, the system-wide
weighted sum rate. Training is centralized: one shared DQN learns from all
agents' experiences and every agent executes a copy of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..channels import FadingState, InterferenceGeometry, evolve_fading, sample_interference_channel
from ..nn import Mlp, forward, make_optimizer, mlp_init
from ..optim import sinr, sum_rate, wmmse_power
from ..rl import (
    Experience,
    ExplorationSchedule,
    ReplayBuffer,
    dqn_train_step,
    epsilon_greedy,
    replay_push,
    sync_target,
)
from ..seeding import stream

# action -> power delta in dB; the last action turns the link off
DB_DELTAS = (0.0, -1.0, 1.0, -3.0, 3.0)
ACTION_OFF = len(DB_DELTAS)
N_ACTIONS = len(DB_DELTAS) + 1


@dataclass
class PowerEnvConfig:
    n_links: int = 4
    neighbors: int = 2  # C interferers and C victims reported per agent
    p_max: float = 1.0
    p_min_on: float = 1e-3  # delta actions clamp here, so links can revive
    noise: float = 1e-7
    weights: np.ndarray | None = None
    geometry: InterferenceGeometry = field(default_factory=InterferenceGeometry)
    base: str = "log2"
    obs_gain_scale: float = 10.0  # gain features in tens of dB over noise
    isolated: bool = False  # zero all cross gains (orthogonal links)

    def __post_init__(self):
        if self.n_links < 1:
            raise ValueError("need at least one link")
        if not 0.0 < self.p_min_on <= self.p_max:
            raise ValueError("need 0 < p_min_on <= p_max")
        if self.weights is None:
            self.weights = np.ones(self.n_links)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.n_links,) or np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative, one per link")

    @property
    def obs_width(self) -> int:
        return 2 + 3 * self.neighbors


@dataclass
class PowerEnvState:
    cfg: PowerEnvConfig
    fading: FadingState
    powers: np.ndarray
    t: int = 0

    @property
    def gains(self) -> np.ndarray:
        return self.fading.gains


def _gain_feature(g, cfg) -> np.ndarray:
    """log10 of the full-power SNR a gain would produce, in tens of dB;
    zero gain maps to the feature floor.
    """
    snr = np.maximum(np.asarray(g) * cfg.p_max / cfg.noise, 1e-12)
    return np.log10(snr) / cfg.obs_gain_scale * 10.0


def power_observation(state: PowerEnvState, i: int) -> np.ndarray:
    """Agent i's view, width 2 + 3C:
    [own power / p_max, own direct-gain feature,
     C strongest interferer gain features, those interferers' powers / p_max,
     C strongest victim gain features], zero-padded when N - 1 < C.
    """
    cfg = state.cfg
    g = state.gains
    n, c = cfg.n_links, cfg.neighbors
    own = np.array([state.powers[i] / cfg.p_max, _gain_feature(g[i, i], cfg)])

    inter_gain = np.zeros(c)
    inter_power = np.zeros(c)
    victim_gain = np.zeros(c)
    if n > 1:
        others = np.array([k for k in range(n) if k != i])
        into_me = g[others, i]  # tx k -> my receiver
        order = others[np.argsort(into_me)[::-1]][:c]
        m = order.size
        inter_gain[:m] = _gain_feature(g[order, i], cfg)
        inter_power[:m] = state.powers[order] / cfg.p_max
        from_me = g[i, others]  # my tx -> their receivers
        victims = others[np.argsort(from_me)[::-1]][:c]
        victim_gain[:m] = _gain_feature(g[i, victims], cfg)
    return np.concatenate([own, inter_gain, inter_power, victim_gain])


def _all_observations(state: PowerEnvState) -> list:
    return [power_observation(state, i) for i in range(state.cfg.n_links)]


def power_env_reset(cfg: PowerEnvConfig, seed=0):
    """Fresh channel draw; every link starts at p_max / 2."""
    fading = sample_interference_channel(cfg.n_links, cfg.geometry, seed)
    if cfg.isolated:
        fading.large_scale = np.diag(np.diag(fading.large_scale))
    state = PowerEnvState(cfg, fading, np.full(cfg.n_links, cfg.p_max / 2.0))
    return state, _all_observations(state)


def power_env_step(state: PowerEnvState, actions):
    """Apply one dB-delta (or off) action per agent, evolve the fading one
    slot, and pay everyone the weighted sum rate of the new configuration.

    Returns (state', observations, shared_reward, info).
    """
    cfg = state.cfg
    actions = np.asarray(actions, dtype=int)
    if actions.shape != (cfg.n_links,):
        raise ValueError(f"need one action per agent, got shape {actions.shape}")
    if np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise ValueError(f"action indices must lie in [0, {N_ACTIONS})")

    powers = state.powers.copy()
    off = actions == ACTION_OFF
    deltas = np.array([DB_DELTAS[a] for a in np.where(off, 0, actions)])
    powers = np.clip(powers * 10.0 ** (deltas / 10.0), cfg.p_min_on, cfg.p_max)
    powers[off] = 0.0

    fading = evolve_fading(state.fading)
    new = PowerEnvState(cfg, fading, powers, state.t + 1)
    gains = new.gains
    reward = sum_rate(gains, powers, cfg.weights, cfg.noise, cfg.base)
    gamma = sinr(gains, powers, cfg.noise)
    info = {
        "sinr": gamma,
        "rates": np.log1p(gamma) / (np.log(2.0) if cfg.base == "log2" else 1.0),
        "powers": powers.copy(),
    }
    return new, _all_observations(new), reward, info


def write_power_eval_csv(rows, path) -> None:
    """Per-episode evaluation dump: (slot, link, power_w, sinr_db, rate)."""
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slot", "link", "power_w", "sinr_db", "rate"])
        for slot, link, power_w, sinr_db, rate in rows:
            w.writerow([int(slot), int(link), f"{float(power_w):.9g}",
                        f"{float(sinr_db):.6g}", f"{float(rate):.9g}"])


# ---------------------------------------------------------------------------
# Shared-DQN training and evaluation


@dataclass
class PowerTrainConfig:
    episodes: int = 400
    slots_per_episode: int = 50
    hidden: tuple = (64, 32)
    lr: float = 1e-3
    batch: int = 32
    buffer_capacity: int = 50_000
    gamma: float = 0.5  # fresh channel draws keep the horizon short
    target_sync: int = 100
    eps: ExplorationSchedule = field(
        default_factory=lambda: ExplorationSchedule(1.0, 0.02, 15_000)
    )


def train_power_dqn(cfg: PowerEnvConfig, train: PowerTrainConfig, master_seed=0, replica=0):
    """Centralized training, distributed execution: all agents' transitions
    feed one replay buffer and one network. Returns (net, log_rows).
    """
    agent_rng = stream(master_seed, replica, "agent")
    layer_sizes = (cfg.obs_width, *train.hidden, N_ACTIONS)
    net = mlp_init(layer_sizes, "relu", seed=int(agent_rng.integers(2**31)))
    target = sync_target(net)
    opt = make_optimizer("adam", train.lr, net)
    buf = ReplayBuffer(train.buffer_capacity)

    env_seed_base = int(stream(master_seed, replica, "env").integers(2**62))
    log_rows = []
    step = 0
    for episode in range(train.episodes):
        state, obs = power_env_reset(cfg, seed=env_seed_base + episode)
        for _ in range(train.slots_per_episode):
            eps = train.eps.epsilon(step)
            q_all = forward(net, np.stack(obs)).output
            actions = [epsilon_greedy(q_all[i], eps, agent_rng) for i in range(cfg.n_links)]
            state, obs_next, reward, _ = power_env_step(state, actions)
            for i in range(cfg.n_links):
                replay_push(buf, Experience(obs[i], actions[i], reward, obs_next[i]))
            obs = obs_next
            loss = np.nan
            if len(buf) >= train.batch:
                net, opt, loss = dqn_train_step(
                    net, target, buf, train.batch, train.gamma, opt, agent_rng
                )
                if (step + 1) % train.target_sync == 0:
                    target = sync_target(net)
            step += 1
            if step % 500 == 0:
                log_rows.append(
                    (step, episode, eps, loss, float(q_all.mean()), reward)
                )
    return net, log_rows


def greedy_power_actions(net: Mlp, obs_list) -> list:
    q = forward(net, np.stack(obs_list)).output
    return [int(np.argmax(row)) for row in q]


def evaluate_power_policy(net: Mlp, cfg: PowerEnvConfig, seed, slots=500, episode_len=50):
    """Greedy rollout against the per-slot perfect-CSI WMMSE benchmark.

    Fresh channels every episode_len slots. Returns (ratio, dqn_mean,
    wmmse_mean, rows) with rows ready for write_power_eval_csv.
    """
    dqn_total = 0.0
    wmmse_total = 0.0
    rows = []
    slot = 0
    episode = 0
    while slot < slots:
        state, obs = power_env_reset(cfg, seed=seed + episode)
        for _ in range(min(episode_len, slots - slot)):
            actions = greedy_power_actions(net, obs)
            state, obs, reward, info = power_env_step(state, actions)
            dqn_total += reward
            sol = wmmse_power(state.gains, cfg.weights, cfg.p_max, cfg.noise, base=cfg.base)
            wmmse_total += sol.trace.max()
            for i in range(cfg.n_links):
                sinr_db = 10.0 * np.log10(max(info["sinr"][i], 1e-300))
                rows.append((slot, i, info["powers"][i], sinr_db, info["rates"][i]))
            slot += 1
        episode += 1
    return dqn_total / wmmse_total, dqn_total / slots, wmmse_total / slots, rows
