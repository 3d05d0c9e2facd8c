"""Dynamic spectrum access environments: single-user channel selection over
two-state Markov channels, multi-user collision channels with ACK feedback,
and coexistence with TDMA/ALOHA devices. The genie-aided myopic baseline and
the exact tabular MDP for the 2-channel case live here too.

Agents act on a sliding window of their own last M (action, observation)
pairs; there is no direct channel-state observability anywhere.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from ..channels import GOOD, GilbertElliott, step_gilbert_elliott
from ..nn import forward, make_optimizer, mlp_init
from ..rl import (
    Experience,
    ExplorationSchedule,
    ReplayBuffer,
    TabularMdp,
    boltzmann_mixture_policy,
    dqn_train_step,
    epsilon_greedy,
    replay_push,
    sync_target,
)
from ..seeding import stream


@dataclass
class RotatingChannels:
    """Deterministic stand-in for a strongly correlated channel ensemble:
    exactly one channel is good and it advances round-robin every slot.
    """

    n_channels: int
    good: int = 0

    @property
    def states(self) -> np.ndarray:
        s = np.zeros(self.n_channels, dtype=int)
        s[self.good] = GOOD
        return s


def advance_channels(ch, rng):
    if isinstance(ch, RotatingChannels):
        return replace(ch, good=(ch.good + 1) % ch.n_channels)
    return step_gilbert_elliott(ch, rng)


def dsa_step(channels, action: int, rng):
    """Single-user sensing step: +1 on a good pick, -1 on a bad one; only
    the chosen channel's condition is revealed. Returns
    (reward, observation bit, channels').
    """
    n = channels.n_channels
    if not 0 <= action < n:
        raise ValueError(f"action {action} out of range for {n} channels")
    good = int(channels.states[action]) == GOOD
    reward = 1.0 if good else -1.0
    return reward, int(good), advance_channels(channels, rng)


class HistoryEncoder:
    """Fixed window of the last M (action, observation-bit) pairs, encoded
    one-hot and flattened oldest first: width M * (n_actions + 1). Slots
    never pushed encode as all zeros.
    """

    def __init__(self, m: int, n_actions: int):
        if m < 1 or n_actions < 1:
            raise ValueError("need m >= 1 and n_actions >= 1")
        self.m = m
        self.n_actions = n_actions
        self._window = deque(maxlen=m)

    @property
    def width(self) -> int:
        return self.m * (self.n_actions + 1)

    def push(self, action: int, obs_bit: int) -> None:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range")
        self._window.append((action, int(bool(obs_bit))))

    def reset(self) -> None:
        self._window.clear()

    def vector(self) -> np.ndarray:
        v = np.zeros(self.width)
        pad = self.m - len(self._window)
        for slot, (a, o) in enumerate(self._window):
            base = (pad + slot) * (self.n_actions + 1)
            v[base + a] = 1.0
            v[base + self.n_actions] = float(o)
        return v


# ---------------------------------------------------------------------------
# Genie-aided myopic baseline


def belief_update(belief, action, obs_bit, p_gg, p_bb) -> np.ndarray:
    """Exact one-step Markov filter: pin the sensed channel to its revealed
    condition, then propagate every belief through the chain,
    b' = b p_gg + (1 - b)(1 - p_bb).
    """
    b = np.asarray(belief, dtype=float).copy()
    if np.any((b < 0.0) | (b > 1.0)):
        raise ValueError("beliefs must lie in [0, 1]")
    b[action] = 1.0 if obs_bit else 0.0
    return b * p_gg + (1.0 - b) * (1.0 - p_bb)


def myopic_action(belief) -> int:
    """Transmit on the most likely good channel (lowest index on ties)."""
    return int(np.argmax(np.asarray(belief)))


def dsa_tabular_mdp(p_gg: float, p_bb: float, n_channels: int = 2, gamma: float = 0.9) -> TabularMdp:
    """Fully observed n-channel selection MDP for oracle computations.

    State s encodes the joint condition bitmask (bit c set = channel c
    good); action picks a channel; reward is +1/-1 on the current state;
    channels evolve independently.
    """
    n_states = 2**n_channels
    stay = np.array([p_bb, p_gg])  # indexed by current bit
    p = np.zeros((n_states, n_channels, n_states))
    r = np.zeros((n_states, n_channels, n_states))
    for s in range(n_states):
        bits = [(s >> c) & 1 for c in range(n_channels)]
        prob_next = np.ones(n_states)
        for s_next in range(n_states):
            pr = 1.0
            for c in range(n_channels):
                same = ((s_next >> c) & 1) == bits[c]
                pr *= stay[bits[c]] if same else 1.0 - stay[bits[c]]
            prob_next[s_next] = pr
        for a in range(n_channels):
            p[s, a] = prob_next
            r[s, a] = 1.0 if bits[a] else -1.0
    return TabularMdp(n_states, n_channels, p, r, gamma)


def channel_state_index(channels) -> int:
    bits = (np.asarray(channels.states) == GOOD).astype(int)
    return int(np.sum(bits * (1 << np.arange(bits.size))))


# ---------------------------------------------------------------------------
# Multi-user collision channel


def dsa_multi_step(channels, actions, rng, capacities=None, reward_mode="rate"):
    """Joint step for K users on N channels with an extra idle action (index
    N). A user gets an ACK iff it alone picked that channel and the channel
    is good (always good when channels is None).

    Returns (acks, rewards, channels'). reward_mode "rate" pays the channel
    capacity on ACK; "log_rate" pays log(1 + capacity).
    """
    actions = np.asarray(actions, dtype=int)
    if channels is None:
        if capacities is None:
            raise ValueError("need channels or capacities")
        n = len(capacities)
        good = np.ones(n, dtype=bool)
    else:
        n = channels.n_channels
        good = np.asarray(channels.states) == GOOD
    caps = np.ones(n) if capacities is None else np.asarray(capacities, dtype=float)
    if np.any((actions < 0) | (actions > n)):
        raise ValueError(f"actions must lie in [0, {n}] (idle = {n})")

    counts = np.bincount(actions[actions < n], minlength=n)
    acks = np.zeros(actions.size, dtype=bool)
    rewards = np.zeros(actions.size)
    for k, a in enumerate(actions):
        if a < n and counts[a] == 1 and good[a]:
            acks[k] = True
            rate = caps[a]
            rewards[k] = np.log1p(rate) if reward_mode == "log_rate" else rate
    nxt = None if channels is None else advance_channels(channels, rng)
    return acks, rewards, nxt


# ---------------------------------------------------------------------------
# Coexistence with protocol-following peers

WAIT, TRANSMIT = 0, 1
SUCCESS, COLLISION, IDLENESS = 0, 1, 2


@dataclass
class CoexistConfig:
    """One TDMA peer owning fixed slots of a repeating frame, plus an
    optional ALOHA peer transmitting with fixed probability every slot.
    """

    frame_len: int = 4
    tdma_slots: tuple = (0, 1)
    aloha_prob: float = 0.0

    def __post_init__(self):
        if self.frame_len < 1:
            raise ValueError("frame_len must be positive")
        if any(not 0 <= s < self.frame_len for s in self.tdma_slots):
            raise ValueError("tdma slots must lie inside the frame")
        if not 0.0 <= self.aloha_prob <= 1.0:
            raise ValueError("aloha_prob must lie in [0, 1]")


def coexist_step(cfg: CoexistConfig, slot: int, action: int, rng):
    """Agent transmits or waits in one slot. SUCCESS iff it transmits and no
    peer does; reward 1 on SUCCESS, 0 otherwise. Returns
    (observation, reward, next_slot).
    """
    if action not in (WAIT, TRANSMIT):
        raise ValueError("action must be WAIT or TRANSMIT")
    peer_busy = (slot % cfg.frame_len) in cfg.tdma_slots
    if cfg.aloha_prob > 0.0 and rng.random() < cfg.aloha_prob:
        peer_busy = True
    if action == TRANSMIT:
        obs = COLLISION if peer_busy else SUCCESS
    else:
        obs = IDLENESS
    reward = 1.0 if obs == SUCCESS else 0.0
    return obs, reward, slot + 1


def coexist_oracle_rate(cfg: CoexistConfig) -> float:
    """Throughput of the schedule-aware policy that transmits exactly in the
    TDMA peer's free slots (ALOHA collisions still apply).
    """
    free = 1.0 - len(cfg.tdma_slots) / cfg.frame_len
    return free * (1.0 - cfg.aloha_prob)


# ---------------------------------------------------------------------------
# Trainers and evaluation


@dataclass
class DsaTrainConfig:
    history: int = 8  # M
    episodes: int = 300
    slots_per_episode: int = 100
    hidden: tuple = (64, 32)
    lr: float = 1e-3
    batch: int = 32
    buffer_capacity: int = 20_000
    gamma: float = 0.9
    target_sync: int = 200
    replay_off: bool = False  # single-transition "replay" when set
    double_q: bool = False
    eps: ExplorationSchedule = field(
        default_factory=lambda: ExplorationSchedule(1.0, 0.02, 15_000)
    )


def _make_world(world, n_channels, seed):
    if world == "rotating":
        return RotatingChannels(n_channels, good=seed % n_channels)
    if world == "gilbert_elliott":
        return GilbertElliott(n_channels, 0.9, 0.9)
    raise ValueError(f"unknown world {world!r}")


def train_dsa_dqn(n_channels=4, world="rotating", train=None, master_seed=0, replica=0):
    """Single-user DQN over the M-slot history encoding. Returns
    (net, history template, log_rows).
    """
    train = train or DsaTrainConfig()
    agent_rng = stream(master_seed, replica, "agent")
    env_rng = stream(master_seed, replica, "env")
    hist = HistoryEncoder(train.history, n_channels)
    net = mlp_init((hist.width, *train.hidden, n_channels), "relu",
                   seed=int(agent_rng.integers(2**31)))
    target = sync_target(net)
    opt = make_optimizer("adam", train.lr, net)
    buf = ReplayBuffer(1 if train.replay_off else train.buffer_capacity)

    log_rows = []
    step = 0
    for episode in range(train.episodes):
        ch = _make_world(world, n_channels, episode)
        hist.reset()
        ep_reward = 0.0
        for _ in range(train.slots_per_episode):
            obs = hist.vector()
            eps = train.eps.epsilon(step)
            q = forward(net, obs).output
            action = epsilon_greedy(q, eps, agent_rng)
            reward, bit, ch = dsa_step(ch, action, env_rng)
            hist.push(action, bit)
            replay_push(buf, Experience(obs, action, reward, hist.vector()))
            ep_reward += reward
            loss = np.nan
            if len(buf) >= min(train.batch, buf.capacity):
                net, opt, loss = dqn_train_step(
                    net, target, buf, min(train.batch, buf.capacity),
                    train.gamma, opt, agent_rng, double_q=train.double_q,
                )
                if (step + 1) % train.target_sync == 0:
                    target = sync_target(net)
            step += 1
        if (episode + 1) % 20 == 0:
            log_rows.append((step, episode, eps, loss,
                             float(forward(net, hist.vector()).output.mean()),
                             ep_reward / train.slots_per_episode))
    return net, hist, log_rows


def evaluate_dsa_policy(net, n_channels, world, history, slots, seed):
    """Greedy success rate over one long run."""
    rng = stream(seed, 0, "eval")
    hist = HistoryEncoder(history, n_channels)
    ch = _make_world(world, n_channels, 0)
    hits = 0
    for _ in range(slots):
        action = int(np.argmax(forward(net, hist.vector()).output))
        reward, bit, ch = dsa_step(ch, action, rng)
        hist.push(action, bit)
        hits += reward > 0
    return hits / slots


def rotating_oracle_rate(n_channels, slots, start_good=0) -> float:
    """Success rate of "last success + 1 mod N" from a cold start: it scans
    until the first hit, then never misses.
    """
    ch = RotatingChannels(n_channels, start_good)
    action = 0
    hits = 0
    found = False
    for _ in range(slots):
        good = int(ch.states[action]) == GOOD
        hits += good
        found = found or good
        if found:
            action = (action + 1) % n_channels
        ch = advance_channels(ch, None)
    return hits / slots


def random_dsa_rate(n_channels, world, slots, seed) -> float:
    rng = stream(seed, 1, "eval")
    ch = _make_world(world, n_channels, 0)
    hits = 0
    for _ in range(slots):
        reward, _, ch = dsa_step(ch, int(rng.integers(n_channels)), rng)
        hits += reward > 0
    return hits / slots


def train_coexist_dqn(cfg: CoexistConfig, train=None, master_seed=0, replica=0):
    """DQN over {WAIT, TRANSMIT} with the M-slot history observation."""
    train = train or DsaTrainConfig(episodes=200, slots_per_episode=100)
    agent_rng = stream(master_seed, replica, "agent")
    env_rng = stream(master_seed, replica, "env")
    hist = HistoryEncoder(train.history, 2)
    net = mlp_init((hist.width, *train.hidden, 2), "relu",
                   seed=int(agent_rng.integers(2**31)))
    target = sync_target(net)
    opt = make_optimizer("adam", train.lr, net)
    buf = ReplayBuffer(train.buffer_capacity)

    step = 0
    slot = 0
    for episode in range(train.episodes):
        hist.reset()
        slot = 0
        for _ in range(train.slots_per_episode):
            obs = hist.vector()
            eps = train.eps.epsilon(step)
            action = epsilon_greedy(forward(net, obs).output, eps, agent_rng)
            obs_code, reward, slot = coexist_step(cfg, slot, action, env_rng)
            hist.push(action, int(obs_code == SUCCESS))
            replay_push(buf, Experience(obs, action, reward, hist.vector()))
            if len(buf) >= train.batch:
                net, opt, _ = dqn_train_step(
                    net, target, buf, train.batch, train.gamma, opt, agent_rng,
                    double_q=train.double_q,
                )
                if (step + 1) % train.target_sync == 0:
                    target = sync_target(net)
            step += 1
    return net, hist


def evaluate_coexist_policy(net, cfg: CoexistConfig, history, slots, seed) -> float:
    rng = stream(seed, 2, "eval")
    hist = HistoryEncoder(history, 2)
    slot = 0
    total = 0.0
    for _ in range(slots):
        action = int(np.argmax(forward(net, hist.vector()).output))
        obs_code, reward, slot = coexist_step(cfg, slot, action, rng)
        hist.push(action, int(obs_code == SUCCESS))
        total += reward
    return total / slots


@dataclass
class MultiDsaResult:
    net: object
    success_rate: np.ndarray  # per user
    utilization: float
    log_utility: float


def train_dsa_multi(
    n_users=2, n_channels=2, train=None, master_seed=0, replica=0,
    alpha_mix=0.5, beta_temp=2.0, alpha_end=0.01, beta_end=100.0,
    capacities=None,
):
    """Centralized training of one shared network; each user executes a copy
    with the Boltzmann-mixture policy, which breaks the symmetry between
    identical agents. Action index n_channels means idle.

    The mixing weight anneals alpha_mix -> alpha_end and the temperature
    sharpens beta_temp -> beta_end over the schedule horizon so the replay
    distribution ends up close to the executed policy.
    """
    train = train or DsaTrainConfig(episodes=150, slots_per_episode=60)
    agent_rng = stream(master_seed, replica, "agent")
    env_rng = stream(master_seed, replica, "env")
    n_actions = n_channels + 1
    hists = [HistoryEncoder(train.history, n_actions) for _ in range(n_users)]
    net = mlp_init((hists[0].width, *train.hidden, n_actions), "relu",
                   seed=int(agent_rng.integers(2**31)))
    target = sync_target(net)
    opt = make_optimizer("adam", train.lr, net)
    buf = ReplayBuffer(1 if train.replay_off else train.buffer_capacity)

    step = 0
    for episode in range(train.episodes):
        for h in hists:
            h.reset()
        for _ in range(train.slots_per_episode):
            frac = min(1.0, step / train.eps.anneal_steps)
            a_t = alpha_mix + (alpha_end - alpha_mix) * frac
            b_t = beta_temp + (beta_end - beta_temp) * frac
            obs = [h.vector() for h in hists]
            q_all = forward(net, np.stack(obs)).output
            actions = [
                boltzmann_mixture_policy(q_all[k], a_t, b_t, agent_rng)
                for k in range(n_users)
            ]
            acks, rewards, _ = dsa_multi_step(None, actions, env_rng,
                                              capacities or [1.0] * n_channels)
            for k in range(n_users):
                hists[k].push(actions[k], int(acks[k]))
                replay_push(buf, Experience(obs[k], actions[k], rewards[k],
                                            hists[k].vector()))
            if len(buf) >= min(train.batch, buf.capacity):
                net, opt, _ = dqn_train_step(
                    net, target, buf, min(train.batch, buf.capacity),
                    train.gamma, opt, agent_rng, double_q=train.double_q,
                )
                if (step + 1) % train.target_sync == 0:
                    target = sync_target(net)
            step += 1
    return net


def evaluate_dsa_multi(net, n_users, n_channels, history, slots, seed,
                       alpha_mix=0.05, beta_temp=20.0, capacities=None):
    """Stochastic-policy evaluation (the mixture keeps agents desynced).

    Returns a MultiDsaResult with per-user success rates, channel
    utilization, and the proportional-fairness log utility.
    """
    rng = stream(seed, 3, "eval")
    caps = capacities or [1.0] * n_channels
    hists = [HistoryEncoder(history, n_channels + 1) for _ in range(n_users)]
    ack_counts = np.zeros(n_users)
    used_slots = 0
    for _ in range(slots):
        actions = [
            boltzmann_mixture_policy(forward(net, h.vector()).output,
                                     alpha_mix, beta_temp, rng)
            for h in hists
        ]
        acks, _, _ = dsa_multi_step(None, actions, rng, caps)
        for k in range(n_users):
            hists[k].push(actions[k], int(acks[k]))
        ack_counts += acks
        used_slots += int(np.sum(acks))
    success = ack_counts / slots
    utilization = used_slots / (slots * n_channels)
    log_utility = float(np.sum(np.log(np.maximum(success, 1e-12))))
    return MultiDsaResult(net, success, utilization, log_utility)


def write_dsa_metrics_csv(rows, path) -> None:
    """Metrics rows: (episode, user, success_rate, utilization, log_utility)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "user", "success_rate", "utilization", "log_utility"])
        for episode, user, success_rate, utilization, log_utility in rows:
            w.writerow([int(episode), int(user), f"{float(success_rate):.9g}",
                        f"{float(utilization):.9g}", f"{float(log_utility):.9g}"])
