"""Vehicular spectrum sharing: K V2V links pick a resource block and a
transmit power each millisecond slot, trying to push a fixed payload through
before the deadline while keeping the M cellular uplinks usable. V2I link m
owns RB m; V2V traffic rides on top of the same blocks.

Fading is two-timescale: per-RB Rayleigh power redraws every slot, pathloss
and shadowing refreshed from vehicle motion every large_scale_every slots.
Worlds are pure values; stepping is deterministic given (config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from ..channels import (
    HighwayConfig,
    V2XGains,
    V2XLargeScale,
    VehicularTopology,
    _ring_distance,
    apply_rb_fading,
    init_vehicular_topology,
    step_mobility,
    v2x_large_scale,
)
from ..nn import forward, make_optimizer, mlp_init
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

OFF_DBM = -100.0  # power levels at or below this transmit nothing


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


@dataclass
class V2xConfig:
    m_rb: int = 4  # V2I links, one orthogonal RB each
    k_v2v: int = 4
    payload_bytes: float = 1060.0  # B
    t_slots: int = 100  # T
    bandwidth_hz: float = 1e6  # W, per RB
    slot_s: float = 1e-3
    noise_w: float = dbm_to_watt(-114.0)
    v2i_power_dbm: float = 23.0
    power_levels_dbm: tuple = (23.0, 10.0, 5.0, OFF_DBM)
    lambda_c: float = 0.1
    lambda_v: float = 1.0
    lambda_p: float = 0.5
    reward_mode: str = "weighted"  # or "beta"
    beta: float | None = None  # Mb/s units, used by the beta reward
    beta_floor: float | None = None
    n_neighbors: int = 3
    large_scale_every: int = 100  # slots between mobility/shadowing redraws
    highway: HighwayConfig | None = None

    def __post_init__(self):
        if self.m_rb < 1 or self.k_v2v < 1:
            raise ValueError("need m_rb >= 1 and k_v2v >= 1")
        if self.payload_bytes <= 0 or self.t_slots < 1:
            raise ValueError("payload and deadline must be positive")
        if min(self.lambda_c, self.lambda_v, self.lambda_p) < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.reward_mode not in ("weighted", "beta"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")
        if self.highway is None:
            self.highway = HighwayConfig(k_v2v=self.k_v2v, m_v2i=self.m_rb)
        if (self.highway.k_v2v, self.highway.m_v2i) != (self.k_v2v, self.m_rb):
            raise ValueError("highway link counts disagree with m_rb/k_v2v")
        self.highway.validate()

    @property
    def power_levels_w(self) -> np.ndarray:
        levels = np.array([
            0.0 if dbm <= OFF_DBM else dbm_to_watt(dbm)
            for dbm in self.power_levels_dbm
        ])
        return levels

    @property
    def v2i_power_w(self) -> float:
        return dbm_to_watt(self.v2i_power_dbm)

    @property
    def n_actions(self) -> int:
        return self.m_rb * len(self.power_levels_dbm)

    @property
    def obs_width(self) -> int:
        return 4 * self.m_rb + 2


@dataclass
class V2XWorld:
    cfg: V2xConfig
    topology: VehicularTopology
    large_scale: V2XLargeScale
    gains: V2XGains
    load: np.ndarray  # (K,) remaining bytes
    remaining: int  # slots left
    i_prev: np.ndarray  # (K, M) interference power seen last slot
    n_prev: np.ndarray  # (K, M) neighbor RB selections last slot
    neighbors: np.ndarray  # (K, C) closest V2V transmitter indices
    seed: int
    t: int = 0


def _slot_rng(seed: int, t: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))


def _closest_neighbors(topo: VehicularTopology, n_neighbors: int) -> np.ndarray:
    tx = topo.positions[topo.v2v_tx]
    k = tx.shape[0]
    c = min(n_neighbors, k - 1)
    out = np.zeros((k, max(c, 0)), dtype=int)
    for i in range(k):
        d = _ring_distance(tx[i], tx, topo.cfg.length_m)
        d[i] = np.inf
        out[i] = np.argsort(d)[:c]
    return out


def v2x_reset(cfg: V2xConfig, seed: int = 0) -> V2XWorld:
    """Fresh world: topology drawn, full payloads, whole deadline ahead."""
    topo = init_vehicular_topology(cfg.highway, seed=seed)
    rng = _slot_rng(seed, 0)
    ls = v2x_large_scale(topo, rng)
    gains = apply_rb_fading(ls, rng)
    k, m = cfg.k_v2v, cfg.m_rb
    return V2XWorld(
        cfg, topo, ls, gains,
        load=np.full(k, float(cfg.payload_bytes)),
        remaining=cfg.t_slots,
        i_prev=np.zeros((k, m)),
        n_prev=np.zeros((k, m)),
        neighbors=_closest_neighbors(topo, cfg.n_neighbors),
        seed=seed,
    )


def _decode_actions(cfg: V2xConfig, actions) -> tuple:
    arr = np.asarray(actions, dtype=int)
    if arr.shape != (cfg.k_v2v, 2):
        raise ValueError(f"expected {cfg.k_v2v} (rb, power_level) actions")
    rb, pw = arr[:, 0], arr[:, 1]
    if np.any((rb < 0) | (rb >= cfg.m_rb)):
        raise ValueError("rb index out of range")
    if np.any((pw < 0) | (pw >= len(cfg.power_levels_dbm))):
        raise ValueError("power level index out of range")
    return rb, pw


def v2x_step(world: V2XWorld, actions):
    """Apply one joint action. Returns (world', observations, rewards, info).

    SINRs use the current slot's gains; the fading (and, on era boundaries,
    positions and shadowing) refresh afterwards, so the next observations
    carry next-slot CSI plus this slot's measured interference.
    """
    cfg = world.cfg
    if world.remaining <= 0:
        raise ValueError("episode already finished")
    rb, pw = _decode_actions(cfg, actions)
    powers = cfg.power_levels_w[pw]
    g = world.gains
    k_n, m_n = cfg.k_v2v, cfg.m_rb
    noise = cfg.noise_w
    p_c = cfg.v2i_power_w

    on_rb = np.zeros((k_n, m_n))
    on_rb[np.arange(k_n), rb] = powers  # watts of V2V power per (link, RB)

    # V2I uplink m: interfered by every V2V transmitter riding RB m
    v2i_interf = np.einsum("km,km->m", on_rb, g.v2v_to_bs)
    sinr_v2i = p_c * g.v2i_signal / (noise + v2i_interf)
    c_v2i = cfg.bandwidth_hz * np.log2(1.0 + sinr_v2i)

    # V2V link k on its chosen RB: V2I of that RB plus co-channel V2V peers
    sig = powers * g.v2v_signal[np.arange(k_n), rb]
    cross = np.einsum("jm,jkm->km", on_rb, g.v2v_cross)  # all-tx incl. self
    interf = np.empty(k_n)
    for k in range(k_n):
        own = cross[k, rb[k]] - powers[k] * g.v2v_cross[k, k, rb[k]]
        interf[k] = p_c * g.v2i_to_v2v[k, rb[k]] + own
    sinr_v2v = sig / (noise + interf)
    c_v2v = cfg.bandwidth_hz * np.log2(1.0 + sinr_v2v)

    delivered_before = world.load <= 0.0
    load = np.maximum(0.0, world.load - c_v2v * cfg.slot_s / 8.0)
    remaining = world.remaining - 1

    # what each receiver heard per RB this slot, for the next observation
    i_meas = p_c * g.v2i_to_v2v + np.einsum("jm,jkm->km", on_rb, g.v2v_cross)
    i_meas[np.arange(k_n), rb] -= powers * g.v2v_cross[np.arange(k_n), np.arange(k_n), rb]
    n_meas = np.zeros((k_n, m_n))
    for k in range(k_n):
        for j in world.neighbors[k]:
            if powers[j] > 0.0:
                n_meas[k, rb[j]] += 1.0

    t_next = world.t + 1
    rng = _slot_rng(world.seed, t_next)
    topo, ls, neighbors = world.topology, world.large_scale, world.neighbors
    if t_next % cfg.large_scale_every == 0:
        topo = step_mobility(topo, cfg.large_scale_every * cfg.slot_s)
        ls = v2x_large_scale(topo, rng)
        neighbors = _closest_neighbors(topo, cfg.n_neighbors)
    gains = apply_rb_fading(ls, rng)

    info = {
        "c_v2i": c_v2i,
        "c_v2v": c_v2v,
        "sinr_v2i": sinr_v2i,
        "sinr_v2v": sinr_v2v,
        "deliveries": load <= 0.0,
        "delivered_before": delivered_before,
        "powers_w": powers,
        "rb": rb,
    }
    reward = v2x_reward(info, cfg.reward_mode, cfg.lambda_c, cfg.lambda_v,
                        cfg.lambda_p, cfg.beta, cfg.t_slots, world.remaining,
                        beta_floor=cfg.beta_floor)
    world = replace(world, topology=topo, large_scale=ls, gains=gains,
                    load=load, remaining=remaining, i_prev=i_meas,
                    n_prev=n_meas, neighbors=neighbors, t=t_next)
    observations = [v2x_observe(world, k) for k in range(k_n)]
    return world, observations, np.full(k_n, reward), info


def v2x_reward(info, mode, lambda_c, lambda_v, lambda_p, beta, t_slots, u_t,
               beta_floor=None) -> float:
    """Scalar system reward shared by all agents. Rates enter in Mb/s.

    weighted: lambda_c * sum V2I + lambda_v * sum V2V - lambda_p * (T - U_t).
    beta: the V2V term pays each link its rate until its own payload lands,
    then a fixed beta / K bonus.
    """
    c_v2i = np.asarray(info["c_v2i"]) / 1e6
    c_v2v = np.asarray(info["c_v2v"]) / 1e6
    if mode == "weighted":
        v2v_term = float(np.sum(c_v2v))
    elif mode == "beta":
        if beta is None:
            raise ValueError("beta mode needs a beta value")
        if beta_floor is not None and beta <= beta_floor:
            raise ValueError(
                f"beta {beta} must exceed the measured sum-rate floor {beta_floor}"
            )
        done = np.asarray(info["delivered_before"])
        per_link = np.where(done, beta / done.size, c_v2v)
        v2v_term = float(np.sum(per_link))
    else:
        raise ValueError(f"unknown reward mode {mode!r}")
    return (lambda_c * float(np.sum(c_v2i)) + lambda_v * v2v_term
            - lambda_p * float(t_slots - u_t))


def estimate_beta(cfg: V2xConfig, seed=0, n_worlds=100) -> tuple:
    """Empirical bound for the beta reward: measure the sum V2V rate of the
    disjoint-RB max-power pattern on fresh worlds. Returns (beta, floor) in
    Mb/s with beta = 2 * floor.
    """
    best = 0.0
    actions = np.stack([np.arange(cfg.k_v2v) % cfg.m_rb,
                        np.zeros(cfg.k_v2v, dtype=int)], axis=1)
    for i in range(n_worlds):
        world = v2x_reset(cfg, seed=seed + i)
        _, _, _, info = v2x_step(world, actions)
        best = max(best, float(np.sum(info["c_v2v"])) / 1e6)
    return 2.0 * best, best


def v2x_desk_config(**overrides) -> V2xConfig:
    """Small-but-nontrivial benchmark setting: 8 vehicles on two lanes make
    the V2V hops long enough that RB placement decides whether 1060 bytes
    land inside the 6-slot deadline (random placement manages about half
    the deliveries, interference-aware placement nearly all).
    """
    params = dict(
        m_rb=4, k_v2v=4, payload_bytes=1060.0, t_slots=6,
        highway=HighwayConfig(k_v2v=4, m_v2i=4, n_lanes=2, vehicles_per_lane=4),
    )
    params.update(overrides)
    return V2xConfig(**params)


# ---------------------------------------------------------------------------
# Observations

_GAIN_FLOOR_DB, _GAIN_SPAN_DB = -160.0, 100.0
_INTERF_FLOOR_DB, _INTERF_SPAN_DB = -180.0, 100.0


def _db_feat(x, floor_db, span_db):
    db = 10.0 * np.log10(np.maximum(np.asarray(x, dtype=float), 1e-30))
    return (db - floor_db) / span_db


def v2x_observe(world: V2XWorld, k: int, mode: str = "plain",
                eps: float | None = None, iteration: int | None = None,
                total_iterations: int | None = None) -> np.ndarray:
    """Local view of agent k: own signal CSI per RB, own channel toward the
    base station, last slot's interference per RB, neighbors' last RB picks,
    and the (load, time) budget. Gains are compressed to decibel features.
    """
    cfg = world.cfg
    if not 0 <= k < cfg.k_v2v:
        raise ValueError(f"agent index {k} out of range")
    # the load entry jumps at delivery (0 when done, else in [0.5, 1]) so
    # the two transmit regimes stay separable to a small network
    load = world.load[k] / cfg.payload_bytes
    load_feat = 0.0 if load <= 0.0 else 0.5 + 0.5 * load
    base = np.concatenate([
        _db_feat(world.gains.v2v_signal[k], _GAIN_FLOOR_DB, _GAIN_SPAN_DB),
        _db_feat(world.gains.v2v_to_bs[k], _GAIN_FLOOR_DB, _GAIN_SPAN_DB),
        _db_feat(world.i_prev[k], _INTERF_FLOOR_DB, _INTERF_SPAN_DB),
        world.n_prev[k] / max(1, cfg.n_neighbors),
        [load_feat, world.remaining / cfg.t_slots],
    ])
    if mode == "plain":
        return base
    if mode == "fingerprint":
        if eps is None or iteration is None or not total_iterations:
            raise ValueError("fingerprint mode needs eps, iteration, total")
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        e_norm = iteration / total_iterations
        if not 0.0 <= e_norm <= 1.0:
            raise ValueError("iteration must lie in [0, total_iterations]")
        return np.concatenate([base, [eps, e_norm]])
    raise ValueError(f"unknown observation mode {mode!r}")


def encode_action(cfg: V2xConfig, rb: int, power_level: int) -> int:
    return rb * len(cfg.power_levels_dbm) + power_level

def decode_action(cfg: V2xConfig, index: int) -> tuple:
    n_levels = len(cfg.power_levels_dbm)
    return index // n_levels, index % n_levels


# ---------------------------------------------------------------------------
# Training


@dataclass
class V2xTrainConfig:
    episodes: int = 400
    hidden: tuple = (128, 64)
    optimizer: str = "adam"
    lr: float = 1e-3
    batch: int = 32
    buffer_capacity: int = 50_000
    gamma: float = 0.95
    target_sync: int = 500
    double_q: bool = False
    eps: ExplorationSchedule = field(
        default_factory=lambda: ExplorationSchedule(1.0, 0.02, 25_000)
    )


def _fingerprinted(world, k, use_fp, eps, it, total):
    if use_fp:
        return v2x_observe(world, k, "fingerprint", eps=eps, iteration=it,
                           total_iterations=total)
    return v2x_observe(world, k)


def v2x_train(cfg: V2xConfig, mode: str, train: V2xTrainConfig | None = None,
              master_seed: int = 0, replica: int = 0):
    """Train K per-agent DQNs. Returns (nets, log_rows).

    single_agent_turn_taking: one agent per slot refreshes its action, the
    rest replay their previous ones; only the acting agent learns that slot.
    marl_fingerprint: everyone acts and learns every slot, with the current
    exploration rate and normalized iteration appended to observations.
    With K = 1 the two modes follow identical code paths (the fingerprint is
    dropped, there being no other learners to stamp) and produce the same
    checkpoint for the same seed.
    """
    if mode not in ("single_agent_turn_taking", "marl_fingerprint"):
        raise ValueError(f"unknown training mode {mode!r}")
    train = train or V2xTrainConfig()
    k_n = cfg.k_v2v
    marl = mode == "marl_fingerprint"
    use_fp = marl and k_n > 1
    obs_width = cfg.obs_width + (2 if use_fp else 0)
    total_steps = train.episodes * cfg.t_slots

    agent_rng = stream(master_seed, replica, "agent")
    nets = [
        mlp_init((obs_width, *train.hidden, cfg.n_actions), "relu",
                 seed=int(agent_rng.integers(2**31)))
        for _ in range(k_n)
    ]
    targets = [sync_target(n) for n in nets]
    opts = [make_optimizer(train.optimizer, train.lr, n) for n in nets]
    bufs = [ReplayBuffer(train.buffer_capacity) for _ in range(k_n)]

    log_rows = []
    step = 0
    loss = np.nan
    for episode in range(train.episodes):
        world = v2x_reset(cfg, seed=master_seed * 100_003 + episode)
        actions = np.stack([np.zeros(k_n, dtype=int),
                            np.full(k_n, len(cfg.power_levels_dbm) - 1)], axis=1)
        ep_reward = 0.0
        while world.remaining > 0:
            eps = train.eps.epsilon(step)
            obs = [_fingerprinted(world, k, use_fp, eps, step, total_steps)
                   for k in range(k_n)]
            actors = range(k_n) if marl or k_n == 1 else [world.t % k_n]
            actions = actions.copy()
            for k in actors:
                q = forward(nets[k], obs[k]).output
                actions[k] = decode_action(cfg, epsilon_greedy(q, eps, agent_rng))
            world, _, rewards, _ = v2x_step(world, actions)
            ep_reward += rewards[0]
            for k in actors:
                nxt = _fingerprinted(world, k, use_fp, eps, step, total_steps)
                replay_push(bufs[k], Experience(
                    obs[k], encode_action(cfg, *actions[k]), rewards[k], nxt,
                    terminal=world.remaining == 0,
                ))
                if len(bufs[k]) >= train.batch:
                    try:
                        nets[k], opts[k], loss = dqn_train_step(
                            nets[k], targets[k], bufs[k], train.batch,
                            train.gamma, opts[k], agent_rng,
                            double_q=train.double_q,
                        )
                    except FloatingPointError as err:
                        raise RuntimeError(
                            f"training diverged at step {step}, agent {k}: {err}"
                        ) from err
                    if not np.isfinite(loss):
                        raise RuntimeError(
                            f"training diverged: non-finite loss at step {step}"
                        )
                    if (step + 1) % train.target_sync == 0:
                        targets[k] = sync_target(nets[k])
            step += 1
        if (episode + 1) % 25 == 0:
            mean_q = float(np.mean([forward(nets[k], obs[k]).output.mean()
                                    for k in range(k_n)]))
            log_rows.append((step, episode, eps, loss, mean_q,
                             ep_reward / cfg.t_slots))
    return nets, log_rows


# ---------------------------------------------------------------------------
# Evaluation


def greedy_v2x_policy(nets, use_fp: bool):
    def policy(world, obs_list, rng):
        cfg = world.cfg
        actions = np.zeros((cfg.k_v2v, 2), dtype=int)
        for k in range(cfg.k_v2v):
            obs = obs_list[k]
            if use_fp:
                obs = np.concatenate([obs, [0.0, 1.0]])  # frozen fingerprint
            q = forward(nets[k], obs).output
            actions[k] = decode_action(cfg, int(np.argmax(q)))
        return actions
    return policy


def random_v2x_policy(world, obs_list, rng):
    cfg = world.cfg
    return np.stack([
        rng.integers(0, cfg.m_rb, size=cfg.k_v2v),
        rng.integers(0, len(cfg.power_levels_dbm), size=cfg.k_v2v),
    ], axis=1)


def evaluate_v2x(cfg: V2xConfig, policy, episodes: int, seed: int = 0):
    """Roll out a policy. Returns a dict with the delivery rate (fraction of
    link-episodes whose payload lands before the deadline), mean per-slot
    V2I and V2V sum rates in Mb/s, and the mean shared reward.
    """
    rng = stream(seed, 0, "eval")
    delivered = 0
    v2i_sum = v2v_sum = reward_sum = 0.0
    slots = 0
    for episode in range(episodes):
        world = v2x_reset(cfg, seed=seed * 1_000_003 + episode)
        obs = [v2x_observe(world, k) for k in range(cfg.k_v2v)]
        while world.remaining > 0:
            actions = policy(world, obs, rng)
            world, obs, rewards, info = v2x_step(world, actions)
            v2i_sum += float(np.sum(info["c_v2i"])) / 1e6
            v2v_sum += float(np.sum(info["c_v2v"])) / 1e6
            reward_sum += float(rewards[0])
            slots += 1
        delivered += int(np.sum(world.load <= 0.0))
    return {
        "delivery_rate": delivered / (episodes * cfg.k_v2v),
        "v2i_rate_mbps": v2i_sum / slots,
        "v2v_rate_mbps": v2v_sum / slots,
        "mean_reward": reward_sum / slots,
    }


def rollout_v2x_trace(cfg: V2xConfig, policy, seed: int = 0):
    """One episode -> rows for the trace CSV."""
    rng = stream(seed, 1, "eval")
    world = v2x_reset(cfg, seed=seed)
    obs = [v2x_observe(world, k) for k in range(cfg.k_v2v)]
    rows = []
    slot = 0
    while world.remaining > 0:
        actions = policy(world, obs, rng)
        world, obs, _, info = v2x_step(world, actions)
        for k in range(cfg.k_v2v):
            rows.append((
                slot, k, int(actions[k, 0]),
                float(cfg.power_levels_dbm[actions[k, 1]]),
                float(info["c_v2v"][k]),
                float(info["c_v2i"][actions[k, 0]]),
                float(world.load[k]),
            ))
        slot += 1
    return rows


def write_v2x_trace_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slot", "link_id", "rb", "power_dbm", "v2v_rate",
                    "v2i_rate", "remaining_bytes"])
        for slot, link, rb, dbm, cv, cc, rem in rows:
            w.writerow([int(slot), int(link), int(rb), f"{dbm:g}",
                        f"{cv:.9g}", f"{cc:.9g}", f"{rem:.9g}"])


def delivery_time_rows(cfg: V2xConfig, policy, episodes: int, seed: int = 0):
    """Per link-episode delivery slots (1-based ms); -1 marks a missed
    deadline. Episode seeding matches evaluate_v2x so the implied delivery
    rate agrees with it.
    """
    rng = stream(seed, 0, "eval")
    rows = []
    for episode in range(episodes):
        world = v2x_reset(cfg, seed=seed * 1_000_003 + episode)
        obs = [v2x_observe(world, k) for k in range(cfg.k_v2v)]
        done_at = np.full(cfg.k_v2v, -1, dtype=int)
        slot = 0
        while world.remaining > 0:
            actions = policy(world, obs, rng)
            world, obs, _, _ = v2x_step(world, actions)
            slot += 1
            done_at[(done_at < 0) & (world.load <= 0.0)] = slot
        rows.extend((episode, k, int(done_at[k])) for k in range(cfg.k_v2v))
    return rows


def write_delivery_times_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "link_id", "delivery_ms"])
        for episode, link, ms in rows:
            w.writerow([int(episode), int(link), int(ms)])
