"""Stochastic channel and topology generators shared by every environment.

Three families live here: a geometric interference channel with temporally
correlated Rayleigh fading, two-state Markov (Gilbert-Elliott) channels, and
a multi-lane highway world with V2V pairs and V2I uplinks.

Gain convention throughout the package: gains[j, i] is the power gain from
the transmitter of link j to the receiver of link i.

Every generator is a pure function of (config, seed, step count), so
independent episodes can be produced in parallel from disjoint seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class GainMatrix:
    """n x n nonnegative link gains, entry (j, i) = tx j -> rx i."""

    n: int
    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)
        if self.gains.shape != (self.n, self.n):
            raise ValueError(f"gain matrix shape {self.gains.shape} != ({self.n}, {self.n})")
        if not np.all(np.isfinite(self.gains)) or np.any(self.gains < 0.0):
            raise ValueError("gains must be finite and nonnegative")
        if np.any(np.diag(self.gains) <= 0.0):
            raise ValueError("direct-link gains must be positive")


# ---------------------------------------------------------------------------
# Interference channel with AR(1) small-scale fading


@dataclass
class InterferenceGeometry:
    """Square drop region; each receiver sits in an annulus around its
    transmitter. Pathloss 1/(1+d^eta), log-normal shadowing.
    """

    area_m: float = 500.0
    min_pair_m: float = 2.0
    max_pair_m: float = 65.0
    exponent: float = 3.76
    shadow_db: float = 8.0
    rho: float = 0.9  # slot-to-slot fading correlation

    def validate(self):
        if self.min_pair_m > self.area_m:
            raise ValueError("minimum pair distance exceeds the drop region")
        if self.min_pair_m <= 0 or self.max_pair_m < self.min_pair_m:
            raise ValueError("need 0 < min_pair_m <= max_pair_m")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")


@dataclass
class FadingState:
    """large_scale is fixed pathloss x shadowing; amp holds the complex
    small-scale amplitudes whose squared magnitude multiplies it.

    Evolution is keyed by (seed, step) so equal histories are bit-equal.
    """

    large_scale: np.ndarray
    amp: np.ndarray
    rho: float
    seed: int
    step: int = 0

    @property
    def n(self) -> int:
        return self.large_scale.shape[0]

    @property
    def small_scale(self) -> np.ndarray:
        return np.abs(self.amp) ** 2

    @property
    def gains(self) -> np.ndarray:
        return self.large_scale * self.small_scale

    def gain_matrix(self) -> GainMatrix:
        return GainMatrix(self.n, self.gains)


def _complex_normal(rng, shape):
    # unit-mean power: |h|^2 ~ Exp(1)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_interference_channel(
    n: int, geometry: InterferenceGeometry | None = None, seed=0
) -> FadingState:
    """Drop n tx/rx pairs and return the initial fading state.

    Transmitters are uniform in the square; each receiver is uniform in the
    annulus [min_pair_m, max_pair_m] around its own transmitter.
    """
    if n < 1:
        raise ValueError("need at least one link")
    geo = geometry or InterferenceGeometry()
    geo.validate()
    master = np.random.SeedSequence(seed)
    rng = np.random.default_rng(master)

    tx = rng.uniform(0.0, geo.area_m, size=(n, 2))
    r = rng.uniform(geo.min_pair_m, geo.max_pair_m, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    rx = tx + np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)

    d = np.linalg.norm(tx[:, None, :] - rx[None, :, :], axis=2)  # d[j, i]
    pathloss = 1.0 / (1.0 + d**geo.exponent)
    shadow = 10.0 ** (geo.shadow_db * rng.standard_normal((n, n)) / 10.0)
    amp = _complex_normal(rng, (n, n))
    return FadingState(pathloss * shadow, amp, geo.rho, int(seed))


def evolve_fading(state: FadingState) -> FadingState:
    """One slot of first-order autoregressive small-scale evolution:
    h' = rho h + sqrt(1 - rho^2) e, e standard complex normal.

    Unit mean power is preserved; large-scale terms never move.
    """
    step = state.step + 1
    rng = np.random.default_rng(np.random.SeedSequence(state.seed, spawn_key=(step,)))
    e = _complex_normal(rng, state.amp.shape)
    amp = state.rho * state.amp + np.sqrt(1.0 - state.rho**2) * e
    return replace(state, amp=amp, step=step)


# ---------------------------------------------------------------------------
# Gilbert-Elliott two-state Markov channels

GOOD, BAD = 1, 0


@dataclass
class GilbertElliott:
    """Independent two-state Markov channels parameterized by the
    stay-probabilities p_gg (good stays good) and p_bb (bad stays bad).
    """

    n_channels: int
    p_gg: float
    p_bb: float
    states: np.ndarray = field(default=None)

    def __post_init__(self):
        if not (0.0 <= self.p_gg <= 1.0 and 0.0 <= self.p_bb <= 1.0):
            raise ValueError("stay probabilities must lie in [0, 1]")
        if self.states is None:
            self.states = np.full(self.n_channels, GOOD, dtype=int)
        self.states = np.asarray(self.states, dtype=int)
        if self.states.shape != (self.n_channels,):
            raise ValueError("state vector length mismatch")

    def stationary_good(self) -> float:
        """Long-run fraction of time a channel is good."""
        leave_g, leave_b = 1.0 - self.p_gg, 1.0 - self.p_bb
        if leave_g + leave_b == 0.0:
            return float(np.mean(self.states == GOOD))  # frozen chain
        return leave_b / (leave_g + leave_b)


def step_gilbert_elliott(ch: GilbertElliott, rng) -> GilbertElliott:
    """Advance every channel one slot; returns a new GilbertElliott."""
    u = rng.random(ch.n_channels)
    good = ch.states == GOOD
    stay = np.where(good, u < ch.p_gg, u < ch.p_bb)
    new = np.where(stay, ch.states, 1 - ch.states)
    return GilbertElliott(ch.n_channels, ch.p_gg, ch.p_bb, new)


# ---------------------------------------------------------------------------
# Vehicular highway world


@dataclass
class HighwayConfig:
    """Multi-lane ring-road geometry plus the propagation constants used
    for V2V and vehicle-to-base-station links.
    """

    length_m: float = 1000.0
    n_lanes: int = 4
    lane_width_m: float = 4.0
    vehicles_per_lane: int = 6
    speed_min_mps: float = 10.0
    speed_max_mps: float = 15.0
    k_v2v: int = 4
    m_v2i: int = 4
    bs_offset_m: float = 200.0  # base station this far off the roadside, mid-segment
    v2v_exponent: float = 3.0
    v2v_shadow_db: float = 3.0
    v2v_floor_m: float = 1.0
    bs_exponent: float = 3.76
    bs_shadow_db: float = 8.0

    def validate(self):
        if self.k_v2v < 1 or self.m_v2i < 1:
            raise ValueError("need at least one V2V pair and one V2I link")
        n = self.n_lanes * self.vehicles_per_lane
        if n < 2 * self.k_v2v:
            raise ValueError(
                f"{n} vehicles cannot form {self.k_v2v} disjoint V2V pairs"
            )
        if n < self.m_v2i:
            raise ValueError(f"{n} vehicles cannot carry {self.m_v2i} V2I links")


@dataclass
class VehicularTopology:
    """Vehicles on a wrap-around highway segment. Positions are derived from
    the initial drop plus elapsed time, so composing mobility steps is exact:
    two steps of dt land on the same floats as one step of 2 dt.
    """

    cfg: HighwayConfig
    x0: np.ndarray  # initial along-road positions
    y: np.ndarray  # fixed lane-center offsets
    lane: np.ndarray
    speed: np.ndarray
    v2v_tx: np.ndarray  # vehicle indices, K pairs, all 2K distinct
    v2v_rx: np.ndarray
    v2i_vehicles: np.ndarray  # M vehicle indices holding uplinks
    bs_xy: np.ndarray
    elapsed_s: float = 0.0

    @property
    def n_vehicles(self) -> int:
        return self.x0.size

    @property
    def x(self) -> np.ndarray:
        return (self.x0 + self.speed * self.elapsed_s) % self.cfg.length_m

    @property
    def positions(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)


def init_vehicular_topology(cfg: HighwayConfig | None = None, seed=0) -> VehicularTopology:
    """Drop vehicles lane by lane and wire up V2V pairs and V2I uplinks.

    V2V receivers are nearest unused neighbors of their transmitters; the
    2 k_v2v endpoint vehicles are pairwise distinct. V2I links go to the
    first m_v2i vehicles of a random permutation (they may also appear in
    V2V pairs).
    """
    cfg = cfg or HighwayConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = cfg.n_lanes * cfg.vehicles_per_lane

    x0 = rng.uniform(0.0, cfg.length_m, size=n)
    lane = np.repeat(np.arange(cfg.n_lanes), cfg.vehicles_per_lane)
    y = (lane + 0.5) * cfg.lane_width_m
    speed = rng.uniform(cfg.speed_min_mps, cfg.speed_max_mps, size=n)

    perm = rng.permutation(n)
    v2i = perm[: cfg.m_v2i].copy()

    # greedy nearest-neighbor pairing over the ring metric
    pos = np.stack([x0, y], axis=1)
    used = np.zeros(n, dtype=bool)
    tx_list, rx_list = [], []
    for cand in perm:
        if len(tx_list) == cfg.k_v2v:
            break
        if used[cand]:
            continue
        d = _ring_distance(pos[cand], pos, cfg.length_m)
        d[cand] = np.inf
        d[used] = np.inf
        partner = int(np.argmin(d))
        used[cand] = used[partner] = True
        tx_list.append(int(cand))
        rx_list.append(partner)

    bs = np.array([cfg.length_m / 2.0, -cfg.bs_offset_m])
    return VehicularTopology(
        cfg, x0, y, lane, speed,
        np.array(tx_list), np.array(rx_list), v2i, bs,
    )


def _ring_distance(p, qs, length):
    """Euclidean distance with the along-road axis wrapped."""
    dx = np.abs(qs[..., 0] - p[..., 0])
    dx = np.minimum(dx, length - dx)
    dy = qs[..., 1] - p[..., 1]
    return np.sqrt(dx**2 + dy**2)


def step_mobility(topo: VehicularTopology, dt: float) -> VehicularTopology:
    """Advance every vehicle dt seconds at constant speed with wrap-around."""
    if dt < 0.0:
        raise ValueError("dt must be nonnegative")
    return replace(topo, elapsed_s=topo.elapsed_s + dt)


def pathloss_floor(d, exponent, floor_m=1.0):
    """Power-law pathloss 1/max(d, floor)^eta; the floor caps the gain of
    co-located pairs at 1.
    """
    return 1.0 / np.maximum(d, floor_m) ** exponent


def cellular_pathloss(d, exponent):
    """1/(1 + d^eta), finite at zero distance."""
    return 1.0 / (1.0 + d**exponent)


@dataclass
class V2XLargeScale:
    """Pathloss x shadowing per tx/rx pair; fixed between mobility steps.

    v2v_cross[j, k] is V2V tx j -> V2V rx k (diagonal is the signal path);
    v2i_to_v2v[m, k] is V2I tx m -> V2V rx k.
    """

    v2v_cross: np.ndarray  # (K, K)
    v2v_to_bs: np.ndarray  # (K,)
    v2i_to_v2v: np.ndarray  # (M, K)
    v2i_to_bs: np.ndarray  # (M,)


@dataclass
class V2XGains:
    """Per-RB gains, one independent Rayleigh power draw per entry and RB.

    V2I link m is preassigned the orthogonal RB m, so its signal table is a
    vector over links. All other tables are indexed by (link, RB).
    """

    v2v_signal: np.ndarray  # (K, M): tx k -> rx k on RB m
    v2v_cross: np.ndarray  # (K, K, M): tx j -> rx k on RB m
    v2v_to_bs: np.ndarray  # (K, M)
    v2i_to_v2v: np.ndarray  # (K, M): V2I tx m -> V2V rx k, on RB m
    v2i_signal: np.ndarray  # (M,): V2I tx m -> BS on its own RB


def v2x_large_scale(topo: VehicularTopology, rng) -> V2XLargeScale:
    """Draw the slow components: pathloss of current distances times
    log-normal shadowing (3 dB V2V-style, 8 dB toward the base station).
    """
    cfg = topo.cfg
    pos = topo.positions
    tx_pos = pos[topo.v2v_tx]
    rx_pos = pos[topo.v2v_rx]
    v2i_pos = pos[topo.v2i_vehicles]
    k, m = topo.v2v_tx.size, topo.v2i_vehicles.size

    def shadow(db, shape):
        return 10.0 ** (db * rng.standard_normal(shape) / 10.0)

    d_cross = _ring_distance(tx_pos[:, None, :], rx_pos[None, :, :], cfg.length_m)
    v2v_cross = pathloss_floor(d_cross, cfg.v2v_exponent, cfg.v2v_floor_m)
    v2v_cross = v2v_cross * shadow(cfg.v2v_shadow_db, (k, k))

    d_tx_bs = np.linalg.norm(tx_pos - topo.bs_xy, axis=1)
    v2v_to_bs = cellular_pathloss(d_tx_bs, cfg.bs_exponent) * shadow(cfg.bs_shadow_db, k)

    d_v2i_rx = _ring_distance(v2i_pos[:, None, :], rx_pos[None, :, :], cfg.length_m)
    v2i_to_v2v = pathloss_floor(d_v2i_rx, cfg.v2v_exponent, cfg.v2v_floor_m)
    v2i_to_v2v = v2i_to_v2v * shadow(cfg.v2v_shadow_db, (m, k))

    d_v2i_bs = np.linalg.norm(v2i_pos - topo.bs_xy, axis=1)
    v2i_to_bs = cellular_pathloss(d_v2i_bs, cfg.bs_exponent) * shadow(cfg.bs_shadow_db, m)

    return V2XLargeScale(v2v_cross, v2v_to_bs, v2i_to_v2v, v2i_to_bs)


def apply_rb_fading(ls: V2XLargeScale, rng) -> V2XGains:
    """Multiply each large-scale entry by unit-mean exponential draws,
    independent across entries and across the M resource blocks.
    """
    m = ls.v2i_to_bs.size
    k = ls.v2v_to_bs.size
    v2v_cross = ls.v2v_cross[:, :, None] * rng.exponential(size=(k, k, m))
    v2v_to_bs = ls.v2v_to_bs[:, None] * rng.exponential(size=(k, m))
    v2i_to_v2v = ls.v2i_to_v2v.T * rng.exponential(size=(k, m))
    v2i_signal = ls.v2i_to_bs * rng.exponential(size=m)
    v2v_signal = v2v_cross[np.arange(k), np.arange(k), :]
    return V2XGains(v2v_signal, v2v_cross, v2v_to_bs, v2i_to_v2v, v2i_signal)


def compute_v2x_gains(topo: VehicularTopology, fading_seed=0) -> V2XGains:
    """Full gain draw for the topology's current positions."""
    rng = np.random.default_rng(np.random.SeedSequence(fading_seed))
    return apply_rb_fading(v2x_large_scale(topo, rng), rng)


def write_topology_csv(topo: VehicularTopology, path) -> None:
    """Snapshot of the current vehicle state."""
    x = topo.x
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["vehicle_id", "x_m", "y_m", "lane", "speed_mps"])
        for i in range(topo.n_vehicles):
            w.writerow([i, f"{x[i]:.6f}", f"{topo.y[i]:.6f}",
                        int(topo.lane[i]), f"{topo.speed[i]:.6f}"])
