"""Environment-agnostic RL machinery: tabular Q-learning, DQN with replay
and a target network, REINFORCE, one-step actor-critic, and the exploration
policies they share.

Network parameters follow nn value semantics (updates return new objects).
A replay buffer is owned by exactly one trainer and mutates in place.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    Grads,
    LossSpec,
    Mlp,
    OptimizerState,
    apply_update,
    backward,
    evaluate_loss,
    forward,
)


@dataclass
class Experience:
    """One transition. next_state is ignored when terminal is set."""

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False


class ReplayBuffer:
    """FIFO ring of experiences with uniform with-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._ring = [None] * capacity
        self.count = 0  # total pushes ever

    def __len__(self) -> int:
        return min(self.count, self.capacity)

    def items(self) -> list:
        """Current contents oldest first."""
        n = len(self)
        start = self.count % self.capacity if self.count > self.capacity else 0
        return [self._ring[(start + i) % self.capacity] for i in range(n)]


def replay_push(buf: ReplayBuffer, e: Experience) -> ReplayBuffer:
    """Append, evicting the oldest item when full. Returns buf for chaining."""
    buf._ring[buf.count % buf.capacity] = e
    buf.count += 1
    return buf


def replay_sample(buf: ReplayBuffer, batch: int, rng) -> list:
    """Uniform sample with replacement; underflow raises."""
    n = len(buf)
    if batch > n:
        raise ValueError(f"cannot sample {batch} from a buffer holding {n}")
    idx = rng.integers(0, n, size=batch)
    if buf.count <= buf.capacity:
        return [buf._ring[i] for i in idx]
    start = buf.count % buf.capacity
    return [buf._ring[(start + i) % buf.capacity] for i in idx]


@dataclass
class ExplorationSchedule:
    """Linear epsilon anneal from eps_start to eps_end over anneal_steps,
    constant afterwards.
    """

    eps_start: float = 1.0
    eps_end: float = 0.02
    anneal_steps: int = 10_000

    def __post_init__(self):
        if not (0.0 <= self.eps_start <= 1.0 and 0.0 <= self.eps_end <= 1.0):
            raise ValueError("epsilons must lie in [0, 1]")
        if self.anneal_steps < 1:
            raise ValueError("anneal_steps must be positive")

    def epsilon(self, step: int) -> float:
        frac = min(1.0, max(0, step) / self.anneal_steps)
        return self.eps_start + (self.eps_end - self.eps_start) * frac


@dataclass
class TabularMdp:
    """Finite MDP with explicit dynamics p[s, a, s'] and rewards r[s, a, s']."""

    n_states: int
    n_actions: int
    p: np.ndarray
    r: np.ndarray
    gamma: float = 0.9

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        shape = (self.n_states, self.n_actions, self.n_states)
        if self.p.shape != shape or self.r.shape != shape:
            raise ValueError(f"kernel tables must have shape {shape}")
        if np.any(np.abs(self.p.sum(axis=2) - 1.0) > 1e-12) or np.any(self.p < 0.0):
            raise ValueError("each (s, a) transition row must sum to 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        self._cum = np.cumsum(self.p, axis=2)

    def step(self, s: int, a: int, rng) -> tuple:
        s_next = int(np.searchsorted(self._cum[s, a], rng.random(), side="right"))
        s_next = min(s_next, self.n_states - 1)  # guard the u == 1.0 edge
        return s_next, float(self.r[s, a, s_next])


def q_update(qtable, s, a, r, s_next, alpha, gamma, terminal=False) -> np.ndarray:
    """One tabular update toward r + gamma max_a' Q(s', a'); returns a new
    table. Terminal transitions bootstrap from 0.
    """
    q = np.asarray(qtable, dtype=float)
    n_states, n_actions = q.shape
    if not (0 <= s < n_states and 0 <= s_next < n_states):
        raise IndexError(f"state out of range for {n_states} states")
    if not 0 <= a < n_actions:
        raise IndexError(f"action {a} out of range for {n_actions} actions")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    bootstrap = 0.0 if terminal else gamma * q[s_next].max()
    new = q.copy()
    new[s, a] += alpha * (r + bootstrap - q[s, a])
    return new


def epsilon_greedy(q_values, eps, rng) -> int:
    """Greedy (lowest index on ties) w.p. 1-eps, uniform otherwise."""
    q = np.asarray(q_values, dtype=float)
    if q.size == 0:
        raise ValueError("empty action-value vector")
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def boltzmann_mixture_probs(q_values, alpha_mix, beta_temp) -> np.ndarray:
    """(1 - alpha) softmax(beta q) + alpha uniform, over the full action set
    (all N+1 actions including idle), so probabilities sum to 1.
    """
    q = np.asarray(q_values, dtype=float)
    if not 0.0 < alpha_mix < 1.0:
        raise ValueError("alpha_mix must lie in (0, 1)")
    z = beta_temp * q
    z = z - z.max()  # stable for |beta q| up to ~700
    e = np.exp(z)
    return (1.0 - alpha_mix) * e / e.sum() + alpha_mix / q.size


def boltzmann_mixture_policy(q_values, alpha_mix, beta_temp, rng) -> int:
    p = boltzmann_mixture_probs(q_values, alpha_mix, beta_temp)
    return int(rng.choice(p.size, p=p))


# ---------------------------------------------------------------------------
# DQN


def sync_target(net: Mlp) -> Mlp:
    """Deep copy; later updates to the online network leave it untouched."""
    return net.copy()


def dqn_train_step(
    net: Mlp,
    target_net: Mlp,
    buf: ReplayBuffer,
    batch: int,
    gamma: float,
    opt: OptimizerState,
    rng,
    double_q: bool = False,
):
    """One minibatch update on the sum-squared Bellman error
    sum_batch (y - Q(s, a))^2 with y = r, or r + gamma max_a' Q(s', a')
    under the target network (argmax under the online one when double_q).

    Returns (net, opt, loss).
    """
    samples = replay_sample(buf, batch, rng)
    states = np.stack([e.state for e in samples])
    next_states = np.stack([e.next_state for e in samples])
    actions = np.array([e.action for e in samples])
    rewards = np.array([e.reward for e in samples])
    live = ~np.array([e.terminal for e in samples])

    q_next_target = forward(target_net, next_states).output
    if double_q:
        greedy = np.argmax(forward(net, next_states).output, axis=1)
        bootstrap = q_next_target[np.arange(batch), greedy]
    else:
        bootstrap = q_next_target.max(axis=1)
    y = rewards + gamma * bootstrap * live

    trace = forward(net, states)
    q = trace.output
    taken = q[np.arange(batch), actions]
    loss = float(np.sum((y - taken) ** 2))

    gout = np.zeros_like(q)
    gout[np.arange(batch), actions] = 2.0 * (taken - y)
    grads = backward(net, trace, gout)
    net, opt = apply_update(net, grads, opt)
    return net, opt, loss


# ---------------------------------------------------------------------------
# Policy gradient


def _discounted_returns(rewards, gamma) -> np.ndarray:
    g = 0.0
    out = np.empty(len(rewards))
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def reinforce_update(policy: Mlp, episode, gamma, opt, baseline=0.0):
    """Monte-Carlo policy gradient over one episode of (state, action,
    reward) triples, reward being the one that followed the action.

    Ascends sum_t (G_t - baseline) log pi(a_t | s_t) in a single batched
    step. Returns (policy, opt, J) with J the discounted return from the
    start state.
    """
    if policy.out != "softmax":
        raise ValueError("policy head must be softmax")
    if not episode:
        raise ValueError("episode is empty")
    states = np.stack([s for s, _, _ in episode])
    actions = np.array([a for _, a, _ in episode])
    rewards = np.array([r for _, _, r in episode], dtype=float)
    returns = _discounted_returns(rewards, gamma)

    trace = forward(policy, states)
    probs = trace.output
    rows = np.arange(len(episode))
    # minimize -(G - b) log p[a]; softmax jacobian handled by backward
    gout = np.zeros_like(probs)
    gout[rows, actions] = -(returns - baseline) / probs[rows, actions]
    grads = backward(policy, trace, gout)
    policy, opt = apply_update(policy, grads, opt)
    return policy, opt, float(returns[0])


def actor_critic_step(
    policy: Mlp,
    critic: Mlp,
    transition: Experience,
    next_action: int,
    gamma: float,
    policy_opt: OptimizerState,
    critic_opt: OptimizerState,
):
    """One-step actor-critic: the critic regresses its (s, a) output toward
    r + gamma Q_w(s', a') (0 when terminal); the actor ascends
    log pi(a | s) weighted by the critic's pre-update value Q_w(s, a).

    Returns (policy, critic, policy_opt, critic_opt).
    """
    if policy.out != "softmax":
        raise ValueError("policy head must be softmax")
    s, a = transition.state, transition.action

    critic_trace = forward(critic, s)
    q = critic_trace.output
    q_sa = float(q[a])
    if transition.terminal:
        target = transition.reward
    else:
        q_next = forward(critic, transition.next_state).output
        target = transition.reward + gamma * float(q_next[next_action])

    gout_c = np.zeros_like(q)
    gout_c[a] = 2.0 * (q_sa - target)
    critic_grads = backward(critic, critic_trace, gout_c)

    policy_trace = forward(policy, s)
    probs = policy_trace.output
    gout_p = np.zeros_like(probs)
    gout_p[a] = -q_sa / probs[a]
    policy_grads = backward(policy, policy_trace, gout_p)

    critic, critic_opt = apply_update(critic, critic_grads, critic_opt)
    policy, policy_opt = apply_update(policy, policy_grads, policy_opt)
    return policy, critic, policy_opt, critic_opt


def write_training_log(rows, path) -> None:
    """Persist a training log as CSV rows
    (step, episode, epsilon, loss, mean_q, reward).
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "episode", "epsilon", "loss", "mean_q", "reward"])
        for step, episode, epsilon, loss, mean_q, reward in rows:
            w.writerow([
                int(step), int(episode), f"{float(epsilon):.6g}",
                f"{float(loss):.9g}", f"{float(mean_q):.9g}", f"{float(reward):.9g}",
            ])
