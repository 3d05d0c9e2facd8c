"""Classical baselines and brute-force oracles for judging learned policies:
weighted sum-rate evaluation, scalar WMMSE and fractional-programming power
control, exhaustive grid search, assignment, and tabular value iteration.

All power solvers keep iterates inside the box [0, P_max] exactly.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

LOG_BASES = ("log2", "ln")


@dataclass
class PowerVector:
    """Transmit powers in watts, boxed to [0, p_max]."""

    powers: np.ndarray
    p_max: float

    def __post_init__(self):
        self.powers = np.asarray(self.powers, dtype=float)
        if np.any(self.powers < 0.0) or np.any(self.powers > self.p_max):
            raise ValueError(f"powers must lie in [0, {self.p_max}]")


@dataclass
class Assignment:
    """Bijective job -> worker map."""

    perm: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=int)
        n = self.perm.size
        if not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ValueError("not a permutation")


def _as_powers(p) -> np.ndarray:
    arr = p.powers if isinstance(p, PowerVector) else np.asarray(p, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError("negative transmit power")
    return arr


def _as_gains(g) -> np.ndarray:
    return np.asarray(getattr(g, "gains", g), dtype=float)


def sinr(gains, powers, noise) -> np.ndarray:
    """Per-link SINR: gamma_i = P_i g_ii / (sum_{j!=i} P_j g_ji + noise)."""
    g = _as_gains(gains)
    p = _as_powers(powers)
    direct = np.diag(g) * p
    interference = p @ g - direct
    return direct / (interference + noise)


def sum_rate(gains, powers, weights=None, noise=1.0, base="log2") -> float:
    """Weighted sum rate sum_i w_i log(1 + gamma_i).

    base selects log2 (bits) or ln (nats).
    """
    if base not in LOG_BASES:
        raise ValueError(f"base must be one of {LOG_BASES}")
    if noise <= 0.0:
        raise ValueError("noise power must be positive")
    g = _as_gains(gains)
    p = _as_powers(powers)
    if p.shape != (g.shape[0],):
        raise ValueError(f"powers shape {p.shape} does not match {g.shape[0]} links")
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0.0):
        raise ValueError("weights must be nonnegative")
    rates = np.log1p(sinr(g, p, noise))
    if base == "log2":
        rates = rates / np.log(2.0)
    return float(w @ rates)


@dataclass
class PowerSolution:
    """Solver output: final powers, per-iteration objective, and whether the
    stopping tolerance was reached before max_iter.
    """

    powers: PowerVector
    trace: np.ndarray
    converged: bool


def wmmse_power(
    gains, weights=None, p_max=1.0, noise=1.0, tol=1e-6, max_iter=500, base="log2"
) -> PowerSolution:
    """Scalar-channel WMMSE block updates for the weighted sum-rate problem.

    With v_i = sqrt(P_i): receiver u_i = sqrt(g_ii) v_i / (noise + sum_j
    g_ji v_j^2), MMSE weight wt_i = 1/(1 - u_i sqrt(g_ii) v_i), transmitter
    v_i = w_i wt_i u_i sqrt(g_ii) / sum_j w_j wt_j u_j^2 g_ij, clipped to
    [0, sqrt(p_max)]. The objective trace never decreases (each block step
    maximizes a separable concave surrogate over the box).
    """
    g = _as_gains(gains)
    n = g.shape[0]
    if p_max <= 0.0:
        raise ValueError("p_max must be positive")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    root_direct = np.sqrt(np.diag(g))

    v = np.full(n, np.sqrt(p_max))
    trace = [sum_rate(g, v**2, w, noise, base)]
    best_obj, best_p = trace[0], np.full(n, p_max)
    converged = False
    for _ in range(max_iter):
        u = root_direct * v / (noise + (v**2) @ g)
        wt = 1.0 / (1.0 - u * root_direct * v)
        v = w * wt * u * root_direct / (g @ (w * wt * u**2))
        v = np.clip(v, 0.0, np.sqrt(p_max))
        trace.append(sum_rate(g, v**2, w, noise, base))
        if trace[-1] > best_obj:
            # clip(v)^2 may overshoot p_max by one ulp
            best_obj, best_p = trace[-1], np.minimum(v**2, p_max)
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    # best-so-far; under monotone ascent this is also the final iterate
    return PowerSolution(PowerVector(best_p, p_max), np.array(trace), converged)


def fp_power(
    gains, weights=None, p_max=1.0, noise=1.0, tol=1e-6, max_iter=500, base="log2"
) -> PowerSolution:
    """Closed-form fractional-programming alternation (quadratic transform).

    Fix powers and set gamma_i to the current SINR; auxiliaries y_i =
    sqrt(w_i (1+gamma_i) g_ii P_i) / (sum_j g_ji P_j + noise); then P_i =
    min(p_max, y_i^2 w_i (1+gamma_i) g_ii / (sum_j y_j^2 g_ij)^2).
    """
    g = _as_gains(gains)
    n = g.shape[0]
    if p_max <= 0.0:
        raise ValueError("p_max must be positive")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    direct = np.diag(g)

    p = np.full(n, p_max)
    trace = [sum_rate(g, p, w, noise, base)]
    best_obj, best_p = trace[0], p
    converged = False
    for _ in range(max_iter):
        gamma = sinr(g, p, noise)
        y = np.sqrt(w * (1.0 + gamma) * direct * p) / (p @ g + noise)
        p = np.minimum(p_max, y**2 * w * (1.0 + gamma) * direct / (g @ y**2) ** 2)
        trace.append(sum_rate(g, p, w, noise, base))
        if trace[-1] > best_obj:
            best_obj, best_p = trace[-1], p
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return PowerSolution(PowerVector(best_p, p_max), np.array(trace), converged)


BRUTE_FORCE_GUARD = 10**7


def brute_force_power(gains, weights=None, noise=1.0, power_grid=(0.0, 1.0), base="log2"):
    """Exhaustive weighted sum-rate maximization over a finite power grid.

    Ties break lexicographically in grid order (first maximizer kept), so
    results are deterministic. Refuses grids larger than 10^7 combinations.
    """
    g = _as_gains(gains)
    n = g.shape[0]
    grid = np.asarray(sorted(power_grid), dtype=float)
    if float(len(grid)) ** n > BRUTE_FORCE_GUARD:
        raise ValueError(
            f"{len(grid)}^{n} grid points exceed the {BRUTE_FORCE_GUARD} guard"
        )
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    best_obj = -np.inf
    best = None
    for combo in itertools.product(range(len(grid)), repeat=n):
        p = grid[list(combo)]
        obj = sum_rate(g, p, w, noise, base)
        if obj > best_obj:
            best_obj = obj
            best = p
    return PowerVector(best, float(grid[-1])), float(best_obj)


def hungarian(cost) -> tuple[Assignment, float]:
    """Minimum-cost perfect matching on a square cost matrix.

    Deterministic: among optima the smallest-index assignment is returned
    (a constant matrix yields the identity permutation).
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(c)
    perm = np.empty(c.shape[0], dtype=int)
    perm[rows] = cols
    return Assignment(perm), float(c[rows, cols].sum())


def value_iteration(mdp, gamma=0.9, tol=1e-10) -> np.ndarray:
    """Q* table for a finite MDP with known dynamics.

    mdp needs n_states, n_actions, p[s, a, s'] and r[s, a, s']. Iterates the
    Bellman optimality operator to sup-norm tol.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1) for a continuing task")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    p = np.asarray(mdp.p, dtype=float)
    r = np.asarray(mdp.r, dtype=float)
    if p.shape != (mdp.n_states, mdp.n_actions, mdp.n_states):
        raise ValueError("transition tensor shape mismatch")
    if np.any(p < 0.0) or not np.allclose(p.sum(axis=2), 1.0, atol=1e-9):
        raise ValueError("transition rows must be distributions")

    r_exp = np.sum(p * r, axis=2)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    while True:
        v = q.max(axis=1)
        q_new = r_exp + gamma * (p @ v)
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new


def write_oracle_csv(rows, path) -> None:
    """Persist oracle comparisons as (instance_id, method, objective)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["instance_id", "method", "objective"])
        for instance_id, method, objective in rows:
            w.writerow([instance_id, method, f"{float(objective):.12g}"])
