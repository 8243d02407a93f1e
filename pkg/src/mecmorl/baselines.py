"""Comparison schedulers: LinUCB, simulated annealing, random-p, per-preference SAC."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .momdp import FEATURES, Context, ContextSpace, OffloadingEnv, StateBatch, sample_context
from .sac import (EvalResult, TrainerConfig, TrainResult, run_policy_episodes,
                  run_world_episodes, train)
from .sim import SimConfig, SimWorld

N_BASE = len(FEATURES)


# ---------------------------------------------------------------- LinUCB

def linucb_features(states: StateBatch) -> np.ndarray:
    """Per-arm contexts ``(B, S, 2 + N_BASE + 3)``.

    The residual histogram is compressed to (count, mean, max) using bin centres.
    """
    rows = states.servers
    base = rows[..., :N_BASE]
    hist = rows[..., N_BASE:]
    centres = np.arange(hist.shape[-1]) + 0.5
    count = hist.sum(axis=-1)
    mean = np.where(count > 0, (hist * centres).sum(axis=-1) / np.maximum(count, 1), 0.0)
    occupied = hist > 0
    top = np.where(occupied.any(axis=-1),
                   hist.shape[-1] - 1 - np.argmax(occupied[..., ::-1], axis=-1), -1)
    mx = np.where(top >= 0, top + 0.5, 0.0)
    comp = np.stack([count, mean, mx], axis=-1)
    pref = np.broadcast_to(states.preference[:, None, :], base.shape[:2] + (2,))
    x = np.concatenate([pref, base, comp], axis=-1)
    return np.where(states.mask[..., None], x, 0.0)


class LinUCB:
    """Disjoint linear UCB with one ridge model per arm."""

    def __init__(self, n_arms: int, dim: int, alpha_ucb: float = 1.0):
        self.n_arms = n_arms
        self.dim = dim
        self.alpha_ucb = alpha_ucb
        self.A = np.stack([np.eye(dim) for _ in range(n_arms)])
        self.b = np.zeros((n_arms, dim))
        self._Ainv = self.A.copy()

    def theta(self) -> np.ndarray:
        return np.einsum("aij,aj->ai", self._Ainv, self.b)

    def scores(self, x: np.ndarray) -> np.ndarray:
        """UCB scores for per-arm features ``x`` of shape ``(..., n_arms, dim)``."""
        th = self.theta()
        mean = np.einsum("...ad,ad->...a", x, th)
        var = np.einsum("...ad,ade,...ae->...a", x, self._Ainv, x)
        return mean + self.alpha_ucb * np.sqrt(np.maximum(var, 0.0))

    def select(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Argmax over valid arms; ``np.argmax`` keeps the lowest index on ties."""
        s = np.where(mask, self.scores(x), -np.inf)
        return np.argmax(s, axis=-1)

    def update(self, arm: int, x: np.ndarray, reward: float):
        if not math.isfinite(reward):
            raise ValueError("reward must be finite")
        x = np.asarray(x, dtype=float)
        self.A[arm] += np.outer(x, x)
        self.b[arm] += reward * x
        # Sherman-Morrison keeps the inverse current without a solve
        Ax = self._Ainv[arm] @ x
        self._Ainv[arm] -= np.outer(Ax, Ax) / (1.0 + x @ Ax)


def train_linucb(space: ContextSpace, sim_config: SimConfig, e_max: int, n_bins: int,
                 episodes_per_preference: int, seed: int, alpha_ucb: float = 1.0,
                 alpha_t: float = 0.1, alpha_e: float = 1.0) -> LinUCB:
    """Online learning across every preference of ``space``; returns the frozen model."""
    if space.max_edges > e_max:
        raise ValueError("context space exceeds e_max")
    model = LinUCB(e_max + 1, 2 + N_BASE + 3, alpha_ucb)
    rng = np.random.default_rng([seed, 31])
    for ep in range(episodes_per_preference):
        for i in range(len(space.preference_set)):
            ctx = sample_context(rng, space, i)
            env = OffloadingEnv(ctx, sim_config, e_max, n_bins, alpha_t, alpha_e)
            state = env.reset(seed=[seed, 32, ep, i])
            while not env.done:
                batch = StateBatch.stack([state])
                x = linucb_features(batch)[0]
                a = int(model.select(x[None], batch.mask)[0])
                state, _, _, info = env.step(a)
                model.update(a, x[a], info["scalar"])
    return model


def evaluate_linucb(model: LinUCB, context: Context, sim_config: SimConfig, e_max: int,
                    n_bins: int, num_episodes: int, seed: int) -> EvalResult:
    def select(states: StateBatch):
        return model.select(linucb_features(states), states.mask)
    return run_policy_episodes(select, context, sim_config, e_max, n_bins, num_episodes, seed)


# ---------------------------------------------------------------- random-p

class RandomPolicy:
    """Cloud with probability ``p``, otherwise a uniformly chosen edge server."""

    def __init__(self, p_cloud: float):
        if not 0.0 <= p_cloud <= 1.0:
            raise ValueError("p_cloud must lie in [0, 1]")
        self.p_cloud = p_cloud

    def select(self, num_edges: int, rng: np.random.Generator) -> int:
        u = rng.random()
        if num_edges == 0 or u < self.p_cloud:
            return 0
        return 1 + int(rng.integers(num_edges))

    def stream(self, num_edges: int, rng: np.random.Generator):
        while True:
            yield self.select(num_edges, rng)


def evaluate_random(p_cloud: float, context: Context, sim_config: SimConfig,
                    num_episodes: int, seed: int) -> EvalResult:
    pol = RandomPolicy(p_cloud)
    rng = np.random.default_rng([seed, 41])
    return run_world_episodes(lambda w, t: pol.select(w.num_edges, rng), context, sim_config,
                              num_episodes, seed)


# ---------------------------------------------------------------- simulated annealing

@dataclass
class SAResult:
    assignment: np.ndarray
    best_return: float
    evaluations: int
    history: list  # best-ever return after each evaluation


def sa_search(cost: Callable[[np.ndarray], float], n_steps: int, n_actions: int, budget: int,
              rng: np.random.Generator, cooling: float = 0.995, calibration: int = 20,
              initial_temperature: Optional[float] = None) -> SAResult:
    """Anneal a fixed per-step assignment under an episode budget.

    ``cost`` runs one episode and returns its scalarized cost (negative return).
    The first evaluation is a random assignment; up to ``calibration`` further
    random assignments set the initial temperature (their stdev) and count
    against the budget. Every later evaluation mutates one coordinate.
    """
    if budget < 1:
        raise ValueError("budget must be at least one episode")
    used = 0

    def run(x):
        nonlocal used
        used += 1
        return float(cost(x))

    current = rng.integers(0, n_actions, size=n_steps)
    cur_cost = run(current)
    best, best_cost = current.copy(), cur_cost
    history = [-best_cost]
    k = min(calibration, budget - 1)
    samples = []
    for _ in range(k):
        c = run(rng.integers(0, n_actions, size=n_steps))
        samples.append(c)
        history.append(-best_cost)
    if initial_temperature is None:
        temp = float(np.std(samples)) if len(samples) > 1 else 0.0
    else:
        temp = float(initial_temperature)
    while used < budget:
        cand = current.copy()
        i = int(rng.integers(n_steps))
        if n_actions > 1:
            cand[i] = (cand[i] + 1 + int(rng.integers(n_actions - 1))) % n_actions
        c = run(cand)
        delta = c - cur_cost
        if delta <= 0 or (temp > 0 and rng.random() < math.exp(-delta / temp)):
            current, cur_cost = cand, c
            if c < best_cost:
                best, best_cost = cand.copy(), c
        history.append(-best_cost)
        temp *= cooling
    return SAResult(best, -best_cost, used, history)


def episode_cost(context: Context, sim_config: SimConfig, preference, alpha_t: float,
                 alpha_e: float, seed) -> Callable[[np.ndarray], float]:
    """Scalarized simulator cost of a fixed assignment on one seeded episode."""
    def cost(assignment):
        w = SimWorld(sim_config, context.freqs, np.random.default_rng(seed))
        k = 0
        while not w.done:
            if w.current_task is not None:
                w.dispatch(int(assignment[min(k, len(assignment) - 1)]))
                k += 1
            w.end_step()
        w.drain()
        d, e = w.totals()
        return preference[0] * alpha_t * d + preference[1] * alpha_e * e
    return cost


def evaluate_assignment(assignment: np.ndarray, context: Context, sim_config: SimConfig,
                        num_episodes: int, seed: int) -> EvalResult:
    def choose(w, t):
        k = len(w.records)  # tasks dispatched so far
        return int(assignment[min(k, len(assignment) - 1)])
    return run_world_episodes(choose, context, sim_config, num_episodes, seed)


# ---------------------------------------------------------------- per-preference SAC

def multi_policy_train(preferences: Sequence, context: Context, config: TrainerConfig,
                       sim_config: SimConfig, seed: int) -> list[TrainResult]:
    """One single-environment learner per preference on a fixed context."""
    cfg = replace(config, n_envs=1)
    out = []
    for i, w in enumerate(preferences):
        space = ContextSpace.singleton(context.with_preference(tuple(w)))
        out.append(train(cfg, space, sim_config, seed=seed + 1000 * (i + 1)))
    return out
