"""Contextual multi-objective MDP over :class:`~mecmorl.sim.SimWorld`.

A context fixes the preference, the number of edge servers and every CPU
frequency for one episode. Observations are fixed length: ``E_max + 1`` server
rows (dummy servers padded with ``-1``) plus the preference.

Server row layout (``FEATURES``), in conditioning-friendly units::

    task size [Mbit], uplink rate [Gbit/s], cpu freq [GHz], n_exe, E, histogram...

Histogram bin ``i`` counts residuals in ``[i, i+1)`` Mbit, the last bin is open.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .sim import (Executor, SimConfig, SimWorld, TaskSpec, offload_delay,
                  task_energy)

FEATURES = ("task_mbit", "rate_gbps", "freq_ghz", "n_exe", "num_edges")
MBIT = 1e6
PAD = -1.0


@dataclass(frozen=True)
class Context:
    preference: tuple[float, float]
    num_edges: int
    freqs: tuple[float, ...]

    def __post_init__(self):
        w_t, w_e = self.preference
        if w_t < 0 or w_e < 0 or abs(w_t + w_e - 1.0) > 1e-12:
            raise ValueError(f"preference must be convex weights, got {self.preference}")
        if self.num_edges < 1:
            raise ValueError("need at least one edge server")
        if len(self.freqs) != self.num_edges + 1:
            raise ValueError("freqs must list the cloud and every edge server")

    def with_preference(self, preference) -> "Context":
        return Context(tuple(float(w) for w in preference), self.num_edges, self.freqs)

    @classmethod
    def fixed(cls, num_edges: int, cloud_hz: float, edge_hz: float,
              preference=(0.5, 0.5)) -> "Context":
        return cls(tuple(float(w) for w in preference), num_edges,
                   (float(cloud_hz),) + (float(edge_hz),) * num_edges)


@dataclass
class ContextSpace:
    preference_set: list
    edge_counts: tuple[int, ...]
    cloud_freq_range: tuple[float, float]
    edge_freq_range: tuple[float, float]

    def __post_init__(self):
        if not self.preference_set or not self.edge_counts:
            raise ValueError("context space must be nonempty")
        for lo, hi in (self.cloud_freq_range, self.edge_freq_range):
            if lo > hi:
                raise ValueError("frequency range min exceeds max")

    @property
    def max_edges(self) -> int:
        return max(self.edge_counts)

    @classmethod
    def training(cls, preference_set, max_edges: int = 8) -> "ContextSpace":
        return cls(list(preference_set), tuple(range(1, max_edges + 1)),
                   (3.5e9, 4.5e9), (1.75e9, 2.25e9))

    @classmethod
    def testing(cls, preference_set, max_edges: int = 10) -> "ContextSpace":
        return cls(list(preference_set), tuple(range(1, max_edges + 1)),
                   (3.0e9, 5.0e9), (1.5e9, 2.5e9))

    @classmethod
    def singleton(cls, context: Context) -> "ContextSpace":
        f0 = context.freqs[0]
        fe = context.freqs[1:]
        if len(set(fe)) != 1:
            raise ValueError("singleton space needs identical edge frequencies")
        return cls([context.preference], (context.num_edges,), (f0, f0), (fe[0], fe[0]))


def sample_context(rng: np.random.Generator, space: ContextSpace, preference_index: int) -> Context:
    pref = tuple(float(w) for w in space.preference_set[preference_index])
    E = int(space.edge_counts[rng.integers(len(space.edge_counts))])
    f0 = float(rng.uniform(*space.cloud_freq_range))
    fe = rng.uniform(*space.edge_freq_range, size=E)
    return Context(pref, E, (f0,) + tuple(float(f) for f in fe))


def residual_histogram(residuals_bits, n_bins: int) -> np.ndarray:
    out = np.zeros(n_bins)
    if len(residuals_bits):
        idx = np.minimum(np.floor(np.asarray(residuals_bits) / MBIT), n_bins - 1).astype(int)
        np.add.at(out, idx, 1.0)
    return out


@dataclass
class EncodedState:
    servers: np.ndarray           # (E_max + 1, 5 + n_bins)
    preference: np.ndarray        # (2,)
    num_edges: int

    @property
    def valid_actions(self) -> np.ndarray:
        return np.arange(self.servers.shape[0]) <= self.num_edges


@dataclass
class StateBatch:
    servers: np.ndarray           # (B, S, F)
    preference: np.ndarray        # (B, 2)
    num_edges: np.ndarray         # (B,) int

    def __len__(self):
        return self.servers.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.servers.shape[1])[None, :] <= self.num_edges[:, None]

    def take(self, idx) -> "StateBatch":
        return StateBatch(self.servers[idx], self.preference[idx], self.num_edges[idx])

    @classmethod
    def stack(cls, states: Sequence[EncodedState]) -> "StateBatch":
        return cls(np.stack([s.servers for s in states]),
                   np.stack([s.preference for s in states]),
                   np.array([s.num_edges for s in states], dtype=np.int64))


def encode_state(world: SimWorld, context: Context, task: Optional[TaskSpec],
                 e_max: int, n_bins: int = 30) -> EncodedState:
    """Observation at the current step; ``task=None`` encodes the idle sentinel."""
    E = context.num_edges
    if E > e_max:
        raise ValueError(f"context has {E} edges but the encoding holds {e_max}")
    rows = np.full((e_max + 1, len(FEATURES) + n_bins), PAD)
    rates = world.rates(task) if task is not None else np.zeros(E + 1)
    size = task.size_bits / MBIT if task is not None else 0.0
    for e in range(E + 1):
        res = world.executors[e].residuals()
        rows[e, 0] = size
        rows[e, 1] = rates[e] / 1e9
        rows[e, 2] = context.freqs[e] / 1e9
        rows[e, 3] = len(res)
        rows[e, 4] = E
        rows[e, 5:] = residual_histogram(res, n_bins)
    return EncodedState(rows, np.asarray(context.preference, dtype=float), E)


class VectorReward(NamedTuple):
    delay: float    # r_T, seconds, <= 0
    energy: float   # r_E, joules, <= 0


def reward_energy(task: TaskSpec, action: int, world: SimWorld) -> float:
    rate = world.rates(task)[action]
    t_off = offload_delay(task.size_bits, rate)
    e_off, e_exe = task_energy(task.size_bits, t_off, world.energy, world.freqs[action])
    return -(e_off + e_exe)


def _sorted_phase_sum(sorted_res: np.ndarray, c: float) -> float:
    """Sum of remaining delays of tasks sharing a server, residuals ascending."""
    n = sorted_res.size
    if n == 0:
        return 0.0
    gaps = np.diff(sorted_res, prepend=0.0)
    k = n - np.arange(n)
    return float(c * np.sum(k * k * gaps))


def delay_reward_terms(residuals_bits, size_bits: float, t_off: float,
                       freq: float, eta: float) -> tuple[float, float, float, float]:
    """``(t_off, no_action, during, after)`` for admitting a task after an upload.

    ``no_action``: remaining delay of the residents without the task;
    ``during``: delay they accrue while the task uploads;
    ``after``: remaining delay of the post-upload set including the task.
    """
    c = eta / freq
    L = np.sort(np.asarray(residuals_bits, dtype=float))
    n = L.size
    no_action = 0.0
    during = 0.0
    survivors = L
    if n:
        gaps = np.diff(L, prepend=0.0)
        k = (n - np.arange(n)).astype(float)
        dur = c * k * gaps
        no_action = float(np.sum(k * dur))
        ends = np.cumsum(dur)
        starts = ends - dur
        overlap = np.minimum(dur, np.maximum(t_off - starts, 0.0))
        during = float(np.sum(k * overlap))
        p = int(np.searchsorted(ends, t_off, side="right"))
        if p < n:
            executed = (L[p - 1] if p else 0.0) + (t_off - (ends[p - 1] if p else 0.0)) / (c * k[p])
            survivors = L[p:] - executed
        else:
            survivors = L[:0]
    after = _sorted_phase_sum(np.sort(np.append(survivors, size_bits)), c)
    return t_off, no_action, during, after


def delay_reward_closed_form(residuals_bits, size_bits: float, t_off: float,
                             freq: float, eta: float) -> float:
    """Closed-form delay reward: ``-t_off + no_action - during - after``."""
    t, no_action, during, after = delay_reward_terms(residuals_bits, size_bits, t_off, freq, eta)
    return -t + no_action - during - after


def delay_reward_oracle(executor: Executor, size_bits: float, t_off: float) -> float:
    """Event-traced delay reward: difference of summed completion times."""
    t0 = executor.clock
    base = executor.copy()
    without = sum(t - t0 for _, t in base.advance(math.inf))
    trial = executor.copy()
    tid = max((i for i, _ in trial.entries), default=0) + 1
    done = trial.admit(tid, size_bits, t0 + t_off)
    done += trial.advance(math.inf)
    with_task = sum(t - t0 for _, t in done)
    return -(with_task - without)


def _delay_inputs(world: SimWorld, context: Context, task: TaskSpec, action: int):
    if not 0 <= action <= context.num_edges:
        raise ValueError(f"action {action} outside 0..{context.num_edges}")
    rate = world.rates(task)[action]
    return offload_delay(task.size_bits, rate), world.executors[action], context.freqs[action]


def reward_delay_estimate(world: SimWorld, context: Context, task: TaskSpec, action: int) -> float:
    t_off, ex, f = _delay_inputs(world, context, task, action)
    return delay_reward_closed_form(ex.residuals(), task.size_bits, t_off, f, ex.eta)


def reward_delay_oracle(world: SimWorld, context: Context, task: TaskSpec, action: int) -> float:
    t_off, ex, _ = _delay_inputs(world, context, task, action)
    return delay_reward_oracle(ex, task.size_bits, t_off)


def scalarize(reward: VectorReward, preference, alpha_t: float, alpha_e: float) -> float:
    w_t, w_e = preference
    return w_t * alpha_t * reward.delay + w_e * alpha_e * reward.energy


class OffloadingEnv:
    """Episode runner for one context.

    ``reset`` returns the first observation; ``step`` returns
    ``(next_state, VectorReward, done, info)``. Idle steps of the poisson
    arrival mode are skipped internally with zero reward.
    """

    def __init__(self, context: Context, sim_config: SimConfig, e_max: int,
                 n_bins: int = 30, alpha_t: float = 0.1, alpha_e: float = 1.0,
                 delay_backend: str = "closed_form", seed=None):
        if context.num_edges > e_max:
            raise ValueError(f"context has {context.num_edges} edges, policy supports {e_max}")
        if delay_backend not in ("closed_form", "oracle"):
            raise ValueError(f"unknown delay backend {delay_backend!r}")
        self.context = context
        self.sim_config = sim_config
        self.e_max = e_max
        self.n_bins = n_bins
        self.alpha_t = alpha_t
        self.alpha_e = alpha_e
        self.delay_backend = delay_backend
        self._seed = seed
        self.world: Optional[SimWorld] = None

    @property
    def num_features(self) -> int:
        return len(FEATURES) + self.n_bins

    def reset(self, seed=None) -> EncodedState:
        rng = np.random.default_rng(self._seed if seed is None else seed)
        self.world = SimWorld(self.sim_config, self.context.freqs, rng)
        self._skip_idle()
        return self._observe()

    def _observe(self) -> EncodedState:
        return encode_state(self.world, self.context, self.world.current_task,
                            self.e_max, self.n_bins)

    def _skip_idle(self):
        w = self.world
        while not w.done and w.current_task is None:
            w.end_step()
        if w.done:
            w.drain()

    @property
    def done(self) -> bool:
        return self.world.done

    def step(self, action: int):
        w = self.world
        if w.done:
            raise RuntimeError("episode is done; call reset()")
        action = int(action)
        if not 0 <= action <= self.context.num_edges:
            raise ValueError(f"action {action} is masked (valid 0..{self.context.num_edges})")
        task = w.current_task
        r_e = reward_energy(task, action, w)
        if self.delay_backend == "closed_form":
            r_t = reward_delay_estimate(w, self.context, task, action)
        else:
            r_t = reward_delay_oracle(w, self.context, task, action)
        rec = w.dispatch(action)
        w.end_step()
        self._skip_idle()
        reward = VectorReward(r_t, r_e)
        info = {"record": rec,
                "scalar": scalarize(reward, self.context.preference, self.alpha_t, self.alpha_e)}
        return self._observe(), reward, w.done, info

    def totals(self) -> tuple[float, float]:
        return self.world.totals()
