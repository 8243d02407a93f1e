"""Continuous-time MEC ground truth.

Servers execute resident tasks under processor sharing: with ``n`` tasks on a
server of frequency ``f`` each task is depleted at ``f / (n * eta)`` bits/s.
Offloading is binary, a task is transmitted to exactly one server over a
Rayleigh-faded uplink and joins that server's executor when the upload ends.

Units: bits, seconds, joules, Hz throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

CLOUD = "cloud"
EDGE = "edge"


@dataclass(frozen=True)
class TaskSpec:
    id: int
    user: int
    size_bits: float
    arrival_step: int

    def __post_init__(self):
        if not self.size_bits > 0:
            raise ValueError(f"task size must be positive, got {self.size_bits}")
        if self.user < 1:
            raise ValueError("users are indexed from 1")


@dataclass(frozen=True)
class ServerSpec:
    id: int
    kind: str
    cpu_freq_hz: float

    def __post_init__(self):
        if not self.cpu_freq_hz > 0:
            raise ValueError("cpu_freq_hz must be positive")
        if (self.id == 0) != (self.kind == CLOUD):
            raise ValueError("server 0 is the cloud and the only cloud")


@dataclass(frozen=True)
class EnergyModel:
    cycles_per_bit: float = 1e3
    capacitance_coeff: float = 5e-31
    offload_power_w: float = 10e-3

    def __post_init__(self):
        if min(self.cycles_per_bit, self.capacitance_coeff, self.offload_power_w) <= 0:
            raise ValueError("energy model parameters must be positive")


@dataclass
class ChannelModel:
    """Uplink model: ``|h|^2 = G0 * d**-alpha * X`` with ``X ~ Exp(1)``.

    ``distance_m`` has shape ``(num_users, num_servers)``; row ``u - 1`` is user
    ``u``.
    """

    bandwidth_hz: float = 16.6e6
    offload_power_w: float = 10e-3
    noise_power_w: float = 1e-13
    pathloss_exponent: float = 3.0
    distance_m: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))
    fading_mean_gain: float = 1e3
    interference_enabled: bool = False

    def __post_init__(self):
        self.distance_m = np.asarray(self.distance_m, dtype=float)
        if min(self.bandwidth_hz, self.offload_power_w, self.noise_power_w,
               self.pathloss_exponent, self.fading_mean_gain) <= 0:
            raise ValueError("channel parameters must be positive")
        if np.any(self.distance_m <= 0):
            raise ValueError("distances must be positive")

    def gains(self, fading: np.ndarray) -> np.ndarray:
        """Power gains ``|h_{u,e}|^2`` for a fading draw shaped like ``distance_m``."""
        return self.fading_mean_gain * self.distance_m ** (-self.pathloss_exponent) * fading

    def interference(self, gains: np.ndarray, user: int, server: int) -> float:
        """Aggregate co-channel power at ``server`` from every user except ``user``."""
        if not self.interference_enabled:
            return 0.0
        col = gains[:, server]
        return float(self.offload_power_w * (col.sum() - col[user - 1]))


def balanced_mean_size(dt: float, freqs: Sequence[float], eta: float,
                       lambda_p: float, num_users: int) -> float:
    """Mean task size (bits) at which offered load equals total compute capacity."""
    freqs = list(freqs)
    if dt <= 0 or eta <= 0 or lambda_p <= 0 or num_users <= 0:
        raise ValueError("dt, eta, lambda_p and num_users must be positive")
    if not freqs or min(freqs) <= 0:
        raise ValueError("frequencies must be positive")
    return dt * (sum(freqs) / eta) / (lambda_p * num_users)


def draw_task_sizes(rng: np.random.Generator, mean_bits: float, count: int) -> list[float]:
    if mean_bits <= 0:
        raise ValueError("mean_bits must be positive")
    if count == 0:
        return []
    return rng.exponential(mean_bits, size=count).tolist()


def data_rate(channel: ChannelModel, user: int, server: int, gain: float,
              interference_w: float = 0.0) -> float:
    """Shannon rate in bits/s; ``interference_w`` is ignored unless enabled."""
    if gain < 0:
        raise ValueError("gain must be nonnegative")
    i = interference_w if channel.interference_enabled else 0.0
    snr = channel.offload_power_w * gain / (channel.noise_power_w + i)
    return channel.bandwidth_hz * math.log2(1.0 + snr)


def offload_delay(size_bits: float, rate: float) -> float:
    if rate <= 0:
        raise ValueError("unreachable server: data rate is zero")
    return size_bits / rate


def task_energy(size_bits: float, offload_delay_s: float, model: EnergyModel,
                freq: float) -> tuple[float, float]:
    """Return ``(E_off, E_exe)`` in joules."""
    if offload_delay_s < 0:
        raise ValueError("offload delay must be nonnegative")
    e_off = model.offload_power_w * offload_delay_s
    e_exe = model.capacitance_coeff * model.cycles_per_bit * freq * freq * size_bits
    return e_off, e_exe


class Executor:
    """Processor-sharing executor of one server.

    Integration is exact and event driven: between completions the per-task
    speed ``f / (n * eta)`` is constant, so each interval is closed form.
    """

    __slots__ = ("server", "freq", "eta", "clock", "_ids", "_res")

    def __init__(self, server: int, freq: float, eta: float, clock: float = 0.0):
        self.server = server
        self.freq = float(freq)
        self.eta = float(eta)
        self.clock = float(clock)
        self._ids: list[int] = []
        self._res: list[float] = []

    def __len__(self):
        return len(self._ids)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self._ids, self._res))

    def residuals(self) -> list[float]:
        return list(self._res)

    def copy(self) -> "Executor":
        other = Executor(self.server, self.freq, self.eta, self.clock)
        other._ids = list(self._ids)
        other._res = list(self._res)
        return other

    def advance(self, until: float) -> list[tuple[int, float]]:
        """Run to ``until`` and return ``(task id, finish instant)`` in finish order."""
        if until < self.clock:
            raise ValueError(f"cannot advance backwards ({until} < {self.clock})")
        ids, res = self._ids, self._res
        throughput = self.freq / self.eta
        done: list[tuple[int, float]] = []
        while res:
            n = len(res)
            rmin = min(res)
            t_fin = self.clock + rmin * n / throughput
            if t_fin > until:
                break
            keep_ids, keep_res = [], []
            for tid, r in zip(ids, res):
                left = r - rmin
                if left > 0.0:
                    keep_ids.append(tid)
                    keep_res.append(left)
                else:
                    done.append((tid, t_fin))
            ids[:] = keep_ids
            res[:] = keep_res
            self.clock = t_fin
        if math.isinf(until):
            return done
        if res:
            dep = (until - self.clock) * throughput / len(res)
            res[:] = [r - dep for r in res]
        self.clock = until
        return done

    def admit(self, task_id: int, size_bits: float, at: float) -> list[tuple[int, float]]:
        """Advance to ``at`` then add the task with its full size as residual.

        Returns completions that happened on the way to ``at``.
        """
        if task_id in self._ids:
            raise RuntimeError(f"task {task_id} is already resident on server {self.server}")
        done = self.advance(at)
        self._ids.append(task_id)
        self._res.append(float(size_bits))
        return done


@dataclass
class SimConfig:
    """Simulator constants; defaults follow the paper's operating point."""

    num_steps: int = 100
    step_duration: float = 1.0
    num_users: int = 10
    bandwidth_hz: float = 16.6e6
    offload_power_w: float = 10e-3
    cycles_per_bit: float = 1e3
    capacitance_coeff: float = 5e-31
    arrival_rate: float = 0.1
    noise_power_w: float = 1e-13
    reference_gain: float = 1e3
    pathloss_exponent: float = 3.0
    cloud_distance_m: tuple[float, float] = (1000.0, 2000.0)
    edge_distance_m: tuple[float, float] = (50.0, 500.0)
    interference: bool = False
    arrival_mode: str = "synchronous"
    mean_task_bits: Optional[float] = None

    def __post_init__(self):
        if self.arrival_mode not in ("synchronous", "poisson"):
            raise ValueError(f"unknown arrival_mode {self.arrival_mode!r}")
        if self.num_steps < 1 or self.num_users < 1:
            raise ValueError("num_steps and num_users must be >= 1")

    @property
    def energy_model(self) -> EnergyModel:
        return EnergyModel(self.cycles_per_bit, self.capacitance_coeff, self.offload_power_w)


@dataclass
class TaskRecord:
    task: TaskSpec
    server: int
    dispatch_time: float
    offload_delay: float
    energy_offload: float
    energy_exec: float
    finish_time: Optional[float] = None

    @property
    def exec_delay(self) -> float:
        return self.finish_time - self.dispatch_time - self.offload_delay

    @property
    def delay(self) -> float:
        return self.finish_time - self.dispatch_time


class SimWorld:
    """One episode of the MEC system for a fixed set of server frequencies.

    All episode randomness (distances, arrivals, sizes, fading) is drawn up
    front from ``rng`` so it does not depend on the actions taken.
    """

    def __init__(self, config: SimConfig, freqs: Sequence[float], rng: np.random.Generator):
        self.config = config
        self.freqs = [float(f) for f in freqs]
        self.servers = [ServerSpec(e, CLOUD if e == 0 else EDGE, f)
                        for e, f in enumerate(self.freqs)]
        self.energy = config.energy_model
        if config.mean_task_bits is not None:
            self.mean_size = float(config.mean_task_bits)
        else:
            self.mean_size = balanced_mean_size(config.step_duration, self.freqs,
                                                config.cycles_per_bit, config.arrival_rate,
                                                config.num_users)
        self._draw_episode(rng)
        self.executors = [Executor(e, f, config.cycles_per_bit) for e, f in enumerate(self.freqs)]
        self._pending: list[list[tuple[float, int, float]]] = [[] for _ in self.freqs]
        self.records: dict[int, TaskRecord] = {}
        self.step_index = 0
        self.clock = 0.0
        self._next_id = 1
        self._queue: list[tuple[int, float]] = []  # (user, size) FIFO, poisson mode
        self._arrival_cursor = 0
        self._current: Optional[TaskSpec] = None
        self._current_gains: Optional[np.ndarray] = None
        self._load_step()

    @property
    def num_servers(self) -> int:
        return len(self.freqs)

    @property
    def num_edges(self) -> int:
        return len(self.freqs) - 1

    def _draw_episode(self, rng: np.random.Generator):
        cfg = self.config
        U, S, T = cfg.num_users, len(self.freqs), cfg.num_steps
        lo = np.empty(S)
        hi = np.empty(S)
        lo[0], hi[0] = cfg.cloud_distance_m
        lo[1:], hi[1:] = cfg.edge_distance_m
        dist = rng.uniform(lo, hi, size=(U, S))
        self.channel = ChannelModel(cfg.bandwidth_hz, cfg.offload_power_w, cfg.noise_power_w,
                                    cfg.pathloss_exponent, dist, cfg.reference_gain,
                                    cfg.interference)
        self._fading = rng.exponential(1.0, size=(T, U, S))
        if cfg.arrival_mode == "synchronous":
            self._users = rng.integers(1, U + 1, size=T)
            self._sizes = np.asarray(draw_task_sizes(rng, self.mean_size, T))
        else:
            counts = rng.poisson(cfg.arrival_rate, size=(T, U))
            total = int(counts.sum())
            self._arrivals = counts
            self._sizes = np.asarray(draw_task_sizes(rng, self.mean_size, total))

    def _load_step(self):
        """Fix the task offered at the current step, or ``None`` for idle."""
        t = self.step_index
        if t >= self.config.num_steps:
            self._current = None
            return
        if self.config.arrival_mode == "synchronous":
            user, size = int(self._users[t]), float(self._sizes[t])
        else:
            for u in range(self.config.num_users):
                for _ in range(int(self._arrivals[t, u])):
                    self._queue.append((u + 1, float(self._sizes[self._arrival_cursor])))
                    self._arrival_cursor += 1
            if not self._queue:
                self._current = None
                self._current_gains = None
                return
            user, size = self._queue.pop(0)
        self._current = TaskSpec(self._next_id, user, size, t)
        self._current_gains = self.channel.gains(self._fading[t])

    @property
    def current_task(self) -> Optional[TaskSpec]:
        return self._current

    @property
    def done(self) -> bool:
        return self.step_index >= self.config.num_steps

    def rates(self, task: Optional[TaskSpec] = None) -> np.ndarray:
        """Uplink rate from the task's user to every server (bits/s)."""
        task = task or self._current
        if task is None:
            return np.zeros(self.num_servers)
        g = self._current_gains
        out = np.empty(self.num_servers)
        for e in range(self.num_servers):
            interf = self.channel.interference(g, task.user, e)
            out[e] = data_rate(self.channel, task.user, e, float(g[task.user - 1, e]), interf)
        return out

    def dispatch(self, server: int) -> TaskRecord:
        """Offload the current task to ``server`` (does not advance time)."""
        task = self._current
        if task is None:
            raise RuntimeError("no task to dispatch at this step")
        if not 0 <= server < self.num_servers:
            raise ValueError(f"server {server} outside 0..{self.num_edges}")
        rate = self.rates(task)[server]
        t_off = offload_delay(task.size_bits, rate)
        e_off, e_exe = task_energy(task.size_bits, t_off, self.energy, self.freqs[server])
        rec = TaskRecord(task, server, self.clock, t_off, e_off, e_exe)
        self.records[task.id] = rec
        self._pending[server].append((self.clock + t_off, task.id, task.size_bits))
        self._pending[server].sort()
        self._next_id += 1
        self._current = None
        return rec

    def _advance_server(self, e: int, until: float):
        ex = self.executors[e]
        pend = self._pending[e]
        while pend and pend[0][0] <= until:
            at, tid, size = pend.pop(0)
            self._finish(ex.admit(tid, size, at))
        self._finish(ex.advance(until))

    def _finish(self, completions):
        for tid, t in completions:
            self.records[tid].finish_time = t

    def end_step(self):
        """Advance every server to the start of the next step and load its task."""
        if self.done:
            raise RuntimeError("episode already finished")
        self.step_index += 1
        self.clock = self.step_index * self.config.step_duration
        for e in range(self.num_servers):
            self._advance_server(e, self.clock)
        self._load_step()

    def drain(self):
        """Run every server to empty with no further arrivals."""
        for e in range(self.num_servers):
            self._advance_server(e, math.inf)

    def totals(self) -> tuple[float, float]:
        """Ground-truth ``(sum of task delays, sum of task energies)``.

        Requires :meth:`drain` so every dispatched task has finished.
        """
        delay = 0.0
        energy = 0.0
        for rec in self.records.values():
            if rec.finish_time is None:
                raise RuntimeError(f"task {rec.task.id} has not finished; call drain()")
            delay += rec.delay
            energy += rec.energy_offload + rec.energy_exec
        return delay, energy


def write_trace_csv(world: SimWorld, path) -> None:
    """One row per completed task."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "server", "offload_delay_s", "exec_delay_s",
                    "energy_offload_j", "energy_exec_j"])
        for tid in sorted(world.records):
            rec = world.records[tid]
            if rec.finish_time is None:
                continue
            w.writerow([tid, rec.server, repr(rec.offload_delay), repr(rec.exec_delay),
                        repr(rec.energy_offload), repr(rec.energy_exec)])
