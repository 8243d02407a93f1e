"""Discrete soft actor-critic over masked server-set networks.

One policy is trained across randomized contexts: every epoch builds
``n_envs`` environments, environment ``i`` gets preference ``i`` of the grid,
rolls out one episode, and is followed by ``n_updates`` SAC update rounds.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .momdp import (FEATURES, Context, ContextSpace, EncodedState, OffloadingEnv,
                    StateBatch, sample_context, scalarize)
from .nn import (Adam, NetworkSpec, ParamSet, ServerSetNet, forward_policy,
                 forward_q, load_checkpoint, save_checkpoint)
from .sim import SimConfig, SimWorld, balanced_mean_size

REPLAY_MAGIC = b"MECRPLY1"


def preference_grid(n: int) -> list[tuple[float, float]]:
    """``n`` evenly spaced convex preferences from ``(0, 1)`` to ``(1, 0)``."""
    if n < 2:
        raise ValueError("a preference grid needs at least two points")
    return [((i - 1) / (n - 1), 1 - (i - 1) / (n - 1)) for i in range(1, n + 1)]


@dataclass
class TrainerConfig:
    """Learner settings. Defaults are the paper's full-scale values."""

    n_epochs: int = 4000
    n_envs: int = 64
    n_updates: int = 10
    batch_size: int = 4096
    gamma: float = 0.95
    alpha_h: float = 0.05
    lr_policy: float = 1e-6
    lr_q: float = 1e-6
    lr_alpha: float = 0.0
    target_smoothing: float = 0.005
    target_entropy_ratio: float = 0.6
    buffer_capacity: int = 100_000
    e_max: int = 8
    n_bins: int = 30
    encoder_widths: tuple = (64, 64)
    trunk_widths: tuple = (128, 128)
    head_widths: tuple = (64,)
    activation: str = "relu"
    alpha_t: float = 0.1
    alpha_e: float = 1.0
    calibrate_alpha: bool = False
    calibration_episodes: int = 100

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.target_smoothing <= 1:
            raise ValueError("target_smoothing must lie in (0, 1]")
        if min(self.lr_policy, self.lr_q, self.lr_alpha) < 0:
            raise ValueError("learning rates must be nonnegative")

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(len(FEATURES) + self.n_bins, self.e_max, tuple(self.encoder_widths),
                           tuple(self.trunk_widths), tuple(self.head_widths), self.activation)


class Batch(NamedTuple):
    states: StateBatch
    actions: np.ndarray
    rewards: np.ndarray
    reward_delay: np.ndarray
    reward_energy: np.ndarray
    next_states: StateBatch
    dones: np.ndarray
    context_ids: np.ndarray


@dataclass
class Transition:
    state: EncodedState
    action: int
    reward: float
    vector_reward: tuple[float, float]
    next_state: EncodedState
    done: bool
    context_id: int = 0

    def __post_init__(self):
        if not self.state.valid_actions[self.action]:
            raise ValueError(f"action {self.action} is masked in its state")


class ReplayBuffer:
    """FIFO ring buffer with uniform sampling.

    Storage grows on demand up to ``capacity`` so small runs stay small.
    """

    def __init__(self, capacity: int, n_servers: int, n_features: int):
        self.capacity = int(capacity)
        self.n_servers = n_servers
        self.n_features = n_features
        self._alloc = 0
        self.size = 0
        self.pos = 0
        self._cols: dict[str, np.ndarray] = {}
        self._grow(min(1024, self.capacity))

    def _shapes(self):
        S, F = self.n_servers, self.n_features
        return {"servers": (S, F), "preference": (2,), "num_edges": (), "action": (),
                "reward": (), "reward_delay": (), "reward_energy": (),
                "next_servers": (S, F), "next_preference": (2,), "next_num_edges": (),
                "done": (), "context_id": ()}

    def _grow(self, n):
        n = min(n, self.capacity)
        for name, shape in self._shapes().items():
            new = np.zeros((n,) + shape)
            if name in self._cols:
                new[:self._alloc] = self._cols[name]
            self._cols[name] = new
        self._alloc = n

    def __len__(self):
        return self.size

    def add(self, t: Transition):
        if self.pos >= self._alloc and self._alloc < self.capacity:
            self._grow(2 * self._alloc)
        i = self.pos
        c = self._cols
        c["servers"][i] = t.state.servers
        c["preference"][i] = t.state.preference
        c["num_edges"][i] = t.state.num_edges
        c["action"][i] = t.action
        c["reward"][i] = t.reward
        c["reward_delay"][i], c["reward_energy"][i] = t.vector_reward
        c["next_servers"][i] = t.next_state.servers
        c["next_preference"][i] = t.next_state.preference
        c["next_num_edges"][i] = t.next_state.num_edges
        c["done"][i] = float(t.done)
        c["context_id"][i] = t.context_id
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _ordered_index(self) -> np.ndarray:
        """Storage rows from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.size) + self.pos) % self.capacity

    def get(self, idx) -> Batch:
        c = self._cols
        ne = c["num_edges"][idx].astype(np.int64)
        nne = c["next_num_edges"][idx].astype(np.int64)
        return Batch(StateBatch(c["servers"][idx], c["preference"][idx], ne),
                     c["action"][idx].astype(np.int64), c["reward"][idx],
                     c["reward_delay"][idx], c["reward_energy"][idx],
                     StateBatch(c["next_servers"][idx], c["next_preference"][idx], nne),
                     c["done"][idx], c["context_id"][idx].astype(np.int64))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.get(rng.integers(0, self.size, size=batch_size))

    def record_length(self) -> int:
        return sum(int(np.prod(s)) for s in self._shapes().values())

    def save(self, path):
        """Flat little-endian float64 records, oldest first, after a fixed header."""
        order = self._ordered_index()
        with open(path, "wb") as fh:
            fh.write(REPLAY_MAGIC)
            fh.write(struct.pack("<QQQQ", self.n_servers, self.n_features,
                                 self.record_length(), len(order)))
            rows = [self._cols[n][order].reshape(len(order), -1) for n in self._shapes()]
            fh.write(np.ascontiguousarray(np.concatenate(rows, axis=1), dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, capacity: Optional[int] = None) -> "ReplayBuffer":
        raw = open(path, "rb").read()
        if raw[:8] != REPLAY_MAGIC:
            raise ValueError(f"{path}: not a replay file")
        S, F, rec, n = struct.unpack("<QQQQ", raw[8:40])
        buf = cls(capacity or max(n, 1), int(S), int(F))
        if rec != buf.record_length():
            raise ValueError(f"{path}: record length {rec} does not match layout")
        data = np.frombuffer(raw[40:], dtype="<f8").reshape(n, rec)
        buf._grow(max(n, 1))
        off = 0
        for name, shape in buf._shapes().items():
            w = int(np.prod(shape))
            buf._cols[name][:n] = data[:, off:off + w].reshape((n,) + shape)
            off += w
        buf.size = int(n)
        buf.pos = int(n) % buf.capacity
        return buf


def _fwd(net, params, states: StateBatch):
    return net.forward(params, states.servers, states.preference, states.mask)


def soft_value(net, policy: ParamSet, target1: ParamSet, target2: ParamSet,
               states: StateBatch, alpha_h: float) -> np.ndarray:
    """Soft state value under the target critics, valid actions only."""
    mask = states.mask
    probs, logp, _, _ = forward_policy(net, policy, states.servers, states.preference, mask)
    q1, _ = forward_q(net, target1, states.servers, states.preference, mask)
    q2, _ = forward_q(net, target2, states.servers, states.preference, mask)
    qmin = np.where(mask, np.minimum(q1, q2), 0.0)
    return np.sum(probs * (qmin - alpha_h * logp), axis=1)


def q_target(net, policy, target1, target2, batch: Batch, gamma: float, alpha_h: float,
             rewards: Optional[np.ndarray] = None) -> np.ndarray:
    r = batch.rewards if rewards is None else rewards
    v = soft_value(net, policy, target1, target2, batch.next_states, alpha_h)
    return r + gamma * (1.0 - batch.dones) * v


def q_loss(net, params: ParamSet, batch: Batch, target: np.ndarray):
    """Half mean squared soft Bellman residual; returns ``(loss, grads, q_all)``."""
    q, trace = forward_q(net, params, batch.states.servers, batch.states.preference,
                         batch.states.mask)
    B = len(batch.actions)
    rows = np.arange(B)
    resid = q[rows, batch.actions] - target
    loss = 0.5 * float(np.mean(resid ** 2))
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = resid / B
    return loss, net.backward(params, trace, dq), q


def policy_loss(net, params: ParamSet, states: StateBatch, q1: np.ndarray, q2: np.ndarray,
                alpha_h: float):
    """``mean pi^T (alpha log pi - min(Q1, Q2))`` over valid actions.

    Returns ``(loss, grads, probs, log_probs)``.
    """
    mask = states.mask
    probs, logp, _, trace = forward_policy(net, params, states.servers, states.preference, mask)
    qmin = np.where(mask, np.minimum(q1, q2), 0.0)
    g = alpha_h * logp - qmin
    per = np.sum(probs * g, axis=1)
    B = len(per)
    dlogits = probs * (g - per[:, None]) / B
    return float(np.mean(per)), net.backward(params, trace, dlogits), probs, logp


def target_entropy(num_edges: np.ndarray, ratio: float) -> np.ndarray:
    return ratio * np.log(np.asarray(num_edges, dtype=float) + 1.0)


def temperature_loss(probs: np.ndarray, logp: np.ndarray, alpha_h: float,
                     target_ent: np.ndarray) -> tuple[float, float]:
    """``mean pi^T(-alpha (log pi + H_target))`` and its derivative in ``alpha``."""
    inner = np.sum(probs * -(logp + target_ent[:, None]), axis=1)
    return float(alpha_h * np.mean(inner)), float(np.mean(inner))


def soft_update(params: ParamSet, target: ParamSet, beta: float) -> ParamSet:
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    target.vector[:] = beta * params.vector + (1 - beta) * target.vector
    return target


class SACAgent:
    SETS = ("policy", "q1", "q2", "q1_target", "q2_target")

    def __init__(self, config: TrainerConfig, rng: np.random.Generator):
        self.config = config
        self.spec = config.network_spec()
        self.net = ServerSetNet(self.spec)
        self.params = {
            "policy": self.net.init_params(rng, zero_output=True),
            "q1": self.net.init_params(rng),
            "q2": self.net.init_params(rng),
        }
        self.params["q1_target"] = self.params["q1"].copy()
        self.params["q2_target"] = self.params["q2"].copy()
        self.alpha_h = config.alpha_h
        self.opt = {"policy": Adam(config.lr_policy), "q1": Adam(config.lr_q),
                    "q2": Adam(config.lr_q)}
        self.n_updates = 0

    def probabilities(self, states: StateBatch) -> np.ndarray:
        probs, _, _, _ = forward_policy(self.net, self.params["policy"], states.servers,
                                        states.preference, states.mask)
        return probs

    def sample_action(self, state: EncodedState, rng: np.random.Generator) -> int:
        p = self.probabilities(StateBatch.stack([state]))[0]
        a = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
        a = min(a, state.num_edges)
        while p[a] == 0.0:
            a -= 1
        return a

    def greedy(self, states: StateBatch) -> np.ndarray:
        return np.argmax(self.probabilities(states), axis=1)

    def update(self, batch: Batch) -> dict:
        cfg = self.config
        P = self.params
        y = q_target(self.net, P["policy"], P["q1_target"], P["q2_target"], batch,
                     cfg.gamma, self.alpha_h)
        l1, g1, q1 = q_loss(self.net, P["q1"], batch, y)
        l2, g2, q2 = q_loss(self.net, P["q2"], batch, y)
        lp, gp, probs, logp = policy_loss(self.net, P["policy"], batch.states, q1, q2, self.alpha_h)
        ent_target = target_entropy(batch.states.num_edges, cfg.target_entropy_ratio)
        la, ga = temperature_loss(probs, logp, self.alpha_h, ent_target)
        self.opt["q1"].step(P["q1"], g1)
        self.opt["q2"].step(P["q2"], g2)
        self.opt["policy"].step(P["policy"], gp)
        if cfg.lr_alpha > 0:
            self.alpha_h = max(self.alpha_h - cfg.lr_alpha * ga, 0.0)
        soft_update(P["q1"], P["q1_target"], cfg.target_smoothing)
        soft_update(P["q2"], P["q2_target"], cfg.target_smoothing)
        self.n_updates += 1
        return {"q1_loss": l1, "q2_loss": l2, "policy_loss": lp, "alpha_loss": la}

    def save(self, path, meta: Optional[dict] = None):
        m = {"alpha_h": self.alpha_h, "trainer": _jsonable(asdict(self.config))}
        m.update(meta or {})
        save_checkpoint(path, self.spec, self.params, m)

    @classmethod
    def load(cls, path, expected_spec: Optional[NetworkSpec] = None) -> "SACAgent":
        spec, sets, meta = load_checkpoint(path, expected_spec)
        tc = dict(meta["trainer"])
        for k in ("encoder_widths", "trunk_widths", "head_widths"):
            tc[k] = tuple(tc[k])
        agent = cls.__new__(cls)
        agent.config = TrainerConfig(**tc)
        agent.spec = spec
        agent.net = ServerSetNet(spec)
        agent.params = sets
        agent.alpha_h = meta["alpha_h"]
        agent.opt = {k: Adam(agent.config.lr_q) for k in ("policy", "q1", "q2")}
        agent.n_updates = 0
        agent.meta = meta
        return agent


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _context_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def calibrate_reward_scales(space: ContextSpace, sim_config: SimConfig, e_max: int,
                            n_bins: int, n_episodes: int, seed: int,
                            alpha_t: float = 0.1) -> tuple[float, float]:
    """Pick ``alpha_e`` so energy and delay rewards share a magnitude.

    Uniform-random policy over valid actions in random contexts; returns
    ``(alpha_t, alpha_t * mean|r_T| / mean|r_E|)``.
    """
    rng = np.random.default_rng([seed, 7])
    sum_t = sum_e = 0.0
    for k in range(n_episodes):
        ctx = sample_context(rng, space, k % len(space.preference_set))
        env = OffloadingEnv(ctx, sim_config, e_max, n_bins)
        env.reset(seed=[seed, 8, k])
        while not env.done:
            _, r, _, _ = env.step(int(rng.integers(ctx.num_edges + 1)))
            sum_t += abs(r.delay)
            sum_e += abs(r.energy)
    return alpha_t, alpha_t * sum_t / sum_e


@dataclass
class TrainResult:
    agent: SACAgent
    log: list
    alpha_t: float
    alpha_e: float


def train(config: TrainerConfig, space: ContextSpace, sim_config: SimConfig, seed: int,
          progress: Optional[Callable[[int, list], None]] = None) -> TrainResult:
    """Domain-randomized training loop; returns the agent and a per-episode log.

    Log rows: ``epoch, env, omega_t, omega_e, num_edges, scalar_reward,
    delay_total, energy_total`` with totals from the simulator (drained).
    """
    if space.max_edges > config.e_max:
        raise ValueError("context space exceeds the network's e_max")
    alpha_t, alpha_e = config.alpha_t, config.alpha_e
    if config.calibrate_alpha:
        alpha_t, alpha_e = calibrate_reward_scales(space, sim_config, config.e_max,
                                                   config.n_bins, config.calibration_episodes,
                                                   seed, config.alpha_t)
    ss_init, ss_ctx, ss_ep, ss_act, ss_rep = np.random.SeedSequence(seed).spawn(5)
    agent = SACAgent(config, np.random.default_rng(ss_init))
    ctx_rng = np.random.default_rng(ss_ctx)
    act_rng = np.random.default_rng(ss_act)
    rep_rng = np.random.default_rng(ss_rep)
    ep_seeds = np.random.default_rng(ss_ep)
    buffer = ReplayBuffer(config.buffer_capacity, config.e_max + 1,
                          len(FEATURES) + config.n_bins)
    n_pref = len(space.preference_set)
    log = []
    for epoch in range(config.n_epochs):
        for i in range(config.n_envs):
            ctx = sample_context(ctx_rng, space, i % n_pref)
            env = OffloadingEnv(ctx, sim_config, config.e_max, config.n_bins, alpha_t, alpha_e)
            state = env.reset(seed=int(ep_seeds.integers(2 ** 63)))
            ret = 0.0
            while not env.done:
                a = agent.sample_action(state, act_rng)
                nxt, r, done, info = env.step(a)
                buffer.add(Transition(state, a, info["scalar"], tuple(r), nxt, done, i))
                ret += info["scalar"]
                state = nxt
            delay, energy = env.totals()
            log.append({"epoch": epoch, "env": i, "omega_t": ctx.preference[0],
                        "omega_e": ctx.preference[1], "num_edges": ctx.num_edges,
                        "scalar_reward": ret, "delay_total": delay, "energy_total": energy})
            if len(buffer) >= config.batch_size:
                for _ in range(config.n_updates):
                    agent.update(buffer.sample(config.batch_size, rep_rng))
        if progress is not None:
            progress(epoch, log)
    return TrainResult(agent, log, alpha_t, alpha_e)


LOG_FIELDS = ("epoch", "env", "omega_t", "omega_e", "num_edges", "scalar_reward",
              "delay_total", "energy_total")


def write_training_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS])


def epoch_curve(rows, smooth: int = 20) -> dict:
    """Per-epoch means of reward, delay and energy plus a trailing moving average."""
    epochs = sorted({r["epoch"] for r in rows})
    out = {"epoch": np.array(epochs)}
    for key in ("scalar_reward", "delay_total", "energy_total"):
        acc = {}
        for r in rows:
            acc.setdefault(r["epoch"], []).append(r[key])
        vals = np.array([np.mean(acc[e]) for e in epochs])
        out[key] = vals
        out[key + "_smooth"] = moving_average(vals, smooth)
    return out


def moving_average(x: np.ndarray, w: int) -> np.ndarray:
    c = np.cumsum(np.insert(np.asarray(x, float), 0, 0.0))
    out = np.empty(len(x))
    for i in range(len(x)):
        lo = max(0, i + 1 - w)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


@dataclass
class EvalResult:
    delay: float
    energy: float
    mean_size_bits: float
    delays: list = field(default_factory=list)
    energies: list = field(default_factory=list)

    @property
    def delay_per_mbit(self) -> float:
        return self.delay / (self.mean_size_bits / 1e6)

    @property
    def energy_per_mbit(self) -> float:
        return self.energy / (self.mean_size_bits / 1e6)


def episode_seed(seed: int, k: int) -> list:
    return [int(seed), 1009, int(k)]


def run_policy_episodes(select: Callable[[StateBatch], np.ndarray], context: Context,
                        sim_config: SimConfig, e_max: int, n_bins: int,
                        num_episodes: int, seed: int) -> EvalResult:
    """Run episodes in lockstep, choosing actions for all live ones at once."""
    if context.num_edges > e_max:
        raise ValueError(f"context has {context.num_edges} edges but the policy supports {e_max}")
    envs = [OffloadingEnv(context, sim_config, e_max, n_bins) for _ in range(num_episodes)]
    states = [env.reset(seed=episode_seed(seed, k)) for k, env in enumerate(envs)]
    live = [k for k, env in enumerate(envs) if not env.done]
    while live:
        actions = select(StateBatch.stack([states[k] for k in live]))
        for k, a in zip(live, actions):
            states[k], _, _, _ = envs[k].step(int(a))
        live = [k for k in live if not envs[k].done]
    totals = [env.totals() for env in envs]
    d = [t[0] for t in totals]
    e = [t[1] for t in totals]
    return EvalResult(float(np.mean(d)), float(np.mean(e)), envs[0].world.mean_size, d, e)


def run_world_episodes(choose: Callable[[SimWorld, int], int], context: Context,
                       sim_config: SimConfig, num_episodes: int, seed: int) -> EvalResult:
    """Run state-free schedulers directly on the simulator (no encoding, no rewards)."""
    d, e = [], []
    mean = None
    for k in range(num_episodes):
        w = SimWorld(sim_config, context.freqs, np.random.default_rng(episode_seed(seed, k)))
        mean = w.mean_size
        while not w.done:
            if w.current_task is not None:
                w.dispatch(choose(w, w.step_index))
            w.end_step()
        w.drain()
        dt, et = w.totals()
        d.append(dt)
        e.append(et)
    return EvalResult(float(np.mean(d)), float(np.mean(e)), mean, d, e)


def evaluate(agent: SACAgent, context: Context, sim_config: SimConfig,
             num_episodes: int, seed: int) -> EvalResult:
    """Greedy evaluation with simulator-truth episode totals."""
    if context.num_edges > agent.spec.e_max:
        raise ValueError(f"context has {context.num_edges} edges, policy supports {agent.spec.e_max}")
    return run_policy_episodes(agent.greedy, context, sim_config, agent.spec.e_max,
                               agent.config.n_bins, num_episodes, seed)
