"""Self-check suites: each compares an implementation against an independent route."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .momdp import (Context, ContextSpace, OffloadingEnv, StateBatch, delay_reward_closed_form,
                    delay_reward_oracle, delay_reward_terms, sample_context)
from .nn import PSI, NetworkSpec, ServerSetNet, forward_policy, forward_q
from .pareto import PerfPoint, hypervolume, pareto_front
from .sac import Batch, policy_loss, q_loss, temperature_loss
from .sim import Executor, SimConfig, balanced_mean_size


@dataclass
class CheckResult:
    name: str
    passed: bool
    count: int
    detail: str = ""
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        out = f"[{tag}] {self.name}: {self.count} cases, {self.detail} ({self.seconds:.2f}s)"
        for f in self.failures[:5]:
            out += f"\n    replay: {f}"
        return out


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ----------------------------------------------------------------- delay reward

def random_executor(rng: np.random.Generator, max_tasks: int = 50):
    """Server with a random resident set, frequency drawn from the test ranges."""
    cloud = rng.random() < 0.3
    f = rng.uniform(3e9, 5e9) if cloud else rng.uniform(1.5e9, 2.5e9)
    ex = Executor(0, f, 1e3, clock=float(rng.uniform(0, 100)))
    n = int(rng.integers(0, max_tasks + 1))
    for i in range(n):
        ex.admit(i + 1, float(rng.uniform(1e5, 1e8)), ex.clock)
    size = float(rng.uniform(1e5, 1e8))
    scale = rng.choice([0.0, 1.0, 200.0])
    t_off = float(rng.uniform(0, scale)) if scale else 0.0
    return ex, size, t_off


def mutated_closed_form(scale: float) -> Callable:
    """Closed form with the upload-overlap correction scaled (for mutation tests)."""
    def fn(residuals, size, t_off, freq, eta):
        t, no_action, during, after = delay_reward_terms(residuals, size, t_off, freq, eta)
        return -t + no_action - scale * during - after
    return fn


@_timed
def check_delay_oracle(n: int = 1000, seed: int = 0, tol: float = 1e-9,
                       closed_form: Callable = delay_reward_closed_form) -> CheckResult:
    """Closed-form delay reward against the event-driven executor."""
    worst = 0.0
    failures = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        ex, size, t_off = random_executor(rng)
        ref = delay_reward_oracle(ex, size, t_off)
        got = closed_form(ex.residuals(), size, t_off, ex.freq, ex.eta)
        err = abs(got - ref) / max(abs(ref), 1e-300)
        worst = max(worst, err)
        if not err < tol:
            failures.append(f"seed=[{seed}, {k}] rel_err={err:.3e}")
    return CheckResult("delay-reward oracle", not failures, n, f"max rel err {worst:.2e}", failures)


# ----------------------------------------------------------------- energy identity

@_timed
def check_energy_identity(n_episodes: int = 100, seed: int = 0, num_steps: int = 20) -> CheckResult:
    """Summed energy rewards equal minus the simulator's total energy, bit for bit."""
    sim = SimConfig(num_steps=num_steps)
    space = ContextSpace.testing([(0.5, 0.5)], max_edges=10)
    failures = []
    for k in range(n_episodes):
        rng = np.random.default_rng([seed, 2, k])
        ctx = sample_context(rng, space, 0)
        env = OffloadingEnv(ctx, sim, 10)
        env.reset(seed=[seed, 3, k])
        acc = 0.0
        while not env.done:
            _, r, _, _ = env.step(int(rng.integers(ctx.num_edges + 1)))
            acc += r.energy
        _, energy = env.totals()
        if acc != -energy:
            failures.append(f"episode seed=[{seed}, 3, {k}] sum_r={acc!r} total={energy!r}")
    return CheckResult("energy identity", not failures, n_episodes, "exact equality", failures)


@_timed
def check_balance() -> CheckResult:
    got = balanced_mean_size(1.0, [4e9] + [2e9] * 6, 1e3, 0.1, 10)
    ok = math.isclose(got, 16e6, rel_tol=1e-12)
    return CheckResult("balanced task size", ok, 1, f"E=6 gives {got / 1e6:.6f} Mbit",
                       [] if ok else [f"got {got}"])


# ----------------------------------------------------------------- gradients

def _random_batch(rng, spec: NetworkSpec, B: int):
    S = spec.e_max + 1
    ne = rng.integers(1, spec.e_max + 1, size=B)
    mask = np.arange(S)[None, :] <= ne[:, None]
    x = rng.normal(size=(B, S, spec.per_server_input_dim))
    x[~mask] = -1.0
    pref = rng.random(B)
    pref = np.stack([pref, 1 - pref], axis=1)
    return StateBatch(x, pref, ne)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else 0.0


def _fd(fn, vec: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(vec)
    for i in range(vec.size):
        old = vec[i]
        vec[i] = old + h
        a = fn()
        vec[i] = old - h
        b = fn()
        vec[i] = old
        g[i] = (a - b) / (2 * h)
    return g


def gradient_errors(seed: int) -> dict:
    """Relative errors of the three loss gradients on a small random net."""
    rng = np.random.default_rng([seed, 5])
    act = ("relu", "tanh")[seed % 2]
    spec = NetworkSpec(6, 3, (5, 4), (6,), (5,), act)
    net = ServerSetNet(spec)
    states = _random_batch(rng, spec, 6)
    nxt = _random_batch(rng, spec, 6)
    B = len(states)
    actions = np.array([rng.integers(0, n + 1) for n in states.num_edges])

    pp = net.init_params(rng)
    pp.vector += rng.normal(scale=0.1, size=pp.vector.size)  # move biases off relu kinks
    qp = net.init_params(rng)
    qp.vector += rng.normal(scale=0.1, size=qp.vector.size)
    q1 = np.where(states.mask, rng.normal(size=(B, 4)), PSI)
    q2 = np.where(states.mask, rng.normal(size=(B, 4)), PSI)
    alpha = float(rng.uniform(0.01, 1.0))

    _, g, _, _ = policy_loss(net, pp, states, q1, q2, alpha)
    num = _fd(lambda: policy_loss(net, pp, states, q1, q2, alpha)[0], pp.vector)
    e_pi = _rel_err(num, g.vector)

    batch = Batch(states, actions, rng.normal(size=B), np.zeros(B), np.zeros(B), nxt,
                  np.zeros(B), np.zeros(B, dtype=int))
    y = rng.normal(size=B)
    _, gq, _ = q_loss(net, qp, batch, y)
    numq = _fd(lambda: q_loss(net, qp, batch, y)[0], qp.vector)
    e_q = _rel_err(numq, gq.vector)

    probs, logp, _, _ = forward_policy(net, pp, states.servers, states.preference, states.mask)
    target = 0.6 * np.log(states.num_edges + 1.0)
    _, ga = temperature_loss(probs, logp, alpha, target)
    h = 1e-6
    na = (temperature_loss(probs, logp, alpha + h, target)[0]
          - temperature_loss(probs, logp, alpha - h, target)[0]) / (2 * h)
    e_a = abs(na - ga) / max(abs(na) + abs(ga), 1e-12)
    return {"policy": e_pi, "q": e_q, "alpha": e_a}


@_timed
def check_gradients(n_seeds: int = 20, tol: float = 1e-4) -> CheckResult:
    worst = {"policy": 0.0, "q": 0.0, "alpha": 0.0}
    failures = []
    for s in range(n_seeds):
        errs = gradient_errors(s)
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
            if not v < tol:
                failures.append(f"seed={s} loss={k} rel_err={v:.3e}")
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult("loss gradients", not failures, n_seeds, "max rel err " + detail, failures)


# ----------------------------------------------------------------- masks and padding

@_timed
def check_masks(n_states: int = 10_000, e_max: int = 8, seed: int = 0) -> CheckResult:
    """Dummy slots get zero probability and all -1 encodings, for every E."""
    spec = NetworkSpec(35, e_max, (16,), (16,), (8,))
    net = ServerSetNet(spec)
    rng = np.random.default_rng([seed, 9])
    params = net.init_params(rng)
    params.vector += rng.normal(scale=0.5, size=params.vector.size)
    sim = SimConfig(num_steps=50)
    states = []
    k = 0
    while len(states) < n_states:
        E = 1 + k % e_max
        ctx = Context(tuple(rng.dirichlet([1, 1])), E,
                      tuple(rng.uniform(1.5e9, 5e9, size=E + 1)))
        env = OffloadingEnv(ctx, sim, e_max)
        s = env.reset(seed=[seed, 10, k])
        while not env.done and len(states) < n_states:
            states.append(s)
            s, _, _, _ = env.step(int(rng.integers(E + 1)))
        k += 1
    failures = []
    for lo in range(0, n_states, 1000):
        chunk = states[lo:lo + 1000]
        b = StateBatch.stack(chunk)
        probs, _, _, _ = forward_policy(net, params, b.servers, b.preference, b.mask)
        q, _ = forward_q(net, params, b.servers, b.preference, b.mask)
        dummy = ~b.mask
        if np.any(probs[dummy] != 0.0):
            failures.append(f"chunk {lo}: nonzero dummy probability")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-12:
            failures.append(f"chunk {lo}: probabilities do not sum to 1")
        if np.any(b.servers[dummy] != -1.0):
            failures.append(f"chunk {lo}: dummy server row not all -1")
        if np.any(q[dummy] != PSI):
            failures.append(f"chunk {lo}: dummy Q not masked")
    return CheckResult("action mask and padding", not failures, n_states,
                       f"E in 1..{e_max}", failures)


# ----------------------------------------------------------------- hypervolume

def monte_carlo_hv(front, ref: PerfPoint, n: int, rng) -> tuple[float, float]:
    """Estimate and standard error of the dominated area by uniform sampling."""
    lo_d = min(p.delay for p in front)
    lo_e = min(p.energy for p in front)
    box = (ref.delay - lo_d) * (ref.energy - lo_e)
    pts = np.array([(p.delay, p.energy) for p in front])
    xs = rng.uniform(lo_d, ref.delay, n)
    ys = rng.uniform(lo_e, ref.energy, n)
    hit = np.zeros(n, dtype=bool)
    for d, e in pts:
        hit |= (xs >= d) & (ys >= e)
    p = hit.mean()
    return box * p, box * math.sqrt(p * (1 - p) / n)


@_timed
def check_hypervolume(n_fronts: int = 50, n_samples: int = 1_000_000, seed: int = 0) -> CheckResult:
    failures = []
    canon = [PerfPoint(1, 3), PerfPoint(2, 2), PerfPoint(3, 1)]
    hv = hypervolume(canon, PerfPoint(4, 4))
    if hv != 6.0:
        failures.append(f"canonical front gave {hv}")
    worst = 0.0
    for k in range(n_fronts):
        rng = np.random.default_rng([seed, 11, k])
        m = int(rng.integers(1, 12))
        pts = [PerfPoint(float(a), float(b)) for a, b in rng.uniform(0, 10, size=(m, 2))]
        front = pareto_front(pts)
        ref = PerfPoint(10.0 + rng.uniform(0, 2), 10.0 + rng.uniform(0, 2))
        exact = hypervolume(front, ref)
        est, se = monte_carlo_hv(front, ref, n_samples, rng)
        z = abs(exact - est) / se if se > 0 else 0.0
        worst = max(worst, z)
        if z > 3.0:
            failures.append(f"front seed=[{seed}, 11, {k}] z={z:.2f}")
    return CheckResult("hypervolume sweep vs Monte Carlo", not failures, n_fronts + 1,
                       f"max |z| {worst:.2f}", failures)


SUITES = {
    "delay-oracle": check_delay_oracle,
    "energy-identity": check_energy_identity,
    "balance": check_balance,
    "gradients": check_gradients,
    "masks": check_masks,
    "hypervolume": check_hypervolume,
}


def run_all(seed: int = 0, quick: bool = False, only: Optional[list] = None) -> list[CheckResult]:
    out = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        if name in ("balance", "gradients"):
            res = fn() if not quick or name == "balance" else fn(n_seeds=4)
        elif quick:
            small = {"delay-oracle": {"n": 200}, "energy-identity": {"n_episodes": 10},
                     "masks": {"n_states": 1000}, "hypervolume": {"n_fronts": 5, "n_samples": 100_000}}
            res = fn(seed=seed, **small[name])
        else:
            res = fn(seed=seed)
        out.append(res)
    return out
