from dataclasses import replace

import numpy as np
import pytest

from mecmorl.momdp import Context, ContextSpace, EncodedState, StateBatch
from mecmorl.nn import PSI, NetworkSpec, ServerSetNet, forward_policy
from mecmorl.sac import (Adam, Batch, ReplayBuffer, SACAgent, TrainerConfig, Transition,
                         epoch_curve, evaluate, policy_loss, preference_grid, q_loss, q_target,
                         soft_update, target_entropy, temperature_loss, train, write_training_log)
from mecmorl.sim import SimConfig


def _state(rng, S=3, F=4, num_edges=None):
    ne = int(rng.integers(1, S)) if num_edges is None else num_edges
    x = rng.normal(size=(S, F))
    x[ne + 1:] = -1.0
    w = rng.random()
    return EncodedState(x, np.array([w, 1 - w]), ne)


def _transition(rng, reward=0.0, S=3, F=4):
    s = _state(rng, S, F)
    return Transition(s, int(rng.integers(0, s.num_edges + 1)), reward, (reward, 0.0),
                      _state(rng, S, F), False, 0)


class TestPreferenceGrid:
    def test_three(self):
        assert preference_grid(3) == [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]

    def test_spacing(self):
        g = preference_grid(101)
        assert np.allclose(np.diff([w[0] for w in g]), 0.01)
        assert all(abs(sum(w) - 1) < 1e-15 for w in g)

    def test_too_small(self):
        with pytest.raises(ValueError):
            preference_grid(1)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        rng = np.random.default_rng(0)
        buf = ReplayBuffer(5, 3, 4)
        for k in range(8):
            buf.add(_transition(rng, reward=float(k)))
        assert len(buf) == 5
        kept = sorted(buf.get(np.arange(5)).rewards)
        assert kept == [3.0, 4.0, 5.0, 6.0, 7.0]

    def test_seeded_sampling(self):
        rng = np.random.default_rng(0)
        buf = ReplayBuffer(100, 3, 4)
        for k in range(50):
            buf.add(_transition(rng, reward=float(k)))
        a = buf.sample(16, np.random.default_rng(9)).rewards
        b = buf.sample(16, np.random.default_rng(9)).rewards
        assert np.array_equal(a, b)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        buf = ReplayBuffer(6, 3, 4)
        for k in range(9):
            buf.add(_transition(rng, reward=float(k)))
        path = tmp_path / "replay.bin"
        buf.save(path)
        back = ReplayBuffer.load(path, capacity=6)
        assert len(back) == 6
        a = buf.get(buf._ordered_index())
        b = back.get(np.arange(6))
        for x, y in zip(a, b):
            if isinstance(x, StateBatch):
                assert np.array_equal(x.servers, y.servers)
                assert np.array_equal(x.num_edges, y.num_edges)
            else:
                assert np.array_equal(x, y)
        raw = path.read_bytes()
        assert (len(raw) - 40) % (8 * buf.record_length()) == 0

    def test_rejects_masked_action(self):
        rng = np.random.default_rng(0)
        s = _state(rng, num_edges=1)
        with pytest.raises(ValueError):
            Transition(s, 2, 0.0, (0.0, 0.0), s, False)


def _setup(seed=0, B=8, gamma=0.9):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(4, 2, (6,), (6,), (4,), "tanh")
    net = ServerSetNet(spec)
    params = {k: net.init_params(rng) for k in ("policy", "q1", "q2")}
    params["policy"].vector += rng.normal(scale=0.3, size=params["policy"].vector.size)
    params["t1"] = params["q1"].copy()
    params["t2"] = params["q2"].copy()
    trs = [_transition(rng, reward=float(rng.normal())) for _ in range(B)]
    buf = ReplayBuffer(B, 3, 4)
    for t in trs:
        buf.add(t)
    return net, params, buf.get(np.arange(B)), rng


class TestQLoss:
    def test_gamma_zero_target_is_reward(self):
        net, P, batch, _ = _setup()
        y = q_target(net, P["policy"], P["t1"], P["t2"], batch, 0.0, 0.05)
        assert np.array_equal(y, batch.rewards)

    def test_done_drops_bootstrap(self):
        net, P, batch, _ = _setup()
        batch = batch._replace(dones=np.ones_like(batch.dones))
        y = q_target(net, P["policy"], P["t1"], P["t2"], batch, 0.95, 0.05)
        assert np.array_equal(y, batch.rewards)

    def test_fixed_point_single_action(self):
        # one valid action, self loop, reward r: Q* = r / (1 - gamma)
        gamma, r = 0.5, 1.0
        spec = NetworkSpec(4, 1, (4,), (4,), (), "tanh")
        net = ServerSetNet(spec)
        rng = np.random.default_rng(0)
        q = net.init_params(rng)
        x = np.full((1, 2, 4), -1.0)
        x[0, 0] = rng.normal(size=4)
        s = StateBatch(x, np.array([[0.5, 0.5]]), np.array([0]))
        batch = Batch(s, np.array([0]), np.array([r]), np.zeros(1), np.zeros(1), s,
                      np.zeros(1), np.zeros(1, dtype=int))
        pol = net.init_params(rng)
        at_fp = q.copy()
        at_fp["out.W"][...] = 0.0
        at_fp["out.b"][...] = r / (1 - gamma)
        y = q_target(net, pol, at_fp, at_fp, batch, gamma, 0.05)
        assert q_loss(net, at_fp, batch, y)[0] == pytest.approx(0.0, abs=1e-24)
        opt = Adam(1e-2)
        target = q.copy()
        for _ in range(3000):
            y = q_target(net, pol, target, target, batch, gamma, 0.05)
            _, g, _ = q_loss(net, q, batch, y)
            opt.step(q, g)
            soft_update(q, target, 0.2)
        val = net.forward(q, s.servers, s.preference, s.mask)[0][0, 0]
        assert val == pytest.approx(r / (1 - gamma), rel=1e-3)

    def test_descent_on_fixed_batch(self):
        net, P, batch, _ = _setup(B=16)
        y = q_target(net, P["policy"], P["t1"], P["t2"], batch, 0.9, 0.05)
        q = P["q1"]
        losses = []
        for _ in range(50):
            loss, g, _ = q_loss(net, q, batch, y)
            losses.append(loss)
            q.vector -= 1e-2 * g.vector
        assert np.all(np.diff(losses) < 0)


class TestPolicyLoss:
    def test_uniform_q_uniform_policy_is_stationary(self):
        net, P, batch, rng = _setup()
        pol = P["policy"]
        pol["out.W"][...] = 0.0
        pol["out.b"][...] = 0.0
        q = np.where(batch.states.mask, 2.0, PSI)
        loss0, g, probs, _ = policy_loss(net, pol, batch.states, q, q, 0.1)
        assert np.max(np.abs(g.vector)) < 1e-14
        other = pol.copy()
        other.vector += rng.normal(scale=0.5, size=other.vector.size)
        assert policy_loss(net, other, batch.states, q, q, 0.1)[0] > loss0

    def test_small_alpha_concentrates_on_argmax(self):
        net, P, batch, rng = _setup(B=6)
        q = np.where(batch.states.mask, rng.normal(size=batch.states.mask.shape), PSI)
        pol = P["policy"]
        opt = Adam(0.05)
        for _ in range(400):
            _, g, _, _ = policy_loss(net, pol, batch.states, q, q, 1e-3)
            opt.step(pol, g)
        probs, _, _, _ = forward_policy(net, pol, batch.states.servers, batch.states.preference,
                                        batch.states.mask)
        best = np.argmax(q, axis=1)
        assert np.all(probs[np.arange(len(best)), best] > 0.9)

    def test_mixed_gradient_is_convex_combination(self):
        net, P, batch, rng = _setup()
        mask = batch.states.mask
        q_t = np.where(mask, rng.normal(size=mask.shape), PSI)
        q_e = np.where(mask, rng.normal(size=mask.shape), PSI)
        w_t, w_e = 0.3, 0.7
        q_mix = np.where(mask, w_t * q_t + w_e * q_e, PSI)
        _, g_mix, _, _ = policy_loss(net, P["policy"], batch.states, q_mix, q_mix, 0.05)
        _, g_t, _, _ = policy_loss(net, P["policy"], batch.states, q_t, q_t, 0.05)
        _, g_e, _, _ = policy_loss(net, P["policy"], batch.states, q_e, q_e, 0.05)
        assert np.allclose(g_mix.vector, w_t * g_t.vector + w_e * g_e.vector, rtol=0, atol=1e-8)

    def test_dummy_actions_excluded(self):
        net, P, batch, rng = _setup()
        mask = batch.states.mask
        q = np.where(mask, rng.normal(size=mask.shape), PSI)
        q2 = q.copy()
        q2[~mask] = 12345.0  # whatever sits in dummy slots must not matter
        a = policy_loss(net, P["policy"], batch.states, q, q, 0.05)
        b = policy_loss(net, P["policy"], batch.states, q2, q2, 0.05)
        assert a[0] == b[0]
        assert np.array_equal(a[1].vector, b[1].vector)


class TestTemperature:
    def test_stationary_at_target(self):
        probs = np.array([[0.5, 0.5, 0.0]])
        logp = np.array([[np.log(0.5), np.log(0.5), 0.0]])
        _, g = temperature_loss(probs, logp, 0.05, np.array([np.log(2.0)]))
        assert g == pytest.approx(0.0, abs=1e-15)

    def test_low_entropy_raises_alpha(self):
        probs = np.array([[0.99, 0.01]])
        logp = np.log(probs)
        _, g = temperature_loss(probs, logp, 0.05, target_entropy(np.array([1]), 0.6))
        assert g < 0  # alpha <- alpha - lr * g grows

    def test_zero_lr_keeps_alpha(self):
        cfg = TrainerConfig(e_max=2, n_bins=4, encoder_widths=(4,), trunk_widths=(4,),
                            head_widths=(), batch_size=4, lr_alpha=0.0)
        agent = SACAgent(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        buf = ReplayBuffer(10, 3, 9)
        for _ in range(6):
            buf.add(_transition(rng, S=3, F=9))
        for _ in range(3):
            agent.update(buf.sample(4, rng))
        assert agent.alpha_h == 0.05


class TestSoftUpdate:
    def _ps(self, v):
        from mecmorl.nn import ParamSet
        return ParamSet({"w": (1,)}, np.array([float(v)]))

    def test_beta_one_copies(self):
        t = soft_update(self._ps(2.0), self._ps(0.0), 1.0)
        assert t.vector[0] == 2.0

    def test_half(self):
        assert soft_update(self._ps(2.0), self._ps(0.0), 0.5).vector[0] == 1.0

    def test_geometric_convergence(self):
        p, t = self._ps(1.0), self._ps(0.0)
        gaps = []
        for _ in range(20):
            soft_update(p, t, 0.3)
            gaps.append(1.0 - t.vector[0])
        assert np.allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.7)

    def test_invalid_beta(self):
        with pytest.raises(ValueError):
            soft_update(self._ps(0), self._ps(0), 0.0)


TINY = TrainerConfig(n_epochs=3, n_envs=2, n_updates=2, batch_size=16, e_max=2, n_bins=6,
                     encoder_widths=(8,), trunk_widths=(8,), head_widths=(4,),
                     lr_policy=1e-3, lr_q=1e-3, buffer_capacity=200)


class TestTrainLoop:
    def test_deterministic_log_and_params(self, tmp_path):
        space = ContextSpace.training(preference_grid(2), max_edges=2)
        sim = SimConfig(num_steps=8)
        a = train(TINY, space, sim, seed=4)
        b = train(TINY, space, sim, seed=4)
        write_training_log(a.log, tmp_path / "a.csv")
        write_training_log(b.log, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert np.array_equal(a.agent.params["policy"].vector, b.agent.params["policy"].vector)
        assert len(a.log) == 6
        assert a.agent.n_updates > 0

    def test_env_preferences_follow_grid(self):
        space = ContextSpace.training(preference_grid(2), max_edges=2)
        res = train(TINY, space, SimConfig(num_steps=5), seed=0)
        assert [r["omega_t"] for r in res.log[:2]] == [0.0, 1.0]

    def test_singleton_space_fixed_context(self):
        ctx = Context.fixed(2, 4e9, 2e9, (0.5, 0.5))
        res = train(replace(TINY, n_envs=1), ContextSpace.singleton(ctx), SimConfig(num_steps=5), 0)
        assert {r["num_edges"] for r in res.log} == {2}

    def test_space_larger_than_network(self):
        with pytest.raises(ValueError):
            train(TINY, ContextSpace.training(preference_grid(2), max_edges=3), SimConfig(), 0)

    def test_epoch_curve(self):
        rows = [{"epoch": e, "scalar_reward": float(e), "delay_total": 1.0, "energy_total": 2.0}
                for e in range(10) for _ in range(2)]
        cur = epoch_curve(rows, smooth=3)
        assert list(cur["scalar_reward"]) == list(range(10))
        assert cur["scalar_reward_smooth"][-1] == pytest.approx(8.0)


class TestEvaluate:
    def test_smoke_and_truth_totals(self):
        agent = SACAgent(TINY, np.random.default_rng(0))
        sim = SimConfig(num_steps=10)
        r = evaluate(agent, Context.fixed(2, 4e9, 2e9), sim, 3, seed=1)
        assert np.isfinite(r.delay) and np.isfinite(r.energy)
        assert r.energy_per_mbit == pytest.approx(r.energy / (r.mean_size_bits / 1e6))
        assert len(r.delays) == 3

    def test_common_random_numbers(self):
        agent = SACAgent(TINY, np.random.default_rng(0))
        sim = SimConfig(num_steps=10)
        ctx = Context.fixed(2, 4e9, 2e9)
        assert evaluate(agent, ctx, sim, 4, 7).delays == evaluate(agent, ctx, sim, 4, 7).delays

    def test_too_many_edges(self):
        agent = SACAgent(TINY, np.random.default_rng(0))
        with pytest.raises(ValueError):
            evaluate(agent, Context.fixed(3, 4e9, 2e9), SimConfig(num_steps=5), 1, 0)

    def test_checkpoint_round_trip(self, tmp_path):
        agent = SACAgent(TINY, np.random.default_rng(0))
        agent.save(tmp_path / "a.ckpt")
        back = SACAgent.load(tmp_path / "a.ckpt")
        assert back.config == agent.config
        ctx = Context.fixed(2, 4e9, 2e9)
        sim = SimConfig(num_steps=6)
        assert evaluate(agent, ctx, sim, 2, 0).delays == evaluate(back, ctx, sim, 2, 0).delays
