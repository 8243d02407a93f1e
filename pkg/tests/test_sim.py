import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mecmorl.sim import (ChannelModel, EnergyModel, Executor, SimConfig, SimWorld,
                         balanced_mean_size, data_rate, draw_task_sizes, offload_delay,
                         task_energy, write_trace_csv)


class TestBalancedMeanSize:
    def test_operating_point_sixteen_mbit(self):
        assert balanced_mean_size(1.0, [4e9] + [2e9] * 6, 1e3, 0.1, 10) == pytest.approx(16e6, rel=1e-12)

    def test_unit_factors(self):
        assert balanced_mean_size(1.0, [1e3], 1e3, 1.0, 1) == pytest.approx(1.0)

    def test_five_edges(self):
        assert balanced_mean_size(1.0, [4e9] + [2e9] * 5, 1e3, 0.1, 10) == pytest.approx(14e6, rel=1e-12)

    @pytest.mark.parametrize("args", [(0, [1e9], 1e3, 0.1, 10), (1, [1e9], -1, 0.1, 10),
                                      (1, [1e9], 1e3, 0.0, 10), (1, [0.0], 1e3, 0.1, 10)])
    def test_nonpositive_rejected(self, args):
        with pytest.raises(ValueError):
            balanced_mean_size(*args)


class TestTaskSizes:
    def test_sample_mean(self):
        x = draw_task_sizes(np.random.default_rng(3), 16e6, 10000)
        assert abs(np.mean(x) / 16e6 - 1) < 0.03

    def test_empty(self):
        assert draw_task_sizes(np.random.default_rng(0), 5.0, 0) == []

    def test_deterministic(self):
        a = draw_task_sizes(np.random.default_rng(7), 1e6, 50)
        b = draw_task_sizes(np.random.default_rng(7), 1e6, 50)
        assert a == b


def _channel(**kw):
    d = dict(bandwidth_hz=16.6e6, offload_power_w=1.0, noise_power_w=1.0,
             distance_m=np.ones((2, 2)))
    d.update(kw)
    return ChannelModel(**d)


class TestRateAndDelay:
    def test_unit_snr(self):
        assert data_rate(_channel(), 1, 0, 1.0, 0.0) == pytest.approx(16.6e6)

    def test_zero_gain(self):
        assert data_rate(_channel(), 1, 0, 0.0, 0.0) == 0.0

    def test_snr_three(self):
        assert data_rate(_channel(), 1, 0, 3.0, 0.0) == pytest.approx(33.2e6)

    def test_interference_lowers_rate(self):
        ch = _channel(interference_enabled=True)
        assert data_rate(ch, 1, 0, 3.0, 1.0) < data_rate(ch, 1, 0, 3.0, 0.0)

    def test_interference_excludes_own_user(self):
        ch = _channel(interference_enabled=True, distance_m=np.ones((3, 2)))
        g = np.array([[5.0, 1.0], [2.0, 1.0], [3.0, 1.0]])
        assert ch.interference(g, 1, 0) == pytest.approx(1.0 * (2.0 + 3.0))

    def test_offload_delay(self):
        assert offload_delay(16.6e6, 16.6e6) == 1.0
        assert offload_delay(0.0, 5.0) == 0.0
        assert offload_delay(8e6, 16e6) == 0.5

    def test_unreachable(self):
        with pytest.raises(ValueError):
            offload_delay(1.0, 0.0)


class TestEnergy:
    def test_exec_energy(self):
        _, e = task_energy(16e6, 0.0, EnergyModel(1e3, 5e-31, 10e-3), 2e9)
        assert e == pytest.approx(0.032, rel=1e-12)

    def test_zero_offload(self):
        e_off, _ = task_energy(16e6, 0.0, EnergyModel(), 2e9)
        assert e_off == 0.0

    def test_offload_energy(self):
        e_off, _ = task_energy(1.0, 0.1, EnergyModel(offload_power_w=10e-3), 2e9)
        assert e_off == pytest.approx(1e-3)


class TestExecutor:
    def test_two_task_trace(self):
        ex = Executor(1, 2e9, 1e3)
        ex.admit(1, 2e6, 0.0)
        ex.admit(2, 4e6, 0.0)
        assert ex.advance(math.inf) == [(1, 2.0), (2, 3.0)]

    def test_single_task(self):
        ex = Executor(1, 2e9, 1e3)
        ex.admit(1, 16e6, 0.0)
        assert ex.advance(math.inf) == [(1, 8.0)]

    def test_empty(self):
        ex = Executor(1, 2e9, 1e3, clock=3.0)
        assert ex.advance(10.0) == []
        assert len(ex) == 0 and ex.clock == 10.0

    def test_admit_halves_speed(self):
        ex = Executor(0, 1e9, 1e3)
        ex.admit(1, 1e6, 0.0)
        ex.admit(2, 1e6, 0.0)
        ex.advance(1.0)
        assert ex.residuals() == pytest.approx([0.5e6, 0.5e6])

    def test_admit_then_advance_matches_trace(self):
        ex = Executor(1, 2e9, 1e3)
        ex.admit(1, 4e6, 0.0)
        done = ex.admit(2, 2e6, 0.0)
        assert done == []
        assert ex.advance(math.inf) == [(2, 2.0), (1, 3.0)]

    def test_duplicate_id(self):
        ex = Executor(1, 2e9, 1e3)
        ex.admit(1, 1e6, 0.0)
        with pytest.raises(RuntimeError):
            ex.admit(1, 1e6, 0.1)

    def test_backwards(self):
        ex = Executor(1, 2e9, 1e3, clock=5.0)
        with pytest.raises(ValueError):
            ex.advance(4.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(1e3, 1e8), min_size=0, max_size=12), st.floats(0.01, 50), st.floats(0.0, 1.0))
    def test_split_consistency(self, sizes, horizon, frac):
        a = Executor(0, 2e9, 1e3)
        for i, s in enumerate(sizes):
            a.admit(i, s, 0.0)
        b = a.copy()
        da = a.advance(horizon)
        db = b.advance(horizon * frac) + b.advance(horizon)
        assert [i for i, _ in da] == [i for i, _ in db]
        for (_, x), (_, y) in zip(da, db):
            assert x == pytest.approx(y, rel=1e-12)
        assert a.residuals() == pytest.approx(b.residuals(), rel=1e-9, abs=1e-3)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(1e3, 1e8), min_size=1, max_size=12), st.floats(0.01, 50))
    def test_work_conservation(self, sizes, horizon):
        ex = Executor(0, 2e9, 1e3)
        for i, s in enumerate(sizes):
            ex.admit(i, s, 0.0)
        before = sum(ex.residuals())
        ex.advance(horizon)
        depleted = before - sum(ex.residuals())
        assert depleted == pytest.approx(min(before, horizon * 2e9 / 1e3), rel=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(1e3, 1e8), min_size=1, max_size=12, unique=True))
    def test_completion_order(self, sizes):
        ex = Executor(0, 2e9, 1e3)
        for i, s in enumerate(sizes):
            ex.admit(i, s, 0.0)
        order = [i for i, _ in ex.advance(math.inf)]
        assert order == list(np.argsort(sizes, kind="stable"))


class TestWorld:
    def test_deterministic_episode(self):
        cfg = SimConfig(num_steps=20)
        freqs = [4e9, 2e9, 2e9]

        def run(seed):
            w = SimWorld(cfg, freqs, np.random.default_rng(seed))
            acts = np.random.default_rng(1)
            while not w.done:
                if w.current_task is not None:
                    w.dispatch(int(acts.integers(3)))
                w.end_step()
            w.drain()
            return w.totals()
        assert run(5) == run(5)
        assert run(5) != run(6)

    def test_energy_decomposes(self):
        w = SimWorld(SimConfig(num_steps=15), [4e9, 2e9], np.random.default_rng(0))
        while not w.done:
            w.dispatch(w.step_index % 2)
            w.end_step()
        w.drain()
        total = sum(r.energy_offload + r.energy_exec for r in w.records.values())
        assert w.totals()[1] == total
        assert len(w.records) == 15

    def test_totals_require_drain(self):
        w = SimWorld(SimConfig(num_steps=2), [4e9, 2e9], np.random.default_rng(0))
        w.dispatch(1)
        w.end_step()
        with pytest.raises(RuntimeError):
            w.totals()

    def test_median_offload_delay_short(self):
        cfg = SimConfig(num_steps=100)
        delays = []
        for s in range(5):
            w = SimWorld(cfg, [4e9] + [2e9] * 6, np.random.default_rng(s))
            while not w.done:
                rec = w.dispatch(int(w.step_index % 7))
                delays.append(rec.offload_delay)
                w.end_step()
        assert np.median(delays) <= 0.1 * cfg.step_duration

    def test_poisson_mode_idle_steps(self):
        cfg = SimConfig(num_steps=30, arrival_mode="poisson", arrival_rate=0.02, num_users=2)
        w = SimWorld(cfg, [4e9, 2e9], np.random.default_rng(2))
        idle = 0
        while not w.done:
            if w.current_task is None:
                idle += 1
            else:
                w.dispatch(0)
            w.end_step()
        assert idle > 0

    def test_trace_csv(self, tmp_path):
        w = SimWorld(SimConfig(num_steps=5), [4e9, 2e9], np.random.default_rng(0))
        while not w.done:
            w.dispatch(1)
            w.end_step()
        w.drain()
        p = tmp_path / "trace.csv"
        write_trace_csv(w, p)
        lines = p.read_text().splitlines()
        assert lines[0].split(",") == ["task_id", "server", "offload_delay_s", "exec_delay_s",
                                       "energy_offload_j", "energy_exec_j"]
        assert len(lines) == 6
