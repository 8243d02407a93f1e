"""Scheduler estimators with a scikit-learn style surface.

``fit`` takes a context space (or a single context), ``predict`` maps encoded
states to server indices and ``evaluate``/``front`` run seeded episodes.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import (check_context, check_context_space, check_preference,
                          check_preferences, check_seed, check_state_batch)
from .baselines import (LinUCB, RandomPolicy, episode_cost, evaluate_assignment,
                        evaluate_linucb, evaluate_random, linucb_features, multi_policy_train,
                        sa_search, train_linucb)
from .momdp import Context, StateBatch
from .pareto import PerfPoint
from .sac import EvalResult, SACAgent, TrainerConfig, evaluate, train
from .sim import SimConfig


class SchedulerMixin:
    """Front sweep shared by every scheduler."""

    def _sweep_values(self, preferences):
        return check_preferences(preferences)

    def front(self, context: Context, preferences: Sequence, num_episodes: int, seed: int,
              sim_config: Optional[SimConfig] = None, label: Optional[str] = None):
        """Evaluate at each preference and return ``(points, mean_size_bits)``."""
        points = []
        size = None
        for w in self._sweep_values(preferences):
            res = self.evaluate(context.with_preference(w), num_episodes, seed, sim_config)
            points.append(PerfPoint(res.delay, res.energy, tuple(w), label or self.scheme))
            size = res.mean_size_bits
        return points, size


class GMORLScheduler(SchedulerMixin, BaseEstimator):
    """One preference-conditioned discrete SAC policy for all contexts."""

    scheme = "gmorl"

    def __init__(self, trainer: Optional[TrainerConfig] = None,
                 sim_config: Optional[SimConfig] = None, random_state=0):
        self.trainer = trainer
        self.sim_config = sim_config
        self.random_state = random_state

    def fit(self, X, y=None, progress=None):
        cfg = self.trainer or TrainerConfig()
        space = check_context_space(X, cfg.e_max)
        sim = self.sim_config or SimConfig()
        res = train(cfg, space, sim, check_seed(self.random_state), progress)
        self.agent_ = res.agent
        self.training_log_ = res.log
        self.alpha_t_, self.alpha_e_ = res.alpha_t, res.alpha_e
        return self

    @classmethod
    def from_checkpoint(cls, path, sim_config: Optional[SimConfig] = None):
        agent = SACAgent.load(path)
        est = cls(agent.config, sim_config, agent.meta.get("seed", 0))
        est.agent_ = agent
        est.training_log_ = []
        est.alpha_t_ = agent.meta.get("alpha_t", agent.config.alpha_t)
        est.alpha_e_ = agent.meta.get("alpha_e", agent.config.alpha_e)
        return est

    def save(self, path, meta: Optional[dict] = None):
        check_is_fitted(self, "agent_")
        m = {"alpha_t": self.alpha_t_, "alpha_e": self.alpha_e_, "seed": self.random_state}
        m.update(meta or {})
        self.agent_.save(path, m)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "agent_")
        return self.agent_.probabilities(check_state_batch(X, self.agent_.spec.e_max))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def evaluate(self, context: Context, num_episodes: int, seed: int,
                 sim_config: Optional[SimConfig] = None) -> EvalResult:
        check_is_fitted(self, "agent_")
        context = check_context(context, self.agent_.spec.e_max)
        return evaluate(self.agent_, context, sim_config or self.sim_config or SimConfig(),
                        num_episodes, seed)


class LinUCBScheduler(SchedulerMixin, BaseEstimator):
    scheme = "linucb"

    def __init__(self, alpha_ucb: float = 1.0, episodes_per_preference: int = 50,
                 e_max: int = 8, n_bins: int = 30, alpha_t: float = 0.1, alpha_e: float = 1.0,
                 sim_config: Optional[SimConfig] = None, random_state=0):
        self.alpha_ucb = alpha_ucb
        self.episodes_per_preference = episodes_per_preference
        self.e_max = e_max
        self.n_bins = n_bins
        self.alpha_t = alpha_t
        self.alpha_e = alpha_e
        self.sim_config = sim_config
        self.random_state = random_state

    def fit(self, X, y=None):
        space = check_context_space(X, self.e_max)
        self.model_ = train_linucb(space, self.sim_config or SimConfig(), self.e_max, self.n_bins,
                                   self.episodes_per_preference, check_seed(self.random_state),
                                   self.alpha_ucb, self.alpha_t, self.alpha_e)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        b = check_state_batch(X, self.e_max)
        return self.model_.select(linucb_features(b), b.mask)

    def evaluate(self, context, num_episodes, seed, sim_config=None) -> EvalResult:
        check_is_fitted(self, "model_")
        context = check_context(context, self.e_max)
        return evaluate_linucb(self.model_, context, sim_config or self.sim_config or SimConfig(),
                               self.e_max, self.n_bins, num_episodes, seed)


class RandomScheduler(SchedulerMixin, BaseEstimator):
    """Random-p offloading; its front sweeps ``p_cloud`` instead of the preference."""

    scheme = "random"

    def __init__(self, p_cloud: float = 0.5, sim_config: Optional[SimConfig] = None,
                 random_state=0):
        self.p_cloud = p_cloud
        self.sim_config = sim_config
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.policy_ = RandomPolicy(self.p_cloud)
        self.rng_ = np.random.default_rng(check_seed(self.random_state))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        b = check_state_batch(X)
        return np.array([self.policy_.select(int(n), self.rng_) for n in b.num_edges])

    def evaluate(self, context, num_episodes, seed, sim_config=None) -> EvalResult:
        return evaluate_random(self.p_cloud, check_context(context), sim_config or self.sim_config
                               or SimConfig(), num_episodes, seed)

    def front(self, context, p_values, num_episodes, seed, sim_config=None, label=None):
        """Sweep ``p_cloud``; the ``preference`` field of each point holds ``(p, 1 - p)``."""
        points, size = [], None
        for p in p_values:
            res = evaluate_random(float(p), check_context(context),
                                  sim_config or self.sim_config or SimConfig(), num_episodes, seed)
            points.append(PerfPoint(res.delay, res.energy, (float(p), 1.0 - float(p)),
                                    label or self.scheme))
            size = res.mean_size_bits
        return points, size


class SAScheduler(SchedulerMixin, BaseEstimator):
    """Per-preference annealed open-loop assignment on a fixed context."""

    scheme = "sa"

    def __init__(self, budget: int = 10000, cooling: float = 0.995, calibration: int = 20,
                 search_seed: int = 777, alpha_t: float = 0.1, alpha_e: float = 1.0,
                 sim_config: Optional[SimConfig] = None, random_state=0):
        self.budget = budget
        self.cooling = cooling
        self.calibration = calibration
        self.search_seed = search_seed
        self.alpha_t = alpha_t
        self.alpha_e = alpha_e
        self.sim_config = sim_config
        self.random_state = random_state

    def fit(self, X, y=None):
        context = check_context(X)
        sim = self.sim_config or SimConfig()
        cost = episode_cost(context, sim, context.preference, self.alpha_t, self.alpha_e,
                            [self.search_seed, 0])
        rng = np.random.default_rng([check_seed(self.random_state), 51])
        self.result_ = sa_search(cost, sim.num_steps, context.num_edges + 1, self.budget, rng,
                                 self.cooling, self.calibration)
        self.context_ = context
        return self

    def predict(self, X) -> np.ndarray:
        """Assignment entries for the given dispatch indices."""
        check_is_fitted(self, "result_")
        idx = np.asarray(X, dtype=np.int64)
        a = self.result_.assignment
        return a[np.minimum(idx, len(a) - 1)]

    def evaluate(self, context, num_episodes, seed, sim_config=None) -> EvalResult:
        context = check_context(context)
        if not hasattr(self, "result_") or self.context_ != context:
            self.fit(context)
        return evaluate_assignment(self.result_.assignment, context,
                                   sim_config or self.sim_config or SimConfig(), num_episodes, seed)


class MultiPolicyScheduler(SchedulerMixin, BaseEstimator):
    """One single-context SAC learner per preference."""

    scheme = "multipolicy"

    def __init__(self, preferences: Optional[Sequence] = None,
                 trainer: Optional[TrainerConfig] = None,
                 sim_config: Optional[SimConfig] = None, random_state=0):
        self.preferences = preferences
        self.trainer = trainer
        self.sim_config = sim_config
        self.random_state = random_state

    def fit(self, X, y=None):
        context = check_context(X)
        prefs = check_preferences(self.preferences or [context.preference])
        cfg = self.trainer or TrainerConfig()
        results = multi_policy_train(prefs, context, cfg, self.sim_config or SimConfig(),
                                     check_seed(self.random_state))
        self.agents_ = {w: r.agent for w, r in zip(prefs, results)}
        self.context_ = context
        return self

    def _agent(self, w):
        check_is_fitted(self, "agents_")
        w = check_preference(w)
        if w not in self.agents_:
            raise ValueError(f"no policy was trained for preference {w}")
        return self.agents_[w]

    def predict(self, X) -> np.ndarray:
        b = check_state_batch(X)
        out = np.empty(len(b), dtype=np.int64)
        for i in range(len(b)):
            agent = self._agent(tuple(b.preference[i]))
            out[i] = agent.greedy(b.take([i]))[0]
        return out

    def evaluate(self, context, num_episodes, seed, sim_config=None) -> EvalResult:
        agent = self._agent(context.preference)
        return evaluate(agent, check_context(context, agent.spec.e_max),
                        sim_config or self.sim_config or SimConfig(), num_episodes, seed)
