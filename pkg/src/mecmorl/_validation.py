"""Input checks shared by the estimator layer."""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from .momdp import Context, ContextSpace, EncodedState, StateBatch


def check_preference(w) -> tuple[float, float]:
    try:
        t, e = (float(v) for v in w)
    except (TypeError, ValueError):
        raise ValueError(f"preference must be a pair of numbers, got {w!r}") from None
    if t < 0 or e < 0 or abs(t + e - 1.0) > 1e-9:
        raise ValueError(f"preference must be nonnegative and sum to 1, got {w!r}")
    return (t, e)


def check_seed(random_state) -> int:
    if random_state is None:
        return int(np.random.SeedSequence().entropy % (2 ** 63))
    if isinstance(random_state, numbers.Integral) and not isinstance(random_state, bool):
        if random_state < 0:
            raise ValueError("random_state must be nonnegative")
        return int(random_state)
    raise TypeError(f"random_state must be an int or None, got {type(random_state).__name__}")


def check_state_batch(X, e_max: int | None = None) -> StateBatch:
    """Accept a StateBatch, one EncodedState, a list of them, or ``(servers, pref, edges)``."""
    if isinstance(X, StateBatch):
        b = X
    elif isinstance(X, EncodedState):
        b = StateBatch.stack([X])
    elif isinstance(X, (list, tuple)) and X and all(isinstance(s, EncodedState) for s in X):
        b = StateBatch.stack(list(X))
    elif isinstance(X, tuple) and len(X) == 3:
        servers = np.asarray(X[0], dtype=float)
        if servers.ndim == 2:
            servers = servers[None]
        b = StateBatch(servers, np.atleast_2d(np.asarray(X[1], dtype=float)),
                       np.atleast_1d(np.asarray(X[2], dtype=np.int64)))
    else:
        raise TypeError("expected encoded states or a (servers, preference, num_edges) tuple")
    if b.servers.ndim != 3:
        raise ValueError(f"server block must be (batch, slots, features), got {b.servers.shape}")
    if not np.all(np.isfinite(b.servers)) or not np.all(np.isfinite(b.preference)):
        raise ValueError("states contain non-finite values")
    if b.preference.shape != (len(b.servers), 2):
        raise ValueError("one preference pair per state is required")
    if e_max is not None and b.servers.shape[1] != e_max + 1:
        raise ValueError(f"states have {b.servers.shape[1]} slots, model expects {e_max + 1}")
    if np.any(b.num_edges < 1) or np.any(b.num_edges >= b.servers.shape[1]):
        raise ValueError("num_edges out of range for the slot count")
    return b


def check_context(context, e_max: int | None = None) -> Context:
    if not isinstance(context, Context):
        raise TypeError(f"expected a Context, got {type(context).__name__}")
    if e_max is not None and context.num_edges > e_max:
        raise ValueError(f"context has {context.num_edges} edge servers; model supports {e_max}")
    return context


def check_context_space(space, e_max: int | None = None) -> ContextSpace:
    if isinstance(space, Context):
        space = ContextSpace.singleton(space)
    if not isinstance(space, ContextSpace):
        raise TypeError(f"expected a ContextSpace, got {type(space).__name__}")
    if e_max is not None and space.max_edges > e_max:
        raise ValueError(f"context space reaches {space.max_edges} edges; model supports {e_max}")
    return space


def check_preferences(prefs: Sequence) -> list[tuple[float, float]]:
    out = [check_preference(w) for w in prefs]
    if not out:
        raise ValueError("at least one preference is required")
    return out
