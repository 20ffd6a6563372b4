"""Autoregressive world-model interface.

Predict the next state and reward from a bounded history window, either
by full recompute or incrementally with cached temporal keys/values, and
roll a policy forward for h imagined steps. A batched rollout path serves
off-policy evaluation and MPC candidate scoring.
"""

from __future__ import annotations

import logging

import numpy as np

from . import encoding, model
from .dataset import TrajectoryRecord

log = logging.getLogger(__name__)


class History:
    """Sliding window of past (state, reward, action) rows plus the current
    partial row; at most context-1 past rows are kept, so a completed
    window never exceeds the model context."""

    def __init__(self, context, s0, r0=0.0):
        self.context = context
        self.past = []  # completed (M,) scalar rows
        self.current = (np.asarray(s0, dtype=np.float64), float(r0))
        self._clamp_logged = False

    def __len__(self):
        return len(self.past) + 1

    def window(self, action):
        """The (T, M) scalar window with the current row completed by
        ``action``; T <= context."""
        s, r = self.current
        action = np.atleast_1d(np.asarray(action, dtype=np.float64))
        row = np.concatenate([s, [r], action])
        rows = self.past + [row]
        return np.stack(rows)

    def advance(self, action, s_next, r_next):
        s, r = self.current
        action = np.atleast_1d(np.asarray(action, dtype=np.float64))
        self.past.append(np.concatenate([s, [r], action]))
        if len(self.past) > self.context - 1:
            self.past.pop(0)
        self.current = (np.asarray(s_next, dtype=np.float64), float(r_next))


def _decode_row(p_row, stats, m, mode, rng):
    """Decode the first m+1 variates (state dims then reward) of one
    prediction row."""
    probs = p_row[None, :m + 1, :]
    if mode == "expectation":
        decoded = encoding.decode_grid_expectation(probs, stats)[0]
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        decoded = encoding.decode_grid_sample(probs, stats, rng)[0]
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return decoded[:m], float(decoded[m])


def _check_clamp(history, values, stats):
    below = values < stats.lo[: values.shape[-1]]
    above = values > stats.hi[: values.shape[-1]]
    if (below.any() or above.any()) and not history._clamp_logged:
        history._clamp_logged = True
        log.warning("variate outside bin range; clamping (logged once)")


def predict_next(params, cfg, stats, history: History, action,
                 mode="expectation", rng=None):
    """Encode the history window, run the model and decode the last
    timestep's state and reward; the history is advanced."""
    if history.current[0].shape[0] + 1 + np.atleast_1d(action).shape[0] \
            != stats.num_variates:
        raise ValueError("action dimension does not match bin stats")
    m = history.current[0].shape[0]
    X = history.window(action)
    _check_clamp(history, X, stats)
    Q = encoding.encode_grid_gauss(X, stats)
    P = model.forward(params, cfg, Q, m)
    s_next, r_next = _decode_row(P.data[-1], stats, m, mode, rng)
    history.advance(action, s_next, r_next)
    return s_next, r_next


class KVCache:
    """Cached temporal keys/values for incremental decoding.

    When the window would exceed the context, the oldest row is dropped
    and the cache rebuilt from scratch (correctness over speed; timestep
    embeddings restart at zero after a slide).
    """

    def __init__(self, params, cfg, stats, m):
        if stats.num_bins != cfg.num_bins:
            raise ValueError(
                f"bin stats ({stats.num_bins}) do not match model config "
                f"({cfg.num_bins}) bins")
        self.params = params
        self.cfg = cfg
        self.stats = stats
        self.m = m
        self.rows = []      # scalar (M,) rows currently covered by the cache
        self._blocks = None

    def __len__(self):
        return len(self.rows)

    def _empty_blocks(self, M):
        H, dh = self.cfg.num_heads, self.cfg.head_dim
        return [{"k": np.zeros((M, H, 0, dh)), "v": np.zeros((M, H, 0, dh))}
                for _ in range(self.cfg.num_blocks)]

    def _rebuild(self):
        if self.rows:
            Q = encoding.encode_grid_gauss(np.stack(self.rows), self.stats)
            _, self._blocks = model.forward_capture_kv(
                self.params, self.cfg, Q, self.m)
        else:
            self._blocks = None

    def append(self, row):
        """Add one completed scalar row; returns its (M, B) prediction."""
        row = np.asarray(row, dtype=np.float64)
        if row.shape[0] != self.stats.num_variates:
            raise ValueError(
                f"row has {row.shape[0]} variates, expected {self.stats.num_variates}")
        if len(self.rows) == self.cfg.context:
            self.rows.pop(0)
            self._rebuild()
        if self._blocks is None:
            self._blocks = self._empty_blocks(row.shape[0])
        q_row = encoding.encode_grid_gauss(row[None, :], self.stats)[0]
        p_row = model.forward_incremental(self.params, self.cfg, self._blocks,
                                          q_row, self.m, t_index=len(self.rows))
        self.rows.append(row)
        return p_row


def predict_next_cached(params, cfg, stats, cache: KVCache, history: History,
                        action, mode="expectation", rng=None):
    """As predict_next, but via the incremental KV-cache path. The cache
    must have been fed exactly the rows of this history."""
    if cache.params is not params or cache.cfg is not cfg:
        raise ValueError("cache was built for different params/config")
    m = history.current[0].shape[0]
    row = history.window(action)[-1]
    p_row = cache.append(row)
    s_next, r_next = _decode_row(p_row, stats, m, mode, rng)
    history.advance(action, s_next, r_next)
    return s_next, r_next


def rollout(params, cfg, stats, policy, s0, h, mode="expectation", rng=None):
    """Closed-loop imagined trajectory: a_t ~ policy(s_t), next state and
    reward from the model. Returns a TrajectoryRecord of h transitions."""
    if h < 1:
        raise ValueError("horizon must be >= 1")
    m = np.asarray(s0).shape[0]
    n = stats.num_variates - m - 1
    history = History(cfg.context, s0)
    states, actions, rewards = [np.asarray(s0, dtype=np.float64)], [], []
    obs = np.asarray(s0, dtype=np.float64)
    for _ in range(h):
        a = np.atleast_1d(np.asarray(policy(obs[None, :], rng)).squeeze(0))
        if a.shape[0] != n:
            raise ValueError(f"policy produced {a.shape[0]} dims, expected {n}")
        obs, r = predict_next(params, cfg, stats, history, a, mode, rng)
        states.append(obs)
        actions.append(a)
        rewards.append(r)
    return TrajectoryRecord(env_id="imagined", states=np.stack(states),
                            actions=np.stack(actions), rewards=np.array(rewards))


def batch_rollout(params, cfg, stats, s0_batch, h, action_fn,
                  mode="expectation", rng=None, init_rows=None, r0=0.0):
    """Vectorized h-step rollout of N parallel imagined trajectories.

    ``action_fn(t, states, rng) -> (N, n)`` supplies actions; ``init_rows``
    is an optional (T0, M) shared history prefix (e.g. real experience
    before planning) and ``r0`` the reward already earned entering s0.
    Returns (states (N, h+1, m), actions (N, h, n), rewards (N, h)).
    """
    s0_batch = np.atleast_2d(np.asarray(s0_batch, dtype=np.float64))
    N, m = s0_batch.shape
    M = stats.num_variates
    n = M - m - 1
    rows = []
    if init_rows is not None:
        rows = [np.broadcast_to(r, (N, M)).copy() for r in np.asarray(init_rows)]
    cur_s = s0_batch.copy()
    cur_r = np.broadcast_to(np.asarray(r0, dtype=np.float64), (N,)).copy()
    states = [cur_s.copy()]
    actions, rewards = [], []
    for t in range(h):
        a = np.asarray(action_fn(t, cur_s, rng))
        if a.shape != (N, n):
            raise ValueError(f"action_fn returned {a.shape}, expected {(N, n)}")
        row = np.concatenate([cur_s, cur_r[:, None], a], axis=1)
        rows.append(row)
        if len(rows) > cfg.context:
            rows.pop(0)
        window = np.stack(rows, axis=1)  # (N, T, M)
        Q = encoding.encode_grid_gauss(window, stats)
        P = model.forward(params, cfg, Q, m)
        last = P.data[:, -1, :m + 1, :]
        if mode == "expectation":
            decoded = encoding.decode_grid_expectation(last, stats)
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            decoded = encoding.decode_grid_sample(last, stats, rng)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        cur_s, cur_r = decoded[:, :m], decoded[:, m]
        states.append(cur_s.copy())
        actions.append(a)
        rewards.append(cur_r.copy())
    return (np.stack(states, axis=1), np.stack(actions, axis=1),
            np.stack(rewards, axis=1))
