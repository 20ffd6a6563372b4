"""Model-based policy evaluation and planning.

Off-policy evaluation by Monte Carlo rollouts in the learned model, the
metrics used to score estimated policy values against ground truth
(absolute error, Spearman rank correlation, regret@k), transition
prediction error reports, and a shooting-style MPC planner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoding, model, rollout
from .dataset import TrajectoryRecord
from .encoding import scalarize

# desk-scale and full-scale OPE defaults
DESK_GAMMA = 0.99
DESK_HORIZON = 200
DESK_NUM_ROLLOUTS = 50
FULL_GAMMA = 0.995
FULL_HORIZON = 2000


@dataclass
class PolicyValueEstimate:
    """Monte Carlo value estimate: the mean of per-rollout discounted
    returns."""

    value: float
    returns: np.ndarray  # (N,)
    gamma: float
    horizon: int


@dataclass
class OpeMetrics:
    abs_err: float
    rank_corr: float
    regret_at_1: float
    value_range: float  # max - min of the true values


def make_model_rollout(params, cfg, stats, mode="expectation"):
    """Rollout backend running the learned model; returns a callable
    (policy, init_states, h, rng) -> rewards (N, h)."""

    def run(policy, init_states, h, rng):
        def act(t, states, r):
            return np.asarray(policy(states, r))
        _, _, rewards = rollout.batch_rollout(params, cfg, stats, init_states,
                                              h, act, mode=mode, rng=rng)
        return rewards

    return run


def make_simulator_rollout(env_factory):
    """Rollout backend running a ground-truth environment (one instance
    per trajectory via ``env_factory()``); same signature as the model
    backend, so the evaluation loop is model-agnostic."""

    def run(policy, init_states, h, rng):
        init_states = np.atleast_2d(init_states)
        N = init_states.shape[0]
        rewards = np.zeros((N, h))
        for i in range(N):
            env = env_factory()
            env.reset(rng)
            obs = init_states[i]
            env.set_obs(obs)
            for t in range(h):
                a = np.asarray(policy(obs[None, :], rng)).squeeze(0)
                obs, r = env.step(a)
                rewards[i, t] = r
        return rewards

    return run


def ope_estimate(rollout_fn, policy, init_states, gamma=DESK_GAMMA,
                 h=DESK_HORIZON, rng=None) -> PolicyValueEstimate:
    """Monte Carlo policy value: roll out h steps from each initial state
    and average the discounted returns sum_t gamma^t r_{t+1}."""
    init_states = np.atleast_2d(np.asarray(init_states, dtype=np.float64))
    if init_states.shape[0] < 1:
        raise ValueError("need at least one initial state")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if h < 1:
        raise ValueError("horizon must be >= 1")
    rewards = np.asarray(rollout_fn(policy, init_states, h, rng))
    discounts = gamma ** np.arange(h)
    returns = rewards @ discounts
    return PolicyValueEstimate(value=float(returns.mean()), returns=returns,
                               gamma=gamma, horizon=h)


# ---------------------------------------------------------------------------
# metrics over (true value, estimated value) pairs


def _value_range(true_values):
    true_values = np.asarray(true_values, dtype=np.float64)
    span = float(true_values.max() - true_values.min())
    if span == 0.0:
        raise ValueError("true values are all equal; normalization undefined")
    return span


def abs_err(true_values, est_values, normalized=True):
    """Mean absolute estimation error, by default divided by the spread
    (max - min) of the true values."""
    true_values = np.atleast_1d(np.asarray(true_values, dtype=np.float64))
    est_values = np.atleast_1d(np.asarray(est_values, dtype=np.float64))
    if true_values.shape != est_values.shape:
        raise ValueError("value lists differ in length")
    err = float(np.abs(true_values - est_values).mean())
    if not normalized:
        return err
    return err / _value_range(true_values)


def _average_ranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def rank_correlation(true_values, est_values):
    """Spearman correlation: Pearson correlation of the two rank vectors,
    with tied values given average ranks."""
    true_values = np.asarray(true_values, dtype=np.float64)
    est_values = np.asarray(est_values, dtype=np.float64)
    if true_values.shape != est_values.shape or true_values.ndim != 1:
        raise ValueError("need two equal-length 1-d value lists")
    if len(true_values) < 2:
        raise ValueError("need at least 2 values")
    rt = _average_ranks(true_values)
    re = _average_ranks(est_values)
    st, se = rt.std(), re.std()
    if st == 0.0 or se == 0.0:
        raise ValueError("constant list; rank correlation undefined")
    return float(((rt - rt.mean()) * (re - re.mean())).mean() / (st * se))


def regret_at_k(true_values, est_values, k, normalized=False):
    """Gap between the best true value and the best true value among the
    top-k policies by estimated value."""
    true_values = np.asarray(true_values, dtype=np.float64)
    est_values = np.asarray(est_values, dtype=np.float64)
    N = len(true_values)
    if len(est_values) != N:
        raise ValueError("value lists differ in length")
    if not 1 <= k <= N:
        raise ValueError(f"k must be in [1, {N}], got {k}")
    top_k = np.argsort(-est_values, kind="stable")[:k]
    regret = float(true_values.max() - true_values[top_k].max())
    if not normalized:
        return regret
    return regret / _value_range(true_values)


def ope_metrics(true_values, est_values) -> OpeMetrics:
    return OpeMetrics(
        abs_err=abs_err(true_values, est_values),
        rank_corr=rank_correlation(true_values, est_values),
        regret_at_1=regret_at_k(true_values, est_values, 1, normalized=True),
        value_range=_value_range(true_values))


# ---------------------------------------------------------------------------
# transition prediction error


def _windows(manifest, length, stride=1, max_windows=None):
    windows = []
    for rec in manifest.all_records():
        grid = scalarize(rec).values
        for start in range(0, grid.shape[0] - length + 1, stride):
            windows.append(grid[start:start + length])
            if max_windows is not None and len(windows) >= max_windows:
                return windows
    return windows


def prediction_error_report(params, cfg, stats, manifest, context=19, *,
                            stride=1, max_windows=None, chunk=256,
                            reference=None):
    """One-step prediction error over held-out windows.

    Feeds ``context`` history rows and scores the decoded prediction of
    the following state and reward. Returns per-variate and aggregate MAE
    (plus MSE); if ``reference`` is another report, errors are additionally
    reported relative to its aggregate MAE.
    """
    if context < 1 or context >= cfg.context:
        raise ValueError(f"context must be in [1, {cfg.context - 1}]")
    entry = manifest.entries[0]
    m = entry.env_spec.state_dim
    windows = _windows(manifest, context + 1, stride, max_windows)
    if not windows:
        raise ValueError("no test windows of the required length")
    windows = np.stack(windows)  # (N, context+1, M)
    abs_errors = []
    sq_errors = []
    for lo in range(0, windows.shape[0], chunk):
        part = windows[lo:lo + chunk]
        Q = encoding.encode_grid_gauss(part[:, :context], stats)
        P = model.forward(params, cfg, Q, m)
        pred = encoding.decode_grid_expectation(P.data[:, -1, :m + 1, :], stats)
        truth = part[:, context, :m + 1]
        abs_errors.append(np.abs(pred - truth))
        sq_errors.append((pred - truth) ** 2)
    abs_errors = np.concatenate(abs_errors)
    sq_errors = np.concatenate(sq_errors)
    per_variate = abs_errors.mean(axis=0)
    report = {
        "num_windows": int(windows.shape[0]),
        "context": context,
        "per_variate_mae": {
            **{f"s{j}": float(per_variate[j]) for j in range(m)},
            "reward": float(per_variate[m]),
        },
        "aggregate_mae": float(per_variate.mean()),
        "aggregate_mse": float(sq_errors.mean()),
    }
    if reference is not None:
        report["relative_mae"] = (report["aggregate_mae"]
                                  / reference["aggregate_mae"])
    return report


def mirror_error_report(manifest, context=19, *, stride=1, max_windows=None):
    """Last-step mirroring baseline: predict that the next state and
    reward repeat the most recent row. Same report shape as the model's."""
    entry = manifest.entries[0]
    m = entry.env_spec.state_dim
    windows = _windows(manifest, context + 1, stride, max_windows)
    if not windows:
        raise ValueError("no test windows of the required length")
    windows = np.stack(windows)
    pred = windows[:, context - 1, :m + 1]
    truth = windows[:, context, :m + 1]
    abs_errors = np.abs(pred - truth)
    per_variate = abs_errors.mean(axis=0)
    return {
        "num_windows": int(windows.shape[0]),
        "context": context,
        "per_variate_mae": {
            **{f"s{j}": float(per_variate[j]) for j in range(m)},
            "reward": float(per_variate[m]),
        },
        "aggregate_mae": float(per_variate.mean()),
        "aggregate_mse": float(((pred - truth) ** 2).mean()),
    }


# ---------------------------------------------------------------------------
# model predictive control


@dataclass
class MpcConfig:
    num_candidates: int = 128
    horizon: int = 25
    noise_sigma: float = 0.05
    planner: str = "proposal"   # or "random_shooting"
    replan_every: int = 1
    action_bounds: tuple = (-1.0, 1.0)
    decode_mode: str = "expectation"  # or "sample"

    def __post_init__(self):
        if self.num_candidates < 1 or self.horizon < 1:
            raise ValueError("num_candidates and horizon must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.planner not in ("proposal", "random_shooting"):
            raise ValueError(f"unknown planner {self.planner!r}")
        if self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")
        if self.decode_mode not in ("expectation", "sample"):
            raise ValueError(f"unknown decode mode {self.decode_mode!r}")


def mpc_plan(params, cfg, stats, history: rollout.History, proposal,
             mpc_cfg: MpcConfig, rng):
    """Pick an action by shooting: K candidate action sequences (the
    proposal's imagined action sequence plus Gaussian noise, or pure
    noise for random shooting) are scored by cumulative predicted reward;
    the best sequence's first action wins, ties going to the lowest
    candidate index. Returns (action, info)."""
    m = history.current[0].shape[0]
    n = stats.num_variates - m - 1
    K, H = mpc_cfg.num_candidates, mpc_cfg.horizon
    init_rows = np.stack(history.past) if history.past else None
    s0, r0 = history.current

    if mpc_cfg.planner == "proposal":
        if proposal is None:
            raise ValueError("proposal planner needs a proposal policy")
        seq = np.zeros((H, n))

        def record(t, states, r):
            seq[t] = np.asarray(proposal(states, r)).squeeze(0)
            return seq[t][None, :]

        rollout.batch_rollout(params, cfg, stats, s0[None, :], H, record,
                              mode=mpc_cfg.decode_mode, rng=rng,
                              init_rows=init_rows, r0=r0)
        mean_seq = seq
    else:
        mean_seq = np.zeros((H, n))

    noise = rng.normal(0.0, 1.0, size=(K, H, n)) * mpc_cfg.noise_sigma
    noise[0] = 0.0  # keep the unperturbed mean sequence as a candidate
    candidates = np.clip(mean_seq[None] + noise, *mpc_cfg.action_bounds)

    def act(t, states, r):
        return candidates[:, t, :]

    _, _, rewards = rollout.batch_rollout(
        params, cfg, stats, np.repeat(s0[None, :], K, axis=0), H, act,
        mode=mpc_cfg.decode_mode, rng=rng, init_rows=init_rows, r0=r0)
    returns = rewards.sum(axis=1)
    best = int(np.argmax(returns))
    info = {"candidate_returns": returns, "chosen_index": best,
            "sequence": candidates[best]}
    return candidates[best, 0], info


def mpc_episode(params, cfg, stats, env, proposal, mpc_cfg: MpcConfig,
                max_steps, rng):
    """Closed-loop MPC in a real environment: replan every
    ``replan_every`` steps, execute the planned prefix, report the
    undiscounted return. Returns (return, TrajectoryRecord or None)."""
    if max_steps == 0:
        return 0.0, None
    obs = env.reset(rng)
    history = rollout.History(cfg.context, obs)
    states, actions, rewards = [obs], [], []
    total = 0.0
    plan = None
    for step in range(max_steps):
        offset = step % mpc_cfg.replan_every
        if offset == 0:
            _, info = mpc_plan(params, cfg, stats, history, proposal,
                               mpc_cfg, rng)
            plan = info["sequence"]
        a = plan[min(offset, plan.shape[0] - 1)]
        obs, r = env.step(a)
        history.advance(a, obs, r)
        total += r
        states.append(obs)
        actions.append(a)
        rewards.append(r)
    record = TrajectoryRecord(env_id=getattr(env, "env_spec").env_id,
                              states=np.stack(states),
                              actions=np.stack(actions),
                              rewards=np.array(rewards))
    return total, record
