"""Comparison dynamics models.

Two reference points for the two-dimensional trajectory model: a
flattened 1-D attention transformer over the scalar token stream that
must decode each next-step scalar sequentially (m+1 forward passes per
environment step), and a bootstrap-trained ensemble of diagonal-Gaussian
MLPs predicting padded next states and rewards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoding, training
from . import tensor_core as tc
from .tensor_core import Tensor

LOG_EPS = 1e-12


# ---------------------------------------------------------------------------
# flattened 1-D attention model ("token-per-scalar" transformer)


@dataclass(frozen=True)
class TdmConfig:
    num_blocks: int = 6
    num_heads: int = 4
    hidden: int = 256
    ffn_hidden: tuple = (1024, 256)
    context: int = 20          # timesteps; flat length is context * M
    num_bins: int = 128
    max_variates: int = 110
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.num_heads != 0:
            raise ValueError(
                f"hidden {self.hidden} not divisible by heads {self.num_heads}")
        object.__setattr__(self, "ffn_hidden", tuple(self.ffn_hidden))

    @property
    def head_dim(self):
        return self.hidden // self.num_heads

    @property
    def max_flat(self):
        return self.context * self.max_variates


def tdm_init_params(cfg: TdmConfig, rng):
    d = cfg.hidden
    h1, h2 = cfg.ffn_hidden

    def normal(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    p = {
        "w_in": normal((cfg.num_bins, d)),
        "w_out": normal((d, cfg.num_bins)),
        "te": normal((cfg.max_flat, d)),   # absolute flat-position table
        "ve": normal((cfg.max_variates, d)),
        "pe": normal((2, d)),
        "final_ln.g": ones(d),
        "final_ln.b": zeros(d),
    }
    for l in range(cfg.num_blocks):
        p[f"b{l}.attn.ln.g"] = ones(d)
        p[f"b{l}.attn.ln.b"] = zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"b{l}.attn.{w}"] = normal((d, d))
        p[f"b{l}.ffn.ln.g"] = ones(d)
        p[f"b{l}.ffn.ln.b"] = zeros(d)
        p[f"b{l}.ffn.w1"] = normal((d, h1))
        p[f"b{l}.ffn.b1"] = zeros(h1)
        p[f"b{l}.ffn.w2"] = normal((h1, h2))
        p[f"b{l}.ffn.b2"] = zeros(h2)
        p[f"b{l}.ffn.w3"] = normal((h2, d))
        p[f"b{l}.ffn.b3"] = zeros(d)
    return p


def _selector(indices, rows):
    sel = np.zeros((len(indices), rows))
    sel[np.arange(len(indices)), np.asarray(indices)] = 1.0
    return Tensor(sel)


def tdm_forward(params, cfg: TdmConfig, Q_flat, m, M):
    """Causal 1-D transformer over the flattened token stream.

    Q_flat is (..., S, B) with tokens in row-major scalarize order
    (S = T * M, possibly with a partially decoded final row). Returns
    next-token bin probabilities of the same shape.
    """
    q = Q_flat if isinstance(Q_flat, Tensor) else Tensor(Q_flat)
    S = q.shape[-2]
    if S > cfg.max_flat:
        raise ValueError(f"flat length {S} exceeds positional table {cfg.max_flat}")
    d, H = cfg.hidden, cfg.num_heads
    cols = np.arange(S) % M
    z = tc.matmul(q, params["w_in"])
    z = tc.add(z, tc.matmul(_selector(range(S), cfg.max_flat), params["te"]))
    z = tc.add(z, tc.matmul(_selector(cols, cfg.max_variates), params["ve"]))
    pe_pick = np.zeros((S, 2))
    pe_pick[np.arange(S), (cols <= m).astype(int)] = 1.0
    z = tc.add(z, tc.matmul(Tensor(pe_pick), params["pe"]))
    *lead, _, _ = q.shape
    n_batch = int(np.prod(lead)) if lead else 1
    for l in range(cfg.num_blocks):
        ln = tc.layer_norm(z, params[f"b{l}.attn.ln.g"], params[f"b{l}.attn.ln.b"])
        qh, kh, vh = (tc.transpose(
            tc.reshape(tc.matmul(ln, params[f"b{l}.attn.{w}"]),
                       (n_batch, S, H, d // H)), (0, 2, 1, 3))
            for w in ("wq", "wk", "wv"))
        out = tc.attention(qh, kh, vh, causal=True)
        out = tc.reshape(tc.transpose(out, (0, 2, 1, 3)), tuple(lead) + (S, d))
        z = tc.add(z, tc.matmul(out, params[f"b{l}.attn.wo"]))
        ln = tc.layer_norm(z, params[f"b{l}.ffn.ln.g"], params[f"b{l}.ffn.ln.b"])
        h = tc.gelu(tc.add(tc.matmul(ln, params[f"b{l}.ffn.w1"]),
                           params[f"b{l}.ffn.b1"]))
        h = tc.gelu(tc.add(tc.matmul(h, params[f"b{l}.ffn.w2"]),
                           params[f"b{l}.ffn.b2"]))
        h = tc.add(tc.matmul(h, params[f"b{l}.ffn.w3"]), params[f"b{l}.ffn.b3"])
        z = tc.add(z, h)
    z = tc.layer_norm(z, params["final_ln.g"], params["final_ln.b"])
    return tc.softmax(tc.matmul(z, params["w_out"]), axis=-1)


def tdm_loss(P, Q_target, m, M):
    """Next-token cross-entropy, restricted to positions whose target is a
    state or reward token of a later timestep (action targets and the
    first row contribute nothing)."""
    target = np.asarray(Q_target.data if isinstance(Q_target, Tensor) else Q_target)
    if P.shape != target.shape:
        raise ValueError(f"shape mismatch: P {P.shape} vs target {target.shape}")
    S = target.shape[-2]
    shifted = np.zeros_like(target)
    shifted[..., :-1, :] = target[..., 1:, :]
    tgt_idx = np.arange(1, S + 1)  # flat index of the token being predicted
    weight = ((tgt_idx < S) & (tgt_idx % M <= m) & (tgt_idx >= M)).astype(float)
    logp = tc.log_(tc.add(P, Tensor(np.full((), LOG_EPS))))
    per_bin = tc.mul(logp, Tensor(shifted * weight[:, None]))
    return tc.neg(tc.sum_(per_bin))


class TdmPredictor:
    """Sequential next-row decoder with an instrumented forward-pass
    counter: each of the m+1 next-row scalars costs one full forward."""

    def __init__(self, params, cfg: TdmConfig, stats, m):
        self.params = params
        self.cfg = cfg
        self.stats = stats
        self.m = m
        self.forward_passes = 0

    def predict_next(self, window, mode="expectation", rng=None):
        """Decode the next (state, reward) from a (T, M) window of
        completed scalar rows."""
        window = np.asarray(window, dtype=np.float64)
        if window.shape[0] >= self.cfg.context:
            window = window[window.shape[0] - self.cfg.context + 1:]
        M = window.shape[1]
        tokens = list(encoding.encode_grid_gauss(window, self.stats)
                      .reshape(-1, self.cfg.num_bins))
        decoded = []
        for j in range(self.m + 1):
            P = tdm_forward(self.params, self.cfg, np.stack(tokens),
                            self.m, M)
            self.forward_passes += 1
            bins = self.stats.variate(j)
            p = P.data[-1]
            if mode == "expectation":
                value = encoding.decode_expectation(p, bins)
            else:
                value = encoding.decode_sample(p, bins, rng)
            decoded.append(value)
            sigma = encoding.DEFAULT_SIGMA_SCALE * bins.width
            tokens.append(encoding.encode_gauss_hist(value, bins, sigma))
        return np.array(decoded[:self.m]), decoded[self.m]


# ---------------------------------------------------------------------------
# diagonal-Gaussian MLP ensemble


LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class MlpEnsembleConfig:
    hidden: tuple = (640, 640, 640, 640)
    ensemble_size: int = 7
    num_elites: int = 5
    state_pad: int = 90
    action_pad: int = 30
    lr: float = 1e-3
    train_steps: int = 500
    batch_size: int = 64
    val_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_elites <= self.ensemble_size:
            raise ValueError("need 1 <= elites <= ensemble size")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def input_dim(self):
        return self.state_pad + self.action_pad

    @property
    def output_dim(self):
        return self.state_pad + 1   # padded next state plus reward


def _mlp_init(cfg: MlpEnsembleConfig, rng):
    sizes = (cfg.input_dim,) + cfg.hidden + (2 * cfg.output_dim,)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = 1.0 / math.sqrt(fan_in)
        params[f"w{i}"] = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)),
                                 requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return params


def _soft_clamp(x, lo, hi):
    # smooth clamp keeping gradients alive near the bounds
    x = tc.sub(Tensor(np.full((), hi)), tc.softplus(tc.sub(Tensor(np.full((), hi)), x)))
    return tc.add(Tensor(np.full((), lo)), tc.softplus(tc.sub(x, Tensor(np.full((), lo)))))


def _mlp_forward(params, cfg: MlpEnsembleConfig, x):
    h = x if isinstance(x, Tensor) else Tensor(x)
    depth = len(cfg.hidden)
    for i in range(depth):
        h = tc.gelu(tc.add(tc.matmul(h, params[f"w{i}"]), params[f"b{i}"]))
    out = tc.add(tc.matmul(h, params[f"w{depth}"]), params[f"b{depth}"])
    D = cfg.output_dim
    mean = tc.matmul(out, Tensor(np.eye(2 * D)[:, :D]))
    logvar = tc.matmul(out, Tensor(np.eye(2 * D)[:, D:]))
    return mean, _soft_clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


def gaussian_nll(mean, logvar, target):
    """Mean per-sample diagonal-Gaussian negative log-likelihood."""
    target = Tensor(np.asarray(target))
    diff = tc.sub(target, mean)
    inv_var = tc.exp_(tc.neg(logvar))
    per_dim = tc.add(tc.add(tc.mul(tc.mul(diff, diff), inv_var), logvar),
                     Tensor(np.full((), math.log(2.0 * math.pi))))
    return tc.scale(tc.mean_(tc.sum_(per_dim, axis=-1)), 0.5)


def pad_transitions(states, actions, next_states, rewards,
                    cfg: MlpEnsembleConfig):
    """Zero-pad raw transitions to the fixed (state_pad, action_pad) input
    and (state_pad + 1) target layout."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    next_states = np.atleast_2d(next_states)
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    N, m = states.shape
    n = actions.shape[1]
    if m > cfg.state_pad or n > cfg.action_pad:
        raise ValueError(f"dims ({m}, {n}) exceed pad sizes "
                         f"({cfg.state_pad}, {cfg.action_pad})")
    X = np.zeros((N, cfg.input_dim))
    X[:, :m] = states
    X[:, cfg.state_pad:cfg.state_pad + n] = actions
    Y = np.zeros((N, cfg.output_dim))
    Y[:, :m] = next_states
    Y[:, -1] = rewards
    return X, Y


def transitions_from_manifest(manifest):
    """Flatten a manifest into (states, actions, next_states, rewards)."""
    s, a, s2, r = [], [], [], []
    for rec in manifest.all_records():
        s.append(rec.states[:-1])
        a.append(rec.actions)
        s2.append(rec.states[1:])
        r.append(rec.rewards)
    return (np.concatenate(s), np.concatenate(a), np.concatenate(s2),
            np.concatenate(r))


@dataclass
class MlpEnsemble:
    cfg: MlpEnsembleConfig
    members: list              # param dicts
    val_nll: np.ndarray        # (ensemble_size,)
    elites: np.ndarray         # indices, lowest validation NLL first
    state_dim: int
    action_dim: int


def mlp_ensemble_train(states, actions, next_states, rewards,
                       cfg: MlpEnsembleConfig) -> MlpEnsemble:
    """Train each member on its own bootstrap resample (same size as the
    dataset, drawn with replacement); elites are the members with the
    lowest NLL on a shared held-out split."""
    X, Y = pad_transitions(states, actions, next_states, rewards, cfg)
    N = X.shape[0]
    if N < 2:
        raise ValueError("need at least 2 transitions")
    split_rng = tc.counter_rng(cfg.seed, 0x56414C)
    perm = split_rng.permutation(N)
    n_val = max(1, int(round(N * cfg.val_ratio)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    members, val_nll = [], []
    for k in range(cfg.ensemble_size):
        rng = tc.counter_rng(cfg.seed, k, 0x454E53)
        params = _mlp_init(cfg, rng)
        boot = rng.integers(len(train_idx), size=len(train_idx))
        Xb, Yb = X[train_idx[boot]], Y[train_idx[boot]]
        opt = training.AdamState.init(params)
        for step in range(cfg.train_steps):
            take = rng.integers(Xb.shape[0], size=min(cfg.batch_size, Xb.shape[0]))
            with tc.GradTape() as tape:
                mean, logvar = _mlp_forward(params, cfg, Xb[take])
                nll = gaussian_nll(mean, logvar, Yb[take])
                tape.backward(nll)
            opt.step += 1
            bc1 = 1.0 - training.ADAM_BETA1 ** opt.step
            bc2 = 1.0 - training.ADAM_BETA2 ** opt.step
            for key in sorted(params):
                g = params[key].grad
                if g is None:
                    continue
                opt.m[key] = training.ADAM_BETA1 * opt.m[key] \
                    + (1 - training.ADAM_BETA1) * g
                opt.v[key] = training.ADAM_BETA2 * opt.v[key] \
                    + (1 - training.ADAM_BETA2) * g * g
                update = (opt.m[key] / bc1) / (np.sqrt(opt.v[key] / bc2)
                                               + training.ADAM_EPS)
                params[key].data = params[key].data - cfg.lr * update
                params[key].grad = None
        mean, logvar = _mlp_forward(params, cfg, X[val_idx])
        val_nll.append(gaussian_nll(mean, logvar, Y[val_idx]).item())
        members.append(params)
    val_nll = np.array(val_nll)
    elites = np.argsort(val_nll, kind="stable")[:cfg.num_elites]
    m = np.atleast_2d(states).shape[1]
    n = np.atleast_2d(actions).shape[1]
    return MlpEnsemble(cfg=cfg, members=members, val_nll=val_nll,
                       elites=elites, state_dim=m, action_dim=n)


def mlp_ensemble_predict(ensemble: MlpEnsemble, s, a, rng,
                         deterministic=True):
    """Predict (next state, reward) with one uniformly sampled elite."""
    if len(ensemble.elites) == 0:
        raise ValueError("ensemble has no elites")
    cfg = ensemble.cfg
    X, _ = pad_transitions(np.atleast_2d(s), np.atleast_2d(a),
                           np.zeros((1, ensemble.state_dim)), [0.0], cfg)
    k = ensemble.elites[int(rng.integers(len(ensemble.elites)))]
    mean, logvar = _mlp_forward(ensemble.members[k], cfg, X)
    mu = mean.data[0]
    var = np.maximum(np.exp(logvar.data[0]), VARIANCE_FLOOR)
    out = mu if deterministic else mu + np.sqrt(var) * rng.normal(size=mu.shape)
    return out[:ensemble.state_dim], float(out[-1])


def mlp_ensemble_variance(ensemble: MlpEnsemble, s, a):
    """Floored predictive variances of every member (invariant check)."""
    cfg = ensemble.cfg
    X, _ = pad_transitions(np.atleast_2d(s), np.atleast_2d(a),
                           np.zeros((1, ensemble.state_dim)), [0.0], cfg)
    out = []
    for params in ensemble.members:
        _, logvar = _mlp_forward(params, cfg, X)
        out.append(np.maximum(np.exp(logvar.data[0]), VARIANCE_FLOOR))
    return np.stack(out)
