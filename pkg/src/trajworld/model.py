"""The trajectory dynamics network.

Input is a T x M x B categorical grid. Bin vectors are linearly embedded
and summed with timestep, variate and prediction-target embeddings; L
pre-norm blocks then interleave causal attention along the time axis
(per variate column) with unmasked attention across variates (per
timestep), each followed by a feedforward network. A linear head with
softmax yields next-step bin distributions; the loss is cross-entropy of
each position's prediction against the following timestep, restricted to
state and reward columns.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

LOG_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 6
    num_heads: int = 4
    hidden: int = 256
    ffn_hidden: tuple = (1024, 256)
    context: int = 20          # max timesteps T
    num_bins: int = 128
    max_variates: int = 110    # VE table size; covers the padded baseline dims
    dropout: float = 0.05

    def __post_init__(self):
        if self.hidden % self.num_heads != 0:
            raise ValueError(
                f"hidden {self.hidden} not divisible by heads {self.num_heads}")
        if self.context < 2:
            raise ValueError("context must be >= 2")
        object.__setattr__(self, "ffn_hidden", tuple(self.ffn_hidden))

    @property
    def head_dim(self):
        return self.hidden // self.num_heads

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)

    def digest(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _normal(rng, shape, std=0.02):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_params(cfg: ModelConfig, rng):
    """Fresh parameter dict; keys are stable, sorted iteration is canonical."""
    d = cfg.hidden
    p = {
        "w_in": _normal(rng, (cfg.num_bins, d)),
        "w_out": _normal(rng, (d, cfg.num_bins)),
        "te": _normal(rng, (cfg.context, d)),
        "ve": _normal(rng, (cfg.max_variates, d)),
        "pe": _normal(rng, (2, d)),
        "final_ln.g": _ones(d),
        "final_ln.b": _zeros(d),
    }
    h1, h2 = cfg.ffn_hidden
    for l in range(cfg.num_blocks):
        for attn in ("t_attn", "v_attn"):
            p[f"b{l}.{attn}.ln.g"] = _ones(d)
            p[f"b{l}.{attn}.ln.b"] = _zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"b{l}.{attn}.{w}"] = _normal(rng, (d, d))
        for ffn in ("ffn1", "ffn2"):
            p[f"b{l}.{ffn}.ln.g"] = _ones(d)
            p[f"b{l}.{ffn}.ln.b"] = _zeros(d)
            p[f"b{l}.{ffn}.w1"] = _normal(rng, (d, h1))
            p[f"b{l}.{ffn}.b1"] = _zeros(h1)
            p[f"b{l}.{ffn}.w2"] = _normal(rng, (h1, h2))
            p[f"b{l}.{ffn}.b2"] = _zeros(h2)
            p[f"b{l}.{ffn}.w3"] = _normal(rng, (h2, d))
            p[f"b{l}.{ffn}.b3"] = _zeros(d)
    return p


def param_count(params):
    return sum(t.size for t in params.values())


@dataclass
class _Ctx:
    """Per-forward bookkeeping: dropout stream ids and capture hooks."""

    cfg: ModelConfig
    train: bool = False
    seed: int = 0
    step: int = 0
    layer_id: int = 0
    capture_attn: dict | None = None
    capture_kv: list | None = None
    kv_cache: list | None = None
    t_offset: int = 0

    def drop(self, x):
        self.layer_id += 1
        if not self.train or self.cfg.dropout == 0.0:
            return x
        return tc.dropout(x, self.cfg.dropout, self.seed, self.layer_id,
                          self.step)


def _selector(indices, table_rows):
    """Constant one-hot matrix picking rows of an embedding table."""
    sel = np.zeros((len(indices), table_rows))
    sel[np.arange(len(indices)), indices] = 1.0
    return Tensor(sel)


def embed(params, cfg: ModelConfig, Q, m, t_offset=0):
    """Input embedding: W_in Q + TE(timestep) + VE(variate) + PE(target?).

    PE row 1 marks prediction targets (state and reward columns), row 0
    the action columns. Q has shape (..., T, M, B); timestep indices start
    at ``t_offset`` (nonzero only for incremental decoding).
    """
    q = Q if isinstance(Q, Tensor) else Tensor(Q)
    T, M = q.shape[-3], q.shape[-2]
    if t_offset + T > cfg.context:
        raise ValueError(f"T={t_offset + T} exceeds configured context {cfg.context}")
    if M > cfg.max_variates:
        raise ValueError(f"M={M} exceeds configured max_variates {cfg.max_variates}")
    z = tc.matmul(q, params["w_in"])
    te = tc.matmul(_selector(range(t_offset, t_offset + T), cfg.context),
                   params["te"])
    ve = tc.matmul(_selector(range(M), cfg.max_variates), params["ve"])
    pe_pick = np.zeros((M, 2), dtype=int)
    pe_pick[np.arange(M), (np.arange(M) <= m).astype(int)] = 1
    pe = tc.matmul(Tensor(pe_pick.astype(float)), params["pe"])
    z = tc.add(z, tc.reshape(te, (T, 1, cfg.hidden)))
    z = tc.add(z, ve)
    z = tc.add(z, pe)
    return z


def _heads_split(x, H):
    # (..., S, d) -> (batch, H, S, dh) with leading axes flattened into batch
    *lead, S, d = x.shape
    n = int(np.prod(lead)) if lead else 1
    x = tc.reshape(x, (n, S, H, d // H))
    return tc.transpose(x, (0, 2, 1, 3))


def _heads_merge(x, lead, d):
    x = tc.transpose(x, (0, 2, 1, 3))  # (batch, S, H, dh)
    return tc.reshape(x, tuple(lead) + (x.shape[1], d))


def _attention_sublayer(params, cfg, x, prefix, causal, ctx, block):
    """Pre-norm multi-head attention over the last-but-one axis of x."""
    d, H = cfg.hidden, cfg.num_heads
    ln = tc.layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    q = tc.matmul(ln, params[f"{prefix}.wq"])
    k = tc.matmul(ln, params[f"{prefix}.wk"])
    v = tc.matmul(ln, params[f"{prefix}.wv"])
    *lead, S, _ = x.shape
    qh, kh, vh = (_heads_split(t, H) for t in (q, k, v))
    if ctx.kv_cache is not None and prefix.endswith("t_attn"):
        cached = ctx.kv_cache[block]
        kh = Tensor(np.concatenate([cached["k"], kh.data], axis=2))
        vh = Tensor(np.concatenate([cached["v"], vh.data], axis=2))
        cached["k"], cached["v"] = kh.data, vh.data
    if ctx.capture_kv is not None and prefix.endswith("t_attn"):
        ctx.capture_kv.append({"k": kh.data.copy(), "v": vh.data.copy()})
    want_weights = ctx.capture_attn is not None and prefix.endswith("v_attn")
    out = tc.attention(qh, kh, vh, causal=causal, return_weights=want_weights)
    if want_weights:
        out, weights = out
        ctx.capture_attn.setdefault("variate", []).append(
            weights.reshape(tuple(lead) + (H, S, S)))
    out = _heads_merge(out, lead, d)
    out = tc.matmul(out, params[f"{prefix}.wo"])
    return ctx.drop(out)


def _ffn_sublayer(params, cfg, x, prefix, ctx):
    ln = tc.layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    h = tc.gelu(tc.add(tc.matmul(ln, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = tc.gelu(tc.add(tc.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"]))
    h = tc.add(tc.matmul(h, params[f"{prefix}.w3"]), params[f"{prefix}.b3"])
    return ctx.drop(h)


def _swap_time_variate(z):
    # (..., T, M, d) <-> (..., M, T, d)
    axes = list(range(z.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return tc.transpose(z, tuple(axes))


def _block(params, cfg, z, l, ctx):
    # temporal attention runs per variate column: put M on the batch side
    zt = _swap_time_variate(z)
    ut = tc.add(zt, _attention_sublayer(params, cfg, zt, f"b{l}.t_attn",
                                        causal=True, ctx=ctx, block=l))
    u = _swap_time_variate(ut)
    u = tc.add(u, _ffn_sublayer(params, cfg, u, f"b{l}.ffn1", ctx))
    v = tc.add(u, _attention_sublayer(params, cfg, u, f"b{l}.v_attn",
                                      causal=False, ctx=ctx, block=l))
    z = tc.add(v, _ffn_sublayer(params, cfg, v, f"b{l}.ffn2", ctx))
    if not np.all(np.isfinite(z.data)):
        raise tc.NonFiniteError(f"non-finite activation after block {l}")
    return z


def forward(params, cfg: ModelConfig, Q, m, *, train=False, seed=0, step=0,
            capture_attn=None):
    """Full forward pass: (..., T, M, B) categorical grid -> prediction
    probabilities of identical shape, softmax-normalized over bins."""
    ctx = _Ctx(cfg=cfg, train=train, seed=seed, step=step,
               capture_attn=capture_attn)
    z = embed(params, cfg, Q, m)
    for l in range(cfg.num_blocks):
        z = _block(params, cfg, z, l, ctx)
    z = tc.layer_norm(z, params["final_ln.g"], params["final_ln.b"])
    logits = tc.matmul(z, params["w_out"])
    return tc.softmax(logits, axis=-1)


def loss(P, Q_target, m, mask=None):
    """Next-step cross-entropy: position i is scored against the encoded
    target at i+1, over state and reward columns only. ``mask`` (.., T)
    marks real (non-padded) rows; a position contributes only when both
    its row and the target row are real."""
    target = np.asarray(Q_target.data if isinstance(Q_target, Tensor) else Q_target)
    if P.shape != target.shape:
        raise ValueError(f"shape mismatch: P {P.shape} vs target {target.shape}")
    T, M, B = target.shape[-3], target.shape[-2], target.shape[-1]
    shifted = np.zeros_like(target)
    shifted[..., :-1, :, :] = target[..., 1:, :, :]
    weight = np.zeros(target.shape[:-1])
    if mask is None:
        weight[..., :T - 1, :m + 1] = 1.0
    else:
        mask = np.asarray(mask, dtype=bool)
        valid = mask[..., :-1] & mask[..., 1:]
        weight[..., :T - 1, :m + 1] = valid[..., None].astype(float)
    # guard only underflowed probabilities so well-behaved ones log exactly
    bump = np.where(P.data < LOG_EPS, LOG_EPS, 0.0)
    logp = tc.log_(tc.add(P, Tensor(bump)))
    per_bin = tc.mul(logp, Tensor(shifted * weight[..., None]))
    return tc.neg(tc.sum_(per_bin))


def valid_prediction_count(shape, m, mask=None):
    """Number of (position, column) pairs contributing to the loss."""
    T = shape[-3]
    if mask is None:
        batch = int(np.prod(shape[:-3])) if len(shape) > 3 else 1
        return batch * (T - 1) * (m + 1)
    mask = np.asarray(mask, dtype=bool)
    return int((mask[..., :-1] & mask[..., 1:]).sum()) * (m + 1)


# ---------------------------------------------------------------------------
# spec-level views of the two attention sublayers (used by tests)


def temporal_attention(params, cfg, Z, block=0):
    """The causal temporal-attention sublayer of one block (no residual)."""
    ctx = _Ctx(cfg=cfg)
    zt = _swap_time_variate(Z if isinstance(Z, Tensor) else Tensor(Z))
    out = _attention_sublayer(params, cfg, zt, f"b{block}.t_attn",
                              causal=True, ctx=ctx, block=block)
    return _swap_time_variate(out)


def variate_attention(params, cfg, U, block=0, capture_attn=None):
    """The unmasked variate-attention sublayer of one block (no residual)."""
    ctx = _Ctx(cfg=cfg, capture_attn=capture_attn)
    u = U if isinstance(U, Tensor) else Tensor(U)
    return _attention_sublayer(params, cfg, u, f"b{block}.v_attn",
                               causal=False, ctx=ctx, block=block)


# ---------------------------------------------------------------------------
# incremental decoding with cached temporal keys/values


def forward_capture_kv(params, cfg: ModelConfig, Q, m):
    """Forward over one unbatched (T, M, B) grid, returning (P, kv) where
    kv[l] holds that block's temporal keys/values, shape (M, H, T, dh)."""
    ctx = _Ctx(cfg=cfg, capture_kv=[])
    z = embed(params, cfg, Q, m)
    for l in range(cfg.num_blocks):
        z = _block(params, cfg, z, l, ctx)
    z = tc.layer_norm(z, params["final_ln.g"], params["final_ln.b"])
    P = tc.softmax(tc.matmul(z, params["w_out"]), axis=-1)
    return P, ctx.capture_kv


def forward_incremental(params, cfg: ModelConfig, kv, q_row, m, t_index):
    """Extend cached decoding by one timestep.

    ``kv`` is the list from forward_capture_kv (mutated in place: each
    block gains one key/value column). ``q_row`` is the (M, B) encoding of
    the new row at timestep ``t_index``. Returns the (M, B) prediction row.
    """
    if t_index >= cfg.context:
        raise ValueError(f"t_index {t_index} outside context {cfg.context}")
    ctx = _Ctx(cfg=cfg, kv_cache=kv)
    q = np.asarray(q_row)[None, :, :]  # (T=1, M, B)
    z = embed(params, cfg, q, m, t_offset=t_index)
    for l in range(cfg.num_blocks):
        z = _block(params, cfg, z, l, ctx)
    z = tc.layer_norm(z, params["final_ln.g"], params["final_ln.b"])
    P = tc.softmax(tc.matmul(z, params["w_out"]), axis=-1)
    return P.data[0]
