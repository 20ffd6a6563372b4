"""Pre-training and fine-tuning loops.

Adam with decoupled weight decay, global-norm gradient clipping and a
warmup-cosine learning-rate schedule. All randomness (batch sampling,
dropout) is derived counter-style from (seed, step), so training is
bitwise reproducible and checkpoint resume replays the identical stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataset, encoding, model
from . import tensor_core as tc
from .tensor_core import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_VAL_STREAM = 0x5641  # rng domain separators
_BATCH_STREAM = 0x4241


@dataclass
class TrainConfig:
    total_steps: int = 20_000
    batch_size: int = 64
    peak_lr: float = 1e-4
    warmup_steps: int = 1000
    weight_decay: float = 1e-5
    grad_clip_norm: float = 0.25
    seed: int = 0
    eval_every: int = 500
    mode: str = "pretrain"
    val_ratio: float = 0.1
    patience: int = 10          # fine-tuning early stop, in evals
    sigma_scale: float = encoding.DEFAULT_SIGMA_SCALE

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.total_steps > 0 and not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        for name in ("batch_size", "peak_lr", "grad_clip_norm", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def finetune_defaults(**overrides) -> TrainConfig:
    """Desk-scale fine-tuning defaults (lower peak LR, shorter run)."""
    base = dict(total_steps=5000, peak_lr=1e-5, warmup_steps=250,
                mode="finetune", eval_every=250)
    base.update(overrides)
    return TrainConfig(**base)


def lr_schedule(step, cfg: TrainConfig):
    """Linear 0 -> peak over warmup, then cosine peak -> 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span if span > 0 else 1.0
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params):
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def clip_global_norm(grads, max_norm):
    """Scale the gradient dict so its global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        grads = {k: g * factor for k, g in grads.items()}
        return grads, total
    return grads, total


def encode_batch(batch: dataset.Batch, stats: dataset.BinStats, sigma_scale):
    """Gaussian-histogram inputs, one-hot targets."""
    q_in = encoding.encode_grid_gauss(batch.values, stats, sigma_scale)
    q_tgt = encoding.encode_grid_onehot(batch.values, stats)
    return q_in, q_tgt


def train_step(params, batch, opt_state: AdamState, cfg: TrainConfig, *,
               model_cfg: model.ModelConfig, stats: dataset.BinStats,
               step: int):
    """One clipped Adam update on a single-environment batch.

    Params are updated in place and returned. Metrics report the
    per-position loss, pre-clip gradient norm and the applied LR.
    """
    m = batch.env_spec.state_dim
    q_in, q_tgt = encode_batch(batch, stats, cfg.sigma_scale)
    with tc.GradTape() as tape:
        P = model.forward(params, model_cfg, q_in, m, train=True,
                          seed=cfg.seed, step=step)
        total = model.loss(P, q_tgt, m, mask=batch.mask)
        count = model.valid_prediction_count(q_tgt.shape, m, batch.mask)
        objective = tc.scale(total, 1.0 / max(count, 1))
        loss_value = objective.item()
        if not math.isfinite(loss_value):
            raise tc.NonFiniteError(f"non-finite loss at step {step}")
        tape.backward(objective)
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    grads, raw_norm = clip_global_norm(grads, cfg.grad_clip_norm)
    lr = lr_schedule(step, cfg)
    opt_state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** opt_state.step
    bc2 = 1.0 - ADAM_BETA2 ** opt_state.step
    for k in sorted(grads):
        g = grads[k]
        opt_state.m[k] = ADAM_BETA1 * opt_state.m[k] + (1 - ADAM_BETA1) * g
        opt_state.v[k] = ADAM_BETA2 * opt_state.v[k] + (1 - ADAM_BETA2) * g * g
        update = (opt_state.m[k] / bc1) / (np.sqrt(opt_state.v[k] / bc2) + ADAM_EPS)
        p = params[k]
        p.data = p.data - lr * update - lr * cfg.weight_decay * p.data
        p.grad = None
    metrics = {"step": step, "loss": loss_value, "lr": lr,
               "grad_norm": raw_norm}
    return params, opt_state, metrics


def _step_rng(seed, step, stream):
    return tc.counter_rng(seed, step, stream)


def validation_loss(params, model_cfg, cfg, sources, weights, stats_by_env,
                    step, batches=4):
    """Mean per-position loss over freshly sampled held-out batches."""
    rng = _step_rng(cfg.seed, step, _VAL_STREAM)
    total, count = 0.0, 0
    for _ in range(batches):
        batch = dataset.sample_batch(sources, weights, cfg.batch_size,
                                     model_cfg.context, rng)
        stats = stats_by_env[batch.env_spec.env_id]
        m = batch.env_spec.state_dim
        q_in, q_tgt = encode_batch(batch, stats, cfg.sigma_scale)
        P = model.forward(params, model_cfg, q_in, m)
        total += model.loss(P, q_tgt, m, mask=batch.mask).item()
        count += model.valid_prediction_count(q_tgt.shape, m, batch.mask)
    return total / max(count, 1)


@dataclass
class Checkpoint:
    """Everything needed to resume training or run the model."""

    params: dict
    model_cfg: model.ModelConfig
    bin_stats: dict            # env_id -> BinStats
    step: int = 0
    opt_state: AdamState | None = None
    config_hash: str = ""

    def save(self, path):
        """Write <path>.twck (weights + Adam moments) and <path>.json."""
        path = Path(path)
        named = {f"param/{k}": t.data for k, t in self.params.items()}
        if self.opt_state is not None:
            named.update({f"adam_m/{k}": v for k, v in self.opt_state.m.items()})
            named.update({f"adam_v/{k}": v for k, v in self.opt_state.v.items()})
        tc.save_checkpoint(path.with_suffix(".twck"), named)
        meta = {
            "model_cfg": self.model_cfg.to_json(),
            "step": self.step,
            "opt_step": self.opt_state.step if self.opt_state else None,
            "config_hash": self.config_hash or self.model_cfg.digest(),
            "bin_stats": {k: v.to_json() for k, v in self.bin_stats.items()},
        }
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        path = Path(path)
        named = tc.load_checkpoint(path.with_suffix(".twck"))
        with open(path.with_suffix(".json")) as fh:
            meta = json.load(fh)
        params, adam_m, adam_v = {}, {}, {}
        for key, arr in named.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                params[name] = Tensor(arr, requires_grad=True)
            elif kind == "adam_m":
                adam_m[name] = arr
            elif kind == "adam_v":
                adam_v[name] = arr
        opt_state = None
        if adam_m:
            opt_state = AdamState(m=adam_m, v=adam_v,
                                  step=meta.get("opt_step") or 0)
        return cls(
            params=params,
            model_cfg=model.ModelConfig.from_json(meta["model_cfg"]),
            bin_stats={k: dataset.BinStats.from_json(v)
                       for k, v in meta["bin_stats"].items()},
            step=meta["step"],
            opt_state=opt_state,
            config_hash=meta.get("config_hash", ""),
        )


def _prepare_sources(sources, num_bins, val_ratio, seed):
    """Bin stats per env plus a train/val episode split per source."""
    stats_by_env, train_sources, val_sources = {}, [], []
    for i, src in enumerate(sources):
        if not src.bin_stats:
            dataset.compute_all_bin_stats(src, num_bins)
        stats_by_env.update(src.bin_stats)
        rng = tc.counter_rng(seed, i, 0x53504C)
        train, val = dataset.split_train_val(src, 1.0 - val_ratio, rng)
        # keep the caller's source names so sampling weights apply to both
        train.name = src.name
        val.name = src.name
        train_sources.append(train)
        val_sources.append(val)
    return stats_by_env, train_sources, val_sources


def pretrain(sources, weights, cfg: TrainConfig,
             model_cfg: model.ModelConfig, *, init=None, start_step=0,
             stop_step=None, opt_state=None):
    """Train over weighted multi-source batches; returns (Checkpoint, metrics).

    ``init``/``start_step``/``opt_state`` allow resuming from a checkpoint
    and ``stop_step`` halts mid-schedule without changing it; the sampling
    and dropout streams are keyed by step, so a resumed run replays the
    exact remaining stream. ``init`` is updated in place; pass copies to
    keep the original parameters.
    """
    if not sources:
        raise ValueError("need at least one source")
    end_step = cfg.total_steps if stop_step is None else stop_step
    if not start_step <= end_step <= cfg.total_steps:
        raise ValueError("need start_step <= stop_step <= total_steps")
    stats_by_env, train_sources, val_sources = _prepare_sources(
        sources, model_cfg.num_bins, cfg.val_ratio, cfg.seed)
    rng_init = tc.counter_rng(cfg.seed, 0x494E4954)
    params = init if init is not None else model.init_params(model_cfg, rng_init)
    opt_state = opt_state or AdamState.init(params)
    metrics = []
    for step in range(start_step, end_step):
        rng = _step_rng(cfg.seed, step, _BATCH_STREAM)
        batch = dataset.sample_batch(train_sources, weights, cfg.batch_size,
                                     model_cfg.context, rng)
        stats = stats_by_env[batch.env_spec.env_id]
        params, opt_state, row = train_step(
            params, batch, opt_state, cfg, model_cfg=model_cfg, stats=stats,
            step=step)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps:
            row["val_loss"] = validation_loss(
                params, model_cfg, cfg, val_sources, weights, stats_by_env,
                step)
        metrics.append(row)
    ckpt = Checkpoint(params=params, model_cfg=model_cfg,
                      bin_stats=stats_by_env, step=end_step,
                      opt_state=opt_state, config_hash=model_cfg.digest())
    return ckpt, metrics


def finetune(checkpoint: Checkpoint, manifest: dataset.DatasetManifest,
             cfg: TrainConfig):
    """Fine-tune a checkpoint on one dataset; returns (Checkpoint, metrics).

    Bin statistics are recomputed from the fine-tuning data (embeddings are
    reused positionally). Early-stops when validation loss fails to improve
    for ``cfg.patience`` consecutive evals, restoring the best parameters.
    """
    model_cfg = checkpoint.model_cfg
    for entry in manifest.entries:
        if entry.env_spec.num_variates > model_cfg.max_variates:
            raise ValueError(
                f"{entry.env_spec.env_id}: {entry.env_spec.num_variates} "
                f"variates exceed max_variates {model_cfg.max_variates}")
    params = {k: Tensor(t.data.copy(), requires_grad=True)
              for k, t in checkpoint.params.items()}
    if cfg.total_steps == 0:
        stats = dict(checkpoint.bin_stats)
        return Checkpoint(params=params, model_cfg=model_cfg, bin_stats=stats,
                          step=checkpoint.step,
                          config_hash=model_cfg.digest()), []
    manifest.bin_stats = {}
    dataset.compute_all_bin_stats(manifest, model_cfg.num_bins)
    stats_by_env, train_sources, val_sources = _prepare_sources(
        [manifest], model_cfg.num_bins, cfg.val_ratio, cfg.seed)
    weights = {train_sources[0].name: 1.0}
    val_weights = {val_sources[0].name: 1.0}
    opt_state = AdamState.init(params)
    metrics = []
    best_val, best_params, stale = math.inf, None, 0
    for step in range(cfg.total_steps):
        rng = _step_rng(cfg.seed, step, _BATCH_STREAM)
        batch = dataset.sample_batch(train_sources, weights, cfg.batch_size,
                                     model_cfg.context, rng)
        stats = stats_by_env[batch.env_spec.env_id]
        params, opt_state, row = train_step(
            params, batch, opt_state, cfg, model_cfg=model_cfg, stats=stats,
            step=step)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps:
            val = validation_loss(params, model_cfg, cfg, val_sources,
                                  val_weights, stats_by_env, step)
            row["val_loss"] = val
            if val < best_val - 1e-12:
                best_val, stale = val, 0
                best_params = {k: t.data.copy() for k, t in params.items()}
            else:
                stale += 1
            metrics.append(row)
            if stale >= cfg.patience:
                break
        else:
            metrics.append(row)
    if best_params is not None:
        for k, t in params.items():
            t.data = best_params[k]
    ckpt = Checkpoint(params=params, model_cfg=model_cfg,
                      bin_stats=stats_by_env, step=checkpoint.step + len(metrics),
                      opt_state=opt_state, config_hash=model_cfg.digest())
    return ckpt, metrics
