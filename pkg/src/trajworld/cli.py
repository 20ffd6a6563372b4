"""Command-line pipeline: data generation, training, evaluation, planning.

Each command takes an optional JSON config plus flag overrides (flags
win), writes a resolved-config snapshot next to its outputs, and seeds
all sampling from a single integer, so rerunning a command from its
snapshot reproduces every output byte for byte. Failures exit nonzero
with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset, envs, evaluation, model, reporting, training
from . import tensor_core as tc


class CliError(Exception):
    """User-facing configuration or input error."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def _seed_from(args, resolved):
    if getattr(args, "seed", None) is not None:
        return args.seed
    if resolved.get("seed") is not None:
        return int(resolved["seed"])
    return int(os.environ.get("TRAJWORLD_SEED", "0"))


def _resolve(defaults, args, keys):
    """defaults <- config file <- explicit flags; flags win."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}", field="config")
        with open(path) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CliError(f"invalid config JSON: {exc}", field="config")
        for key, value in loaded.items():
            if key not in resolved and key != "command":
                raise CliError(f"unknown config field {key!r}", field=key)
            resolved[key] = value
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    resolved["seed"] = _seed_from(args, resolved)
    return resolved


def _snapshot(resolved, command, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(resolved)
    payload["command"] = command
    reporting.write_json(out_dir / f"{command}_config.json", payload)


def _rng(seed, *tags):
    return tc.counter_rng(seed, *tags)


def _load_checkpoint(path):
    path = Path(path)
    if not path.with_suffix(".twck").is_file():
        raise CliError(f"checkpoint not found: {path}", field="checkpoint")
    return training.Checkpoint.load(path)


def _pick_stats(ckpt, env_id=None):
    if env_id is None:
        if len(ckpt.bin_stats) != 1:
            raise CliError("checkpoint covers several envs; pass --env-id",
                           field="env_id")
        env_id = next(iter(ckpt.bin_stats))
    if env_id not in ckpt.bin_stats:
        raise CliError(f"no bin statistics for env {env_id!r}", field="env_id")
    return env_id, ckpt.bin_stats[env_id]


# ---------------------------------------------------------------------------
# datagen


DATAGEN_DEFAULTS = {
    "env": "pendulum", "gravity": 10.0, "episodes": 50, "steps": 200,
    "policy": "mixed", "grid": False, "grid_train_envs": 60,
    "grid_hold_envs": 5, "out": "data", "seed": None,
}


def cmd_datagen(args):
    resolved = _resolve(DATAGEN_DEFAULTS, args, DATAGEN_DEFAULTS.keys())
    out = Path(resolved["out"])
    seed = resolved["seed"]
    _snapshot(resolved, "datagen", out)
    summaries = []
    if resolved["grid"]:
        g_train = np.linspace(8.0, 12.0, int(resolved["grid_train_envs"]))
        g_hold = np.linspace(6.5, 7.5, int(resolved["grid_hold_envs"]))
        train, hold = envs.build_parameter_grid(
            g_train, g_hold, episodes=int(resolved["episodes"]),
            T=int(resolved["steps"]), seed=seed)
        for split, manifests in (("train", train), ("holdout", hold)):
            for man in manifests:
                directory = out / split / man.entries[0].env_spec.env_id
                dataset.write_manifest(man, directory)
                summaries.append((split, man.name, man.episode_count,
                                  man.step_count))
    else:
        if resolved["env"] == "pendulum":
            params = envs.PendulumParams(gravity=float(resolved["gravity"]))
            rng = _rng(seed, 0x4447)
            if resolved["policy"] == "mixed":
                records = envs.collect_mixed_replay(
                    params, int(resolved["episodes"]), int(resolved["steps"]),
                    rng)
            else:
                policy = envs.ScriptedPolicy(resolved["policy"], params=params)
                records = envs.collect_replay(
                    params, policy, int(resolved["episodes"]),
                    int(resolved["steps"]), rng)
            spec = envs.PendulumEnv(params).env_spec
        elif resolved["env"] == "cartpole":
            rng = _rng(seed, 0x4447)
            env = envs.CartPoleSwingEnv()
            records = _collect_cartpole(env, int(resolved["episodes"]),
                                        int(resolved["steps"]), rng)
            spec = env.env_spec
        else:
            raise CliError(f"unknown env {resolved['env']!r}", field="env")
        man = dataset.manifest_from_records(spec.env_id, spec, records)
        dataset.write_manifest(man, out / spec.env_id)
        summaries.append(("data", man.name, man.episode_count, man.step_count))
    for split, name, episodes, steps in summaries:
        print(f"{split}\t{name}\tepisodes={episodes}\tsteps={steps}")
    print(f"wrote {len(summaries)} manifest(s) under {out}")
    return 0


def _collect_cartpole(env, episodes, T, rng):
    records = []
    for _ in range(episodes):
        obs = env.reset(rng)
        states, actions, rewards = [obs], [], []
        for _ in range(T - 1):
            a = rng.uniform(-1.0, 1.0, size=1)
            obs, r = env.step(a)
            states.append(obs)
            actions.append(a)
            rewards.append(r)
        records.append(dataset.TrajectoryRecord(
            env_id=env.env_spec.env_id, states=np.array(states),
            actions=np.array(actions), rewards=np.array(rewards)))
    return records


# ---------------------------------------------------------------------------
# pretrain / finetune


MODEL_DEFAULTS = {
    "num_blocks": 2, "num_heads": 2, "hidden": 64, "ffn_hidden": [128, 64],
    "context": 20, "num_bins": 64, "max_variates": 110, "dropout": 0.05,
}

PRETRAIN_DEFAULTS = {
    "data": None, "weights": None, "out": "runs/pretrain", "steps": 2000,
    "batch_size": 16, "peak_lr": 1e-4, "warmup": 200, "eval_every": 250,
    "seed": None, **MODEL_DEFAULTS,
}


def _model_cfg(resolved):
    return model.ModelConfig(
        num_blocks=int(resolved["num_blocks"]),
        num_heads=int(resolved["num_heads"]),
        hidden=int(resolved["hidden"]),
        ffn_hidden=tuple(resolved["ffn_hidden"]),
        context=int(resolved["context"]),
        num_bins=int(resolved["num_bins"]),
        max_variates=int(resolved["max_variates"]),
        dropout=float(resolved["dropout"]))


def _load_sources(data_spec):
    if not data_spec:
        raise CliError("no input data given", field="data")
    paths = data_spec if isinstance(data_spec, list) else [data_spec]
    sources = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise CliError(f"data path not found: {path}", field="data")
        if path.is_dir() and not (path / "manifest.json").is_file():
            subdirs = sorted(d for d in path.iterdir()
                             if (d / "manifest.json").is_file())
            if not subdirs:
                raise CliError(f"no manifests under {path}", field="data")
            sources.extend(dataset.ingest(d) for d in subdirs)
        else:
            sources.append(dataset.ingest(path))
    return sources


def cmd_pretrain(args):
    resolved = _resolve(PRETRAIN_DEFAULTS, args, PRETRAIN_DEFAULTS.keys())
    sources = _load_sources(resolved["data"])
    weights = resolved["weights"] or {s.name: 1.0 for s in sources}
    if isinstance(weights, str):
        weights = json.loads(weights)
    model_cfg = _model_cfg(resolved)
    train_cfg = training.TrainConfig(
        total_steps=int(resolved["steps"]),
        batch_size=int(resolved["batch_size"]),
        peak_lr=float(resolved["peak_lr"]),
        warmup_steps=int(resolved["warmup"]),
        eval_every=int(resolved["eval_every"]),
        seed=resolved["seed"], mode="pretrain")
    out = Path(resolved["out"])
    _snapshot(resolved, "pretrain", out)
    ckpt, metrics = training.pretrain(sources, weights, train_cfg, model_cfg)
    ckpt.save(out / "checkpoint")
    reporting.training_metrics_csv(metrics, out / "train_metrics.csv")
    reporting.training_curve_figure(metrics, out / "train_curve.png")
    final = metrics[-1]["loss"] if metrics else float("nan")
    print(f"pretrained {train_cfg.total_steps} steps, final loss {final:.6f}")
    print(f"checkpoint: {out / 'checkpoint.twck'}")
    return 0


FINETUNE_DEFAULTS = {
    "checkpoint": None, "data": None, "out": "runs/finetune", "steps": 1000,
    "batch_size": 16, "peak_lr": 1e-5, "warmup": 100, "eval_every": 250,
    "patience": 10, "seed": None,
}


def cmd_finetune(args):
    resolved = _resolve(FINETUNE_DEFAULTS, args, FINETUNE_DEFAULTS.keys())
    if not resolved["checkpoint"]:
        raise CliError("a checkpoint is required", field="checkpoint")
    ckpt = _load_checkpoint(resolved["checkpoint"])
    sources = _load_sources(resolved["data"])
    if len(sources) != 1:
        raise CliError("fine-tuning expects exactly one dataset", field="data")
    train_cfg = training.TrainConfig(
        total_steps=int(resolved["steps"]),
        batch_size=int(resolved["batch_size"]),
        peak_lr=float(resolved["peak_lr"]),
        warmup_steps=int(resolved["warmup"]),
        eval_every=int(resolved["eval_every"]),
        patience=int(resolved["patience"]),
        seed=resolved["seed"], mode="finetune")
    out = Path(resolved["out"])
    _snapshot(resolved, "finetune", out)
    tuned, metrics = training.finetune(ckpt, sources[0], train_cfg)
    tuned.save(out / "checkpoint")
    reporting.training_metrics_csv(metrics, out / "train_metrics.csv")
    reporting.training_curve_figure(metrics, out / "train_curve.png")
    print(f"fine-tuned for {len(metrics)} steps")
    print(f"checkpoint: {out / 'checkpoint.twck'}")
    return 0


# ---------------------------------------------------------------------------
# evalpred


EVALPRED_DEFAULTS = {
    "checkpoint": None, "data": None, "out": "runs/evalpred", "context": 19,
    "stride": 1, "max_windows": None, "env_id": None, "attention_dump": None,
    "seed": None,
}


def cmd_evalpred(args):
    resolved = _resolve(EVALPRED_DEFAULTS, args, EVALPRED_DEFAULTS.keys())
    if not resolved["checkpoint"]:
        raise CliError("a checkpoint is required", field="checkpoint")
    ckpt = _load_checkpoint(resolved["checkpoint"])
    sources = _load_sources(resolved["data"])
    if len(sources) != 1:
        raise CliError("evalpred expects exactly one dataset", field="data")
    manifest = sources[0]
    env_id = resolved["env_id"] or manifest.entries[0].env_spec.env_id
    if env_id in ckpt.bin_stats:
        stats = ckpt.bin_stats[env_id]
    else:
        stats = dataset.compute_bin_stats(manifest, ckpt.model_cfg.num_bins,
                                          env_id=env_id)
    out = Path(resolved["out"])
    _snapshot(resolved, "evalpred", out)
    max_windows = resolved["max_windows"]
    report = evaluation.prediction_error_report(
        ckpt.params, ckpt.model_cfg, stats, manifest,
        context=int(resolved["context"]), stride=int(resolved["stride"]),
        max_windows=int(max_windows) if max_windows else None)
    reporting.write_json(out / "prediction_report.json", report)
    reporting.prediction_report_csv(report, out / "prediction_report.csv")
    reporting.prediction_report_figure(report, out / "prediction_report.png")
    if resolved["attention_dump"]:
        _dump_attention(ckpt, stats, manifest, int(resolved["context"]),
                        Path(resolved["attention_dump"]))
    print(f"windows={report['num_windows']} "
          f"aggregate_mae={report['aggregate_mae']:.6e}")
    return 0


def _dump_attention(ckpt, stats, manifest, context, path):
    """Raw per-layer variate-attention weights (head-averaged, T x M x M)
    for the first test window, as little-endian f32 with a JSON sidecar."""
    from . import encoding
    rec = next(manifest.all_records())
    grid = encoding.scalarize(rec).values[:context]
    Q = encoding.encode_grid_gauss(grid, stats)
    capture = {}
    m = manifest.entries[0].env_spec.state_dim
    model.forward(ckpt.params, ckpt.model_cfg, Q, m, capture_attn=capture)
    layers = np.stack([w.mean(axis=1) for w in capture["variate"]])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(layers.astype("<f4").tobytes())
    reporting.write_json(path.with_suffix(path.suffix + ".json"), {
        "shape": list(layers.shape),
        "dims": ["layer", "timestep", "variate_query", "variate_key"],
        "dtype": "<f4",
    })


# ---------------------------------------------------------------------------
# ope


OPE_DEFAULTS = {
    "checkpoint": None, "out": "runs/ope", "gamma": evaluation.DESK_GAMMA,
    "horizon": evaluation.DESK_HORIZON,
    "rollouts": evaluation.DESK_NUM_ROLLOUTS, "num_policies": 10,
    "gravity": 10.0, "env_id": None, "with_truth": True,
    "decode_mode": "expectation", "seed": None,
}


def _policy_suite(num_policies, params):
    """Scripted pendulum policies of graded quality: the swing-up expert
    with increasing action noise, then fully random, then zero torque."""
    suite = []
    for i in range(num_policies):
        if i == num_policies - 1:
            suite.append(("passive", envs.ScriptedPolicy("passive",
                                                         params=params)))
        elif i == num_policies - 2:
            suite.append(("random", envs.ScriptedPolicy("random",
                                                        params=params)))
        else:
            noise = 3.0 * i / max(num_policies - 3, 1)
            suite.append((f"swingup_noise{noise:.2f}",
                          envs.ScriptedPolicy("noisy_expert", noise=noise,
                                              params=params)))
    return suite


def cmd_ope(args):
    resolved = _resolve(OPE_DEFAULTS, args, OPE_DEFAULTS.keys())
    if not resolved["checkpoint"]:
        raise CliError("a checkpoint is required", field="checkpoint")
    ckpt = _load_checkpoint(resolved["checkpoint"])
    env_id, stats = _pick_stats(ckpt, resolved["env_id"])
    out = Path(resolved["out"])
    _snapshot(resolved, "ope", out)
    seed = resolved["seed"]
    gamma, horizon = float(resolved["gamma"]), int(resolved["horizon"])
    n_roll = int(resolved["rollouts"])
    env_params = envs.PendulumParams(gravity=float(resolved["gravity"]))
    suite = _policy_suite(int(resolved["num_policies"]), env_params)
    init_rng = _rng(seed, 0x4F5045)
    env = envs.PendulumEnv(env_params)
    init_states = np.stack([env.reset(init_rng) for _ in range(n_roll)])
    model_run = evaluation.make_model_rollout(ckpt.params, ckpt.model_cfg,
                                              stats,
                                              mode=resolved["decode_mode"])
    ids, est, returns, true = [], [], [], []
    for i, (pid, policy) in enumerate(suite):
        rng = _rng(seed, 0x4F5045, i)
        e = evaluation.ope_estimate(model_run, policy, init_states, gamma,
                                    horizon, rng)
        ids.append(pid)
        est.append(e.value)
        returns.append(e.returns)
        if resolved["with_truth"]:
            sim_run = evaluation.make_simulator_rollout(
                lambda: envs.PendulumEnv(env_params))
            rng = _rng(seed, 0x545255, i)
            t = evaluation.ope_estimate(sim_run, policy, init_states, gamma,
                                        horizon, rng)
            true.append(t.value)
    reporting.ope_results_csv(ids, est, out / "ope_results.csv",
                              true_values=true if true else None,
                              returns=returns)
    summary = {"gamma": gamma, "horizon": horizon, "rollouts": n_roll,
               "env_id": env_id}
    if true:
        metrics = evaluation.ope_metrics(true, est)
        summary.update(abs_err=metrics.abs_err, rank_corr=metrics.rank_corr,
                       regret_at_1=metrics.regret_at_1)
        reporting.ope_scatter_figure(true, est, out / "ope_scatter.png")
        print(f"rank_corr={metrics.rank_corr:.4f} "
              f"regret@1={metrics.regret_at_1:.4f} "
              f"abs_err={metrics.abs_err:.4f}")
    reporting.write_json(out / "ope_summary.json", summary)
    return 0


# ---------------------------------------------------------------------------
# mpc


MPC_DEFAULTS = {
    "checkpoint": None, "out": "runs/mpc", "candidates": 128, "noise": 0.05,
    "horizon": 25, "replan_every": 1, "episodes": 10, "max_steps": 200,
    "gravity": 10.0, "proposal_noise": 0.8, "env_id": None,
    "decode_mode": "expectation", "seed": None,
}


def cmd_mpc(args):
    resolved = _resolve(MPC_DEFAULTS, args, MPC_DEFAULTS.keys())
    if not resolved["checkpoint"]:
        raise CliError("a checkpoint is required", field="checkpoint")
    ckpt = _load_checkpoint(resolved["checkpoint"])
    env_id, stats = _pick_stats(ckpt, resolved["env_id"])
    out = Path(resolved["out"])
    _snapshot(resolved, "mpc", out)
    seed = resolved["seed"]
    env_params = envs.PendulumParams(gravity=float(resolved["gravity"]))
    proposal = envs.ScriptedPolicy("noisy_expert",
                                   noise=float(resolved["proposal_noise"]),
                                   params=env_params)
    bounds = (-env_params.max_torque, env_params.max_torque)
    mpc_cfg = evaluation.MpcConfig(
        num_candidates=int(resolved["candidates"]),
        horizon=int(resolved["horizon"]),
        noise_sigma=float(resolved["noise"]),
        replan_every=int(resolved["replan_every"]),
        action_bounds=bounds,
        decode_mode=resolved["decode_mode"])
    planned, baseline = [], []
    for ep in range(int(resolved["episodes"])):
        rng = _rng(seed, 0x4D5043, ep)
        env = envs.PendulumEnv(env_params)
        total, _ = evaluation.mpc_episode(ckpt.params, ckpt.model_cfg, stats,
                                          env, proposal, mpc_cfg,
                                          int(resolved["max_steps"]), rng)
        planned.append(total)
        rng = _rng(seed, 0x505250, ep)
        obs = env.reset(rng)
        ep_return = 0.0
        for _ in range(int(resolved["max_steps"])):
            a = proposal(obs[None, :], rng).squeeze(0)
            obs, r = env.step(a)
            ep_return += r
        baseline.append(ep_return)
    reporting.mpc_results_csv(planned, baseline, out / "mpc_results.csv")
    reporting.mpc_returns_figure(planned, baseline, out / "mpc_returns.png")
    reporting.write_json(out / "mpc_summary.json", {
        "median_mpc_return": float(np.median(planned)),
        "median_proposal_return": float(np.median(baseline)),
        "episodes": len(planned),
    })
    print(f"median planned return {np.median(planned):.3f} vs proposal "
          f"{np.median(baseline):.3f}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trajworld",
        description="Trajectory world-model pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("datagen", help="collect replay data")
    common(p)
    p.add_argument("--env", choices=["pendulum", "cartpole"])
    p.add_argument("--gravity", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--policy")
    p.add_argument("--grid", action="store_const", const=True, default=None,
                   help="emit the full train + holdout gravity grid")
    p.add_argument("--grid-train-envs", dest="grid_train_envs", type=int)
    p.add_argument("--grid-hold-envs", dest="grid_hold_envs", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain", help="train from scratch on replay data")
    common(p)
    p.add_argument("--data", nargs="+")
    p.add_argument("--weights", help="JSON mapping source name -> weight")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    for key in MODEL_DEFAULTS:
        if key == "ffn_hidden":
            p.add_argument("--ffn-hidden", dest="ffn_hidden", type=int,
                           nargs=2)
        else:
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key,
                           type=float if key == "dropout" else int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a checkpoint to one dataset")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evalpred", help="one-step prediction error report")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", nargs="+")
    p.add_argument("--context", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--max-windows", dest="max_windows", type=int)
    p.add_argument("--env-id", dest="env_id")
    p.add_argument("--attention-dump", dest="attention_dump",
                   help="write raw variate-attention weights as binary")
    p.set_defaults(func=cmd_evalpred)

    p = sub.add_parser("ope", help="off-policy evaluation of scripted policies")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--gamma", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--num-policies", dest="num_policies", type=int)
    p.add_argument("--gravity", type=float)
    p.add_argument("--env-id", dest="env_id")
    p.add_argument("--decode-mode", dest="decode_mode",
                   choices=["expectation", "sample"])
    p.set_defaults(func=cmd_ope)

    p = sub.add_parser("mpc", help="model predictive control episodes")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--candidates", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--replan-every", dest="replan_every", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--gravity", type=float)
    p.add_argument("--proposal-noise", dest="proposal_noise", type=float)
    p.add_argument("--env-id", dest="env_id")
    p.add_argument("--decode-mode", dest="decode_mode",
                   choices=["expectation", "sample"])
    p.set_defaults(func=cmd_mpc)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": "config", "field": exc.field,
                          "message": str(exc)}), file=sys.stderr)
        return 2
    except (dataset.DatasetError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
