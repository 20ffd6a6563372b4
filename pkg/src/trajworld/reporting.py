"""Report writers: delimited outputs plus rendered figures.

Every report path produces a CSV (or JSON) table and, where a picture
helps, a PNG rendered with the Agg backend. Figure bytes are kept
deterministic by pinning the PNG metadata, so reruns diff clean.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

# fixed metadata; the default embeds the matplotlib version
_PNG_METADATA = {"Software": "trajworld"}


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# training


def training_metrics_csv(metrics, path):
    """One row per optimization step; val_loss blank between evals."""
    rows = [(m["step"], f"{m['loss']:.8f}", f"{m['lr']:.3e}",
             f"{m['grad_norm']:.6f}",
             f"{m['val_loss']:.8f}" if "val_loss" in m else "")
            for m in metrics]
    return write_csv(path, ["step", "loss", "lr", "grad_norm", "val_loss"],
                     rows)


def training_curve_figure(metrics, path):
    steps = [m["step"] for m in metrics]
    losses = [m["loss"] for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=0.8, label="train")
    val = [(m["step"], m["val_loss"]) for m in metrics if "val_loss" in m]
    if val:
        ax.plot(*zip(*val), "o-", ms=3, label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("loss per prediction")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


# ---------------------------------------------------------------------------
# prediction error


def prediction_report_csv(report, path):
    rows = [(name, f"{mae:.8e}")
            for name, mae in report["per_variate_mae"].items()]
    rows.append(("aggregate", f"{report['aggregate_mae']:.8e}"))
    rows.append(("aggregate_mse", f"{report['aggregate_mse']:.8e}"))
    return write_csv(path, ["variate", "mae"], rows)


def prediction_report_figure(report, path):
    names = list(report["per_variate_mae"])
    values = [report["per_variate_mae"][k] for k in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("MAE")
    ax.set_title(f"one-step prediction error ({report['num_windows']} windows)")
    fig.tight_layout()
    return _save(fig, path)


# ---------------------------------------------------------------------------
# policy evaluation


def ope_results_csv(policy_ids, est_values, path, true_values=None,
                    returns=None):
    """Per-policy table: estimate, optional truth, optional raw returns."""
    header = ["policy_id", "est_value"]
    if true_values is not None:
        header.append("true_value")
    if returns is not None:
        width = max(len(r) for r in returns)
        header += [f"return_{i}" for i in range(width)]
    rows = []
    for i, pid in enumerate(policy_ids):
        row = [pid, f"{est_values[i]:.8f}"]
        if true_values is not None:
            row.append(f"{true_values[i]:.8f}")
        if returns is not None:
            row += [f"{r:.8f}" for r in returns[i]]
        rows.append(row)
    return write_csv(path, header, rows)


def ope_scatter_figure(true_values, est_values, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(true_values, est_values, s=25)
    lims = [min(np.min(true_values), np.min(est_values)),
            max(np.max(true_values), np.max(est_values))]
    ax.plot(lims, lims, "k--", lw=0.8)
    ax.set_xlabel("true value")
    ax.set_ylabel("estimated value")
    fig.tight_layout()
    return _save(fig, path)


# ---------------------------------------------------------------------------
# planning


def mpc_results_csv(episode_returns, proposal_returns, path):
    rows = [(i, f"{mpc:.6f}", f"{prop:.6f}")
            for i, (mpc, prop) in enumerate(zip(episode_returns,
                                                proposal_returns))]
    return write_csv(path, ["episode", "mpc_return", "proposal_return"], rows)


def mpc_returns_figure(episode_returns, proposal_returns, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([proposal_returns, episode_returns],
               tick_labels=["proposal", "planned"])
    ax.set_ylabel("episode return")
    fig.tight_layout()
    return _save(fig, path)
