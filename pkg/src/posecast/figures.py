"""Static figure rendering for reports.

Every function draws one figure with matplotlib's file-only backend and
saves it as a PNG next to the delimited outputs, returning the path it
wrote. Nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .autodiff import ContractError
from .metrics import EvalReport
from .model import AttentionMap
from .training import TrainingLog

_DPI = 120


def _finish(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def plot_training_curves(log: TrainingLog, path) -> str:
    """Loss components over steps, learning rate on a second axis."""
    if not log.rows:
        raise ContractError("training log has no rows to plot")
    steps = [r.step for r in log.rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.loss_total for r in log.rows], label="total loss",
            color="tab:blue")
    ax.plot(steps, [r.loss_motion for r in log.rows], label="motion loss",
            color="tab:green", alpha=0.8)
    if any(r.loss_activity is not None for r in log.rows):
        pairs = [(r.step, r.loss_activity) for r in log.rows
                 if r.loss_activity is not None]
        ax.plot([p[0] for p in pairs], [p[1] for p in pairs],
                label="activity loss", color="tab:orange", alpha=0.8)
    eval_pairs = [(r.step, r.eval_l1) for r in log.rows if r.eval_l1 is not None]
    if eval_pairs:
        ax.plot([p[0] for p in eval_pairs], [p[1] for p in eval_pairs],
                "o--", label="eval L1", color="tab:red")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    rate_ax = ax.twinx()
    rate_ax.plot(steps, [r.lr for r in log.rows], color="tab:gray",
                 alpha=0.5, linewidth=1.0)
    rate_ax.set_ylabel("learning rate", color="tab:gray")
    ax.legend(loc="upper right")
    ax.set_title("training")
    return _finish(fig, path)


def plot_horizon_curves(report: EvalReport, metric: str, path) -> str:
    """One line per predictor: the chosen metric against horizon."""
    if metric not in report.metric_names():
        raise ContractError(
            f"report has no metric {metric!r}; it has {report.metric_names()}"
        )
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in report.predictor_names():
        values = [report.metrics[name][metric][h] for h in report.horizons_ms]
        ax.plot(report.horizons_ms, values, marker="o", label=name)
    ax.set_xlabel("horizon (ms)")
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} by prediction horizon")
    ax.legend()
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_per_joint_error(report: EvalReport, metric: str, path) -> str:
    """Grouped bars of the per-joint aggregate for each predictor."""
    if not report.per_joint:
        raise ContractError("report carries no per-joint values")
    names = list(report.per_joint.keys())
    if metric not in report.per_joint[names[0]]:
        raise ContractError(f"per-joint table has no metric {metric!r}")
    joints = len(report.per_joint[names[0]][metric])
    positions = np.arange(joints)
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(max(6, joints * 0.5), 4))
    for i, name in enumerate(names):
        ax.bar(positions + i * width, report.per_joint[name][metric],
               width=width, label=name)
    ax.set_xticks(positions + 0.4 - width / 2)
    ax.set_xticklabels([str(j) for j in range(joints)])
    ax.set_xlabel("joint")
    ax.set_ylabel(metric)
    ax.set_title(f"per-joint {metric}")
    ax.legend()
    return _finish(fig, path)


def plot_attention_heatmaps(maps: list[AttentionMap], path) -> str:
    """All maps in one grid, rows by (stage, kind, layer), columns by head."""
    if not maps:
        raise ContractError("no attention maps to plot")
    groups: dict[tuple, list[AttentionMap]] = {}
    for m in maps:
        groups.setdefault((m.stage, m.kind, m.layer), []).append(m)
    keys = sorted(groups)
    heads = max(len(v) for v in groups.values())
    fig, axes = plt.subplots(len(keys), heads,
                             figsize=(2.2 * heads, 2.2 * len(keys)),
                             squeeze=False)
    for row, key in enumerate(keys):
        for col in range(heads):
            ax = axes[row][col]
            ax.set_xticks([])
            ax.set_yticks([])
            ordered = sorted(groups[key], key=lambda m: m.head)
            if col >= len(ordered):
                ax.axis("off")
                continue
            m = ordered[col]
            ax.imshow(m.weights, aspect="auto", cmap="viridis",
                      vmin=0.0, vmax=m.weights.max() or 1.0)
            ax.set_title(f"{m.stage[:3]} {m.kind} L{m.layer} H{m.head}",
                         fontsize=7)
    fig.suptitle("attention weights (rows attend over columns)", fontsize=10)
    return _finish(fig, path)


def plot_prediction_tracks(observed: np.ndarray, target: np.ndarray,
                           predicted: np.ndarray, path,
                           features: list[int] | None = None,
                           frame_rate: float = 1.0) -> str:
    """A few feature tracks: the observed past, the true future, and the
    prediction, with the handoff marked."""
    observed = np.asarray(observed)
    target = np.asarray(target)
    predicted = np.asarray(predicted)
    if target.shape != predicted.shape:
        raise ContractError(
            f"target {target.shape} and prediction {predicted.shape} disagree"
        )
    if features is None:
        features = list(range(min(4, observed.shape[1])))
    past = observed.shape[0]
    t_past = np.arange(past) / frame_rate
    t_future = (past + np.arange(target.shape[0])) / frame_rate
    fig, axes = plt.subplots(len(features), 1,
                             figsize=(7, 1.8 * len(features)),
                             sharex=True, squeeze=False)
    for ax_row, feature in zip(axes, features):
        ax = ax_row[0]
        ax.plot(t_past, observed[:, feature], color="tab:gray", label="observed")
        ax.plot(t_future, target[:, feature], color="tab:green", label="target")
        ax.plot(t_future, predicted[:, feature], color="tab:red",
                linestyle="--", marker=".", label="predicted")
        ax.axvline(t_past[-1], color="black", linewidth=0.6, alpha=0.5)
        ax.set_ylabel(f"f{feature}", fontsize=8)
    axes[0][0].legend(fontsize=7, loc="upper left")
    axes[-1][0].set_xlabel("time (s)" if frame_rate != 1.0 else "frame")
    fig.suptitle("prediction handoff")
    return _finish(fig, path)


def plot_benchmark(results: dict[str, dict[str, float]], path) -> str:
    """Sequences-per-second bars with min/max whiskers per mode."""
    if not results:
        raise ContractError("no benchmark results to plot")
    names = list(results.keys())
    medians = [results[n]["median_sps"] for n in names]
    lows = [results[n]["median_sps"] - results[n]["min_sps"] for n in names]
    highs = [results[n]["max_sps"] - results[n]["median_sps"] for n in names]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(names, medians, yerr=[lows, highs], capsize=6,
           color=["tab:blue", "tab:orange"][:len(names)] or None)
    ax.set_ylabel("sequences / second")
    ax.set_title("decoding throughput")
    for i, value in enumerate(medians):
        ax.text(i, value, f"{value:.1f}", ha="center", va="bottom", fontsize=9)
    return _finish(fig, path)
