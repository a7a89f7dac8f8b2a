"""Figures for workflow reports, written to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STRATEGY_STYLE = {"finetune": "tab:blue", "freeze": "tab:orange", "scratch": "tab:green"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_strategy_curves(baim_metrics: dict[str, list[dict]], path) -> Path:
    """Common-test loss per epoch for each strategy, with pruning epochs marked by edge-count drops."""
    fig, (ax, ax_edges) = plt.subplots(2, 1, figsize=(6, 5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    for strat, rows in sorted(baim_metrics.items()):
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["test_loss"] for r in rows], label=strat, color=STRATEGY_STYLE.get(strat))
        ax_edges.step(ep, [r["active_edges"] for r in rows], where="post", color=STRATEGY_STYLE.get(strat))
    ax.set_yscale("log")
    ax.set_ylabel("test loss")
    ax.legend()
    ax_edges.set_ylabel("active edges")
    ax_edges.set_xlabel("epoch")
    return _save(fig, path)


def plot_edge_curves(edge_losses: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for node, curve in sorted(edge_losses.items(), key=lambda kv: int(kv[0])):
        ax.plot(range(len(curve)), curve, lw=1, label=f"node {node}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("local test loss")
    ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)


def plot_frechet(before: dict, after: dict, strategy_frechet: dict, path) -> Path:
    """Per-node Fréchet proxy of the initial edge model against the personalized task model."""
    nodes = sorted(before, key=int)
    xs = np.arange(len(nodes))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(xs - 0.2, [before[n] for n in nodes], 0.4, label="edge model")
    ax.bar(xs + 0.2, [after[n] for n in nodes], 0.4, label="personalized")
    for strat, v in sorted(strategy_frechet.items()):
        ax.axhline(v, ls="--", lw=1, color=STRATEGY_STYLE.get(strat), label=f"cloud {strat}")
    ax.set_xticks(xs, [str(n) for n in nodes])
    ax.set_xlabel("node")
    ax.set_ylabel("Fréchet proxy")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_samples(rows: dict[str, np.ndarray], side: int, path) -> Path:
    """Grid of images, one row per label (e.g. real / edge / personalized)."""
    labels = list(rows)
    n = max(len(v) for v in rows.values())
    fig, axes = plt.subplots(len(labels), n, figsize=(n * 0.8, len(labels) * 0.9), squeeze=False)
    for r, label in enumerate(labels):
        for c in range(n):
            ax = axes[r][c]
            ax.axis("off")
            if c < len(rows[label]):
                ax.imshow(np.asarray(rows[label][c]).reshape(side, side), cmap="gray", vmin=0, vmax=1)
        axes[r][0].set_title(label, fontsize=7, loc="left")
    return _save(fig, path)


def report_figures(report, out_dir, samples: dict[str, np.ndarray] | None = None, side: int = 16) -> list[Path]:
    """Render every figure a report supports; returns the written paths."""
    out = Path(out_dir)
    paths = []
    if report.edge_losses:
        paths.append(plot_edge_curves(report.edge_losses, out / "edge_losses.png"))
    if report.baim_metrics:
        paths.append(plot_strategy_curves(report.baim_metrics, out / "strategy_losses.png"))
    if report.frechet_before and report.frechet_after:
        paths.append(plot_frechet(report.frechet_before, report.frechet_after, report.strategy_frechet,
                                  out / "frechet.png"))
    if samples:
        paths.append(plot_samples(samples, side, out / "samples.png"))
    return paths
