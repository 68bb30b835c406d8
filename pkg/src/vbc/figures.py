"""Static matplotlib figures rendered next to the delimited metrics."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

AXIS_LABELS = {
    "mean_eval_reward": "mean evaluation reward",
    "beta": "communication overhead ratio",
    "mean_msg_variance": "mean message variance",
    "avg_distance": "mean distance to nearest landmark",
    "collisions": "collisions per episode",
    "captures": "captures per episode",
    "loss": "training loss",
}


def metric_curves(summaries: dict, metric: str, path) -> str:
    """One learning curve per labeled summary, with 95% CI bands."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, summary in summaries.items():
        x = summary.episodes
        y = summary.mean[metric]
        ax.plot(x, y, marker="o", markersize=3, label=label)
        if summary.ci is not None:
            half = summary.ci[metric]
            lo = [m - h for m, h in zip(y, half)]
            hi = [m + h for m, h in zip(y, half)]
            ax.fill_between(x, lo, hi, alpha=0.2)
    ax.set_xlabel("training episodes")
    ax.set_ylabel(AXIS_LABELS.get(metric, metric))
    if len(summaries) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def comparison_chart(rows: list[dict], metric: str, path) -> str:
    """Bar chart of the final metric per method, error bars from the CI."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    labels = [str(row["method"]) for row in rows]
    values = [row[metric] for row in rows]
    errs = [row.get("ci95") or 0.0 for row in rows]
    ax.bar(range(len(rows)), values, yerr=errs, capsize=4,
           color="tab:blue", alpha=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20)
    ax.set_ylabel(AXIS_LABELS.get(metric, metric))
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def gate_heatmap(rows: list[dict], value: str, path) -> str:
    """Grid of a sweep metric over (delta1, delta2) threshold pairs."""
    d1s = sorted({row["delta1"] for row in rows})
    d2s = sorted({row["delta2"] for row in rows})
    grid = [[float("nan")] * len(d2s) for _ in d1s]
    for row in rows:
        grid[d1s.index(row["delta1"])][d2s.index(row["delta2"])] = row[value]
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(d2s)))
    ax.set_xticklabels([f"{v:g}" for v in d2s])
    ax.set_yticks(range(len(d1s)))
    ax.set_yticklabels([f"{v:g}" for v in d1s])
    ax.set_xlabel("variance threshold")
    ax.set_ylabel("confidence threshold")
    fig.colorbar(im, ax=ax, label=AXIS_LABELS.get(value, value))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
