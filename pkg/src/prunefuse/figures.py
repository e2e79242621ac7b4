"""Render the report tables as PNG figures next to the CSV output.

Headless (Agg) and deterministic: figures carry no timestamps or
software metadata, so re-rendering an identical report is byte-identical.
Each renderer skips quietly when its table is empty.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .reporting import ExperimentReport, mean_max_by_strategy, prune_order_heatmap, rank_strategies
from .signals import SIGNAL_NAMES

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _strategy_means(report: ExperimentReport, value_fn) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in report.runs:
        acc.setdefault(r.strategy, []).append(value_fn(r))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def accuracy_trace_figure(report: ExperimentReport, path: Path):
    datasets = sorted({r.dataset for r in report.runs})
    if not datasets:
        return None
    fig, axes = plt.subplots(1, len(datasets), figsize=(5.5 * len(datasets), 4.0), squeeze=False)
    for ax, dataset in zip(axes[0], datasets):
        by_strategy: dict[str, list] = {}
        baselines = []
        for r in report.runs:
            if r.dataset != dataset:
                continue
            xs = [s.step for s in r.trace.steps if s.step > 0]
            ys = [s.accuracy for s in r.trace.steps if s.step > 0]
            by_strategy.setdefault(r.strategy, []).append((xs, ys))
            baselines.append(r.trace.baseline_accuracy)
        for name in sorted(by_strategy):
            curves = by_strategy[name]
            steps = curves[0][0]
            mean = np.mean([c[1] for c in curves], axis=0)
            ax.plot(steps, mean, marker="o", markersize=3, linewidth=1.2, label=name)
        ax.axhline(float(np.mean(baselines)), color="black", linestyle="--", linewidth=1.0)
        ax.set_xlabel("layers pruned")
        ax.set_ylabel("test accuracy")
        ax.set_title(dataset)
    axes[0][-1].legend(fontsize=7, loc="lower left")
    return _save(fig, path)


def ranks_figure(report: ExperimentReport, path: Path):
    datasets = sorted({r.dataset for r in report.runs})
    per_strategy: dict[str, list[int]] = {}
    for dataset in datasets:
        means = mean_max_by_strategy(report, dataset)
        if len(means) < 2:
            continue
        for name, rank in rank_strategies(means).items():
            per_strategy.setdefault(name, []).append(rank)
    if not per_strategy:
        return None
    names = sorted(per_strategy)
    means = [float(np.mean(per_strategy[n])) for n in names]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(names)), means, color="#4878b0")
    for i, name in enumerate(names):
        ax.scatter([i] * len(per_strategy[name]), per_strategy[name], color="black", s=8, zorder=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("rank (higher is better)")
    return _save(fig, path)


def acc_change_figure(report: ExperimentReport, path: Path):
    if not report.runs:
        return None
    from .reporting import accuracy_change_vs_baseline

    means = _strategy_means(
        report,
        lambda r: accuracy_change_vs_baseline(report.max_accuracy(r), r.trace.baseline_accuracy),
    )
    names = list(means)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(names)), [means[n] for n in names], color="#b04848")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("max accuracy change vs baseline (%)")
    return _save(fig, path)


def acc_size_figure(report: ExperimentReport, path: Path):
    if not report.runs:
        return None
    from .reporting import accuracy_to_size_improvement

    def improvement(r):
        best = max(r.trace.pruned_steps(), key=lambda s: (s.accuracy, -s.step))
        return accuracy_to_size_improvement(
            best.accuracy, best.param_count, r.trace.baseline_accuracy, r.trace.baseline_params
        )

    means = _strategy_means(report, improvement)
    names = list(means)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(names)), [means[n] for n in names], color="#48b078")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("accuracy-to-size improvement (%)")
    return _save(fig, path)


def importances_figure(report: ExperimentReport, path: Path):
    by_fusion: dict[str, list[np.ndarray]] = {}
    for r in report.runs:
        if r.importances is not None:
            by_fusion.setdefault(r.strategy, []).append(np.asarray(r.importances))
    if not by_fusion:
        return None
    fig, ax = plt.subplots(figsize=(9, 4))
    width = 0.8 / len(by_fusion)
    x = np.arange(len(SIGNAL_NAMES))
    for i, name in enumerate(sorted(by_fusion)):
        mean = np.mean(by_fusion[name], axis=0)
        ax.bar(x + i * width, mean, width=width, label=name)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(SIGNAL_NAMES, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("normalized importance")
    ax.legend(fontsize=8)
    return _save(fig, path)


def heatmap_figure(report: ExperimentReport, path: Path):
    if not report.runs:
        return None
    names, matrix = prune_order_heatmap([r.trace for r in report.runs])
    fig, ax = plt.subplots(figsize=(8, 0.5 + 0.35 * len(names)))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xticks(range(matrix.shape[1]))
    ax.set_xticklabels(range(matrix.shape[1]), fontsize=7)
    ax.set_xlabel("layer index")
    fig.colorbar(im, ax=ax, label="mean prune rank")
    return _save(fig, path)


def randomization_figure(report: ExperimentReport, path: Path):
    rows = report.randomization_rows
    if not rows:
        return None
    cells = sorted({(d["dataset"], d["seed"]) for d in rows})
    kinds = sorted({d["kind"] for d in rows})
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(cells), 4))
    width = 0.8 / len(kinds)
    for i, kind in enumerate(kinds):
        vals = []
        for cell in cells:
            matching = [d["mean_max_accuracy"] for d in rows
                        if (d["dataset"], d["seed"]) == cell and d["kind"] == kind]
            vals.append(matching[0] if matching else np.nan)
        ax.bar(np.arange(len(cells)) + i * width, vals, width=width, label=kind)
    ax.set_xticks(np.arange(len(cells)) + 0.4 - width / 2)
    ax.set_xticklabels([f"{d}/s{s}" for d, s in cells], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("mean max accuracy")
    ax.legend(fontsize=8)
    return _save(fig, path)


def distill_figure(report: ExperimentReport, path: Path):
    rows = sorted(report.distill_rows, key=lambda d: (d["dataset"], d["seed"]))
    if not rows:
        return None
    labels = [f"{d['dataset']}/s{d['seed']}" for d in rows]
    keys = ("acc_original", "acc_compressed", "acc_distilled")
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(rows), 4))
    width = 0.8 / len(keys)
    for i, key in enumerate(keys):
        ax.bar(np.arange(len(rows)) + i * width, [d[key] for d in rows], width=width, label=key)
    ax.set_xticks(np.arange(len(rows)) + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=8)
    return _save(fig, path)


_RENDERERS = {
    "accuracy_trace.png": accuracy_trace_figure,
    "ranks.png": ranks_figure,
    "acc_change.png": acc_change_figure,
    "acc_size_improvement.png": acc_size_figure,
    "importances.png": importances_figure,
    "prune_order_heatmap.png": heatmap_figure,
    "randomization_tests.png": randomization_figure,
    "distill_report.png": distill_figure,
}


def render_figures(report: ExperimentReport, out_dir) -> list[Path]:
    """Render every figure that has data into out_dir/figures/."""
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for filename, renderer in _RENDERERS.items():
        result = renderer(report, fig_dir / filename)
        if result is not None:
            written.append(result)
    return written
