"""Aggregate pruning traces into the analysis tables.

Outputs: max-accuracy table, strategy ranks (highest accuracy gets the top
rank), percent accuracy change against baseline, accuracy-to-size-ratio
improvements, normalized fusion importances, prune-order heatmap data,
randomization-test summaries, and the distillation report. Everything is
emitted as UTF-8 CSV plus a bundling report.json; re-emission over the
same report is byte-identical.

"Max accuracy" is taken over pruned steps only (at least one layer
removed); the baseline is reported separately. A flag flips that default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import size_gb
from .pruning import PruningTrace
from .signals import SIGNAL_NAMES


class ReportError(Exception):
    pass


@dataclass
class RunRecord:
    dataset: str
    strategy: str
    seed: int
    trace: PruningTrace
    importances: list[float] | None = None  # normalized, first fusion fit


@dataclass
class ExperimentReport:
    runs: list[RunRecord] = field(default_factory=list)
    randomization_rows: list[dict] = field(default_factory=list)
    distill_rows: list[dict] = field(default_factory=list)
    include_baseline_in_max: bool = False

    def max_accuracy(self, record: RunRecord) -> float:
        acc = record.trace.max_accuracy()
        if self.include_baseline_in_max:
            acc = max(acc, record.trace.baseline_accuracy)
        return acc


def rank_strategies(max_accuracies: dict[str, float]) -> dict[str, int]:
    """Rank S..1 by descending max accuracy over S strategies.

    Ties share the higher rank band and are broken by ascending name, so the
    result is always a permutation of 1..S.
    """
    if len(max_accuracies) < 2:
        raise ReportError("rank_strategies: need at least 2 strategies")
    ordered = sorted(max_accuracies.items(), key=lambda kv: (-kv[1], kv[0]))
    n = len(ordered)
    return {name: n - i for i, (name, _) in enumerate(ordered)}


def accuracy_change_vs_baseline(max_accuracy: float, baseline: float) -> float:
    """Percent change of the post-pruning maximum against the baseline."""
    if baseline <= 0:
        raise ReportError(f"baseline accuracy must be > 0, got {baseline}")
    return 100.0 * (max_accuracy - baseline) / baseline


def accuracy_to_size_improvement(acc_c: float, params_c: int, acc_b: float, params_b: int) -> float:
    """Percent improvement of accuracy/size for the compressed model over the
    base model. The bytes-per-parameter constant cancels."""
    if params_c <= 0 or params_b <= 0:
        raise ReportError("parameter counts must be positive")
    ratio_c = acc_c / size_gb(params_c)
    ratio_b = acc_b / size_gb(params_b)
    if ratio_b == 0:
        raise ReportError("base accuracy-to-size ratio is zero")
    return 100.0 * (ratio_c / ratio_b - 1.0)


def prune_order_heatmap(traces: list[PruningTrace]) -> tuple[list[str], np.ndarray]:
    """Mean prune rank per (strategy, layer) across traces.

    Rank is the 1-based step at which the layer was pruned; layers a trace
    never pruned get steps + 1. Returns (sorted strategy names, matrix of
    shape strategies x layers).
    """
    if not traces:
        raise ReportError("prune_order_heatmap: no traces")
    n_layers = traces[0].n_layers
    if any(t.n_layers != n_layers for t in traces):
        raise ReportError("prune_order_heatmap: traces disagree on n_layers")
    by_strategy: dict[str, list[np.ndarray]] = {}
    for t in traces:
        order = t.prune_order
        ranks = np.full(n_layers, len(order) + 1, dtype=np.float64)
        for pos, layer in enumerate(order):
            ranks[layer] = pos + 1
        by_strategy.setdefault(t.strategy, []).append(ranks)
    names = sorted(by_strategy)
    matrix = np.stack([np.mean(by_strategy[n], axis=0) for n in names])
    return names, matrix


# ---------------------------------------------------------------------------
# emission


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sorted_runs(report: ExperimentReport) -> list[RunRecord]:
    return sorted(report.runs, key=lambda r: (r.dataset, r.strategy, r.seed))


def mean_max_by_strategy(report: ExperimentReport, dataset: str) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in report.runs:
        if r.dataset == dataset:
            acc.setdefault(r.strategy, []).append(report.max_accuracy(r))
    return {name: float(np.mean(vals)) for name, vals in acc.items()}


def emit_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write every report table; returns the paths written. Deterministic:
    identical inputs give byte-identical files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    runs = _sorted_runs(report)

    rows = []
    for r in runs:
        t = r.trace
        rows.append(
            [r.dataset, r.strategy, r.seed, t.baseline_accuracy, report.max_accuracy(r),
             t.argmax_step() if t.pruned_steps() else 0]
        )
    path = out / "max_accuracy.csv"
    _write_csv(path, ["dataset", "strategy", "seed", "baseline_accuracy", "max_accuracy", "argmax_step"], rows)
    written.append(path)

    rank_rows = []
    for dataset in sorted({r.dataset for r in runs}):
        means = mean_max_by_strategy(report, dataset)
        if len(means) >= 2:
            ranks = rank_strategies(means)
        else:
            ranks = {name: 1 for name in means}
        for name in sorted(means):
            rank_rows.append([dataset, name, means[name], ranks[name]])
    path = out / "ranks.csv"
    _write_csv(path, ["dataset", "strategy", "mean_max_accuracy", "rank"], rank_rows)
    written.append(path)

    rows = []
    for r in runs:
        t = r.trace
        rows.append(
            [r.dataset, r.strategy, r.seed,
             accuracy_change_vs_baseline(report.max_accuracy(r), t.baseline_accuracy)]
        )
    path = out / "acc_change.csv"
    _write_csv(path, ["dataset", "strategy", "seed", "percent_change"], rows)
    written.append(path)

    rows = []
    for r in runs:
        t = r.trace
        pruned = t.pruned_steps()
        if not pruned:
            continue
        best = max(pruned, key=lambda s: (s.accuracy, -s.step))
        rows.append(
            [r.dataset, r.strategy, r.seed, t.baseline_accuracy, t.baseline_params,
             best.accuracy, best.param_count,
             accuracy_to_size_improvement(best.accuracy, best.param_count,
                                          t.baseline_accuracy, t.baseline_params)]
        )
    path = out / "acc_size_improvement.csv"
    _write_csv(
        path,
        ["dataset", "strategy", "seed", "baseline_accuracy", "baseline_params",
         "max_accuracy", "params_at_max", "percent_improvement"],
        rows,
    )
    written.append(path)

    rows = []
    for r in runs:
        if r.importances is None:
            continue
        for name, value in zip(SIGNAL_NAMES, r.importances):
            rows.append([r.dataset, r.strategy, r.seed, name, float(value)])
    path = out / "importances.csv"
    _write_csv(path, ["dataset", "strategy", "seed", "signal", "normalized_importance"], rows)
    written.append(path)

    heat_rows = []
    header = ["strategy"]
    if runs:
        names, matrix = prune_order_heatmap([r.trace for r in runs])
        n_layers = matrix.shape[1]
        header += [f"layer_{i:02d}" for i in range(n_layers)]
        for name, row in zip(names, matrix):
            heat_rows.append([name] + [float(v) for v in row])
    path = out / "prune_order_heatmap.csv"
    _write_csv(path, header, heat_rows)
    written.append(path)

    rows = [
        [d["dataset"], d["seed"], d["kind"], d["repeat"], d["max_accuracy"],
         d["mean_max_accuracy"], " ".join(str(l) for l in d["prune_order"])]
        for d in sorted(
            report.randomization_rows,
            key=lambda d: (d["dataset"], d["seed"], d["kind"], d["repeat"]),
        )
    ]
    path = out / "randomization_tests.csv"
    _write_csv(
        path,
        ["dataset", "seed", "kind", "repeat", "max_accuracy", "mean_max_accuracy", "prune_order"],
        rows,
    )
    written.append(path)

    rows = [
        [d["dataset"], d["seed"], d["acc_original"], d["acc_compressed"], d["acc_distilled"],
         d["params"], size_gb(d["params"]), d["accuracy_to_size_ratio"]]
        for d in sorted(report.distill_rows, key=lambda d: (d["dataset"], d["seed"]))
    ]
    path = out / "distill_report.csv"
    _write_csv(
        path,
        ["dataset", "seed", "acc_original", "acc_compressed", "acc_distilled",
         "params", "size_gb", "accuracy_to_size_ratio"],
        rows,
    )
    written.append(path)

    bundle = {
        "runs": [
            {
                "dataset": r.dataset,
                "strategy": r.strategy,
                "seed": r.seed,
                "n_layers": r.trace.n_layers,
                "baseline_accuracy": r.trace.baseline_accuracy,
                "baseline_params": r.trace.baseline_params,
                "max_accuracy": report.max_accuracy(r),
                "prune_order": r.trace.prune_order,
                "steps": [
                    {"step": s.step, "pruned_layer": s.pruned_layer,
                     "accuracy": s.accuracy, "param_count": s.param_count}
                    for s in r.trace.steps
                ],
                "importances": r.importances,
            }
            for r in runs
        ],
        "randomization_tests": sorted(
            report.randomization_rows,
            key=lambda d: (d["dataset"], d["seed"], d["kind"], d["repeat"]),
        ),
        "distillation": sorted(report.distill_rows, key=lambda d: (d["dataset"], d["seed"])),
    }
    path = out / "report.json"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(bundle, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written
