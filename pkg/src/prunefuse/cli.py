"""Command surface: run, signals, distill, randomization-test, report.

One JSON config file drives everything; --seed/--strategy/--steps/--out-dir
override it from the command line and PRUNEFUSE_OUT overrides the output
directory from the environment (an explicit --out-dir still wins). Exit
codes: 0 success, 1 runtime failure (with a per-run error log), 2 usage or
config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .data import CorpusSplits, DataError, DatasetSpec, generate_corpus
from .distill import DistillConfig, distill_train
from .fusion import ForestParams
from .model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    ModelState,
    evaluate_accuracy,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
    size_gb,
)
from .pruning import (
    ALL_STRATEGIES,
    FineTuneConfig,
    PruneError,
    PruningTrace,
    RunSettings,
    StrategySpec,
    TraceStep,
    make_run_data,
    randomization_test,
    read_run_log,
    run_strategy,
    write_trace_csv,
)
from .reporting import ExperimentReport, RunRecord, emit_report
from .seeding import derive_seed
from .signals import build_signal_matrix


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    datasets: tuple[DatasetSpec, ...]
    model: ModelConfig
    strategies: tuple[str, ...]
    steps: int = 11
    seeds: tuple[int, ...] = (0,)
    fine_tune: FineTuneConfig = FineTuneConfig()
    baseline_epochs: int = 2
    settings: RunSettings = RunSettings()
    forest: ForestParams = ForestParams()
    ridge_lambda: float = 1e-6
    distill_enabled: bool = False
    distill_temperature: float = 2.0
    distill_alpha: float = 0.5
    distill_epochs: int = 4
    randomization_repeats: int = 10
    out_dir: str = "out"
    figures: bool = True
    save_checkpoints: bool = True

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        unknown = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if unknown:
            raise ConfigError(
                f"unknown strategies {unknown}; known: {', '.join(ALL_STRATEGIES)}"
            )
        if not self.strategies:
            raise ConfigError("strategy list must be non-empty")
        if self.steps < 0 or self.steps > self.model.n_layers:
            raise ConfigError(f"steps must be in [0, {self.model.n_layers}]")
        for ds in self.datasets:
            if ds.vocab_size > self.model.vocab_size:
                raise ConfigError(
                    f"dataset '{ds.name}' vocab {ds.vocab_size} exceeds model vocab {self.model.vocab_size}"
                )
            if ds.n_classes != self.model.n_classes:
                raise ConfigError(
                    f"dataset '{ds.name}' has {ds.n_classes} classes but the model head has {self.model.n_classes}"
                )


def _build(cls, payload: dict, context: str):
    try:
        return cls(**payload)
    except (TypeError, DataError, ModelError) as exc:
        raise ConfigError(f"bad {context} section: {exc}") from exc


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")

    datasets = raw.get("datasets", [raw["dataset"]] if "dataset" in raw else [{}])
    cfg = RunConfig(
        datasets=tuple(_build(DatasetSpec, d, "dataset") for d in datasets),
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        strategies=tuple(raw.get("strategies", list(ALL_STRATEGIES))),
        steps=int(raw.get("steps", 11)),
        seeds=tuple(int(s) for s in raw.get("seeds", [0])),
        fine_tune=_build(FineTuneConfig, raw.get("fine_tune", {}), "fine_tune"),
        baseline_epochs=int(raw.get("baseline_epochs", 2)),
        settings=_build(RunSettings, raw.get("run", {}), "run"),
        forest=_build(ForestParams, raw.get("forest", {}), "forest"),
        ridge_lambda=float(raw.get("ridge_lambda", 1e-6)),
        distill_enabled=bool(raw.get("distill", {}).get("enabled", False)),
        distill_temperature=float(raw.get("distill", {}).get("temperature", 2.0)),
        distill_alpha=float(raw.get("distill", {}).get("alpha", 0.5)),
        distill_epochs=int(raw.get("distill", {}).get("epochs", 4)),
        randomization_repeats=int(raw.get("randomization_repeats", 10)),
        out_dir=str(raw.get("out_dir", "out")),
        figures=bool(raw.get("figures", True)),
        save_checkpoints=bool(raw.get("save_checkpoints", True)),
    )

    overrides = overrides or {}
    env_out = os.environ.get("PRUNEFUSE_OUT")
    if env_out:
        cfg = replace(cfg, out_dir=env_out)
    if overrides.get("out_dir"):
        cfg = replace(cfg, out_dir=overrides["out_dir"])
    if overrides.get("seed"):
        cfg = replace(cfg, seeds=tuple(int(s) for s in overrides["seed"].split(",")))
    if overrides.get("strategy"):
        cfg = replace(cfg, strategies=tuple(overrides["strategy"].split(",")))
    if overrides.get("steps") is not None:
        cfg = replace(cfg, steps=int(overrides["steps"]))
    cfg.validate()
    return cfg


def _slug(dataset: str, strategy: str, seed: int) -> str:
    return f"{dataset}__{strategy}__seed{seed}"


def _train_baseline(config: RunConfig, splits: CorpusSplits, seed: int) -> ModelState:
    from .pruning import fine_tune

    model = init_model(replace(config.model, seed=derive_seed(seed, splits.spec.name, "model")))
    baseline_cfg = replace(
        config.fine_tune,
        epochs=config.baseline_epochs,
        seed=derive_seed(seed, splits.spec.name, "baseline"),
    )
    fine_tune(model, splits.train, baseline_cfg)
    return model


def _run_cell(config: RunConfig, ds_index: int, seed: int) -> dict:
    """Full pipeline for one (dataset, seed) grid cell; returns picklable
    records and writes per-run artifacts."""
    ds = config.datasets[ds_index]
    out = Path(config.out_dir)
    splits = generate_corpus(ds)
    run_data = make_run_data(splits, config.settings, config.model.max_seq_len)
    baseline = _train_baseline(config, splits, seed)

    if config.save_checkpoints:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(baseline, ckpt_dir / f"teacher_{ds.name}_seed{seed}.ckpt")

    records = []
    distill_rows = []
    forest_best: ModelState | None = None
    for kind in config.strategies:
        spec = StrategySpec(kind)
        steps = config.steps
        if kind == "random10":
            steps = min(steps, config.model.n_layers - 2)
        result = run_strategy(
            spec,
            baseline.copy(),
            run_data,
            steps,
            seed,
            fine_tune_config=config.fine_tune,
            forest_params=config.forest,
            ridge_lambda=config.ridge_lambda,
            log_path=out / "logs" / f"run_{_slug(ds.name, kind, seed)}.jsonl",
            keep_best=(kind == "forest_fusion"),
            header_extra={"dataset": ds.name},
        )
        write_trace_csv(result.trace, out / "traces" / f"trace_{_slug(ds.name, kind, seed)}.csv")
        importances = None
        for rec in result.log_records:
            if rec.get("record") == "step" and rec.get("importances") is not None:
                importances = rec["importances"]
                break
        records.append(
            {
                "dataset": ds.name,
                "strategy": kind,
                "seed": seed,
                "trace": result.trace,
                "importances": importances,
            }
        )
        if kind == "forest_fusion" and result.best_model is not None:
            forest_best = result.best_model

    if config.distill_enabled and forest_best is not None:
        student = forest_best
        acc_compressed = evaluate_accuracy(student, run_data.test_batches)
        acc_original = evaluate_accuracy(baseline, run_data.test_batches)
        dconf = DistillConfig(
            temperature=config.distill_temperature,
            alpha=config.distill_alpha,
            train=replace(
                config.fine_tune,
                epochs=config.distill_epochs,
                seed=derive_seed(seed, ds.name, "distill"),
            ),
        )
        distill_train(baseline, student, run_data.fine_tune_samples, dconf)
        acc_distilled = evaluate_accuracy(student, run_data.test_batches)
        params = param_count(student.config, student.prune_mask)
        distill_rows.append(
            {
                "dataset": ds.name,
                "seed": seed,
                "acc_original": acc_original,
                "acc_compressed": acc_compressed,
                "acc_distilled": acc_distilled,
                "params": params,
                "accuracy_to_size_ratio": acc_distilled / size_gb(params),
            }
        )
        if config.save_checkpoints:
            save_checkpoint(student, out / "checkpoints" / f"student_{ds.name}_seed{seed}.ckpt")

    return {"records": records, "distill_rows": distill_rows}


def _gather_cells(config: RunConfig, jobs: int, cell_fn) -> tuple[list[dict], list[str]]:
    cells = [(i, seed) for i in range(len(config.datasets)) for seed in config.seeds]
    results: dict[tuple[int, int], dict] = {}
    errors: list[str] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(cell_fn, config, i, s): (i, s) for i, s in cells}
            for fut, cell in futures.items():
                try:
                    results[cell] = fut.result()
                except Exception:
                    errors.append(f"cell dataset={config.datasets[cell[0]].name} seed={cell[1]}:\n"
                                  + traceback.format_exc())
    else:
        for cell in cells:
            try:
                results[cell] = cell_fn(config, *cell)
            except Exception:
                errors.append(f"cell dataset={config.datasets[cell[0]].name} seed={cell[1]}:\n"
                              + traceback.format_exc())
    ordered = [results[c] for c in sorted(results) if c in results]
    return ordered, errors


def _finish(config: RunConfig, outputs: list[dict], errors: list[str]) -> int:
    report = ExperimentReport()
    for out in outputs:
        for rec in out.get("records", []):
            report.runs.append(
                RunRecord(rec["dataset"], rec["strategy"], rec["seed"], rec["trace"], rec["importances"])
            )
        report.distill_rows.extend(out.get("distill_rows", []))
        report.randomization_rows.extend(out.get("randomization_rows", []))
    out_dir = Path(config.out_dir)
    emit_report(report, out_dir)
    if config.figures:
        from .figures import render_figures

        render_figures(report, out_dir)
    if errors:
        with open(out_dir / "errors.log", "w", encoding="utf-8") as fh:
            fh.write("\n".join(errors))
        print(f"{len(errors)} run(s) failed; see {out_dir / 'errors.log'}", file=sys.stderr)
        return 1
    return 0


def cmd_run(args) -> int:
    config = load_config(args.config, vars(args))
    outputs, errors = _gather_cells(config, args.jobs, _run_cell)
    return _finish(config, outputs, errors)


def _randomization_cell(config: RunConfig, ds_index: int, seed: int) -> dict:
    ds = config.datasets[ds_index]
    if config.model.n_layers != 12:
        raise ConfigError("randomization-test requires the canonical 12-layer model")
    splits = generate_corpus(ds)
    run_data = make_run_data(splits, config.settings, config.model.max_seq_len)
    baseline = _train_baseline(config, splits, seed)

    forest = run_strategy(
        StrategySpec("forest_fusion"),
        baseline.copy(),
        run_data,
        config.steps,
        seed,
        fine_tune_config=config.fine_tune,
        forest_params=config.forest,
        ridge_lambda=config.ridge_lambda,
        header_extra={"dataset": ds.name},
    )
    rows = [
        {
            "dataset": ds.name,
            "seed": seed,
            "kind": "forest_fusion",
            "repeat": 0,
            "max_accuracy": forest.trace.max_accuracy(),
            "mean_max_accuracy": forest.trace.max_accuracy(),
            "prune_order": forest.trace.prune_order,
        }
    ]
    for kind in ("random12", "random10"):
        rnd = randomization_test(
            kind,
            baseline,
            run_data,
            config.steps,
            derive_seed(seed, ds.name, kind),
            repeats=config.randomization_repeats,
            fine_tune_config=config.fine_tune,
        )
        for rep, (mx, order) in enumerate(zip(rnd.per_repeat_max, rnd.per_repeat_orders)):
            rows.append(
                {
                    "dataset": ds.name,
                    "seed": seed,
                    "kind": kind,
                    "repeat": rep,
                    "max_accuracy": mx,
                    "mean_max_accuracy": rnd.mean_max,
                    "prune_order": order,
                }
            )
    records = [
        {
            "dataset": ds.name,
            "strategy": "forest_fusion",
            "seed": seed,
            "trace": forest.trace,
            "importances": None,
        }
    ]
    return {"records": records, "randomization_rows": rows, "distill_rows": []}


def cmd_randomization_test(args) -> int:
    config = load_config(args.config, vars(args))
    outputs, errors = _gather_cells(config, args.jobs, _randomization_cell)
    return _finish(config, outputs, errors)


def cmd_signals(args) -> int:
    config = load_config(args.config, vars(args))
    model = load_checkpoint(args.checkpoint)
    ds = config.datasets[0]
    if ds.vocab_size > model.config.vocab_size or ds.n_classes != model.config.n_classes:
        raise ConfigError(
            f"checkpoint model (vocab {model.config.vocab_size}, {model.config.n_classes} classes) "
            f"does not match dataset '{ds.name}'"
        )
    splits = generate_corpus(ds)
    run_data = make_run_data(splits, config.settings, model.config.max_seq_len)
    matrix = build_signal_matrix(model, run_data.probe_batches)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "signals.csv"
    matrix.to_csv(path)
    print(path)
    return 0


def cmd_distill(args) -> int:
    config = load_config(args.config, vars(args))
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.student)
    ds = config.datasets[0]
    if ds.vocab_size > teacher.config.vocab_size or ds.n_classes != teacher.config.n_classes:
        raise ConfigError(f"teacher checkpoint does not match dataset '{ds.name}'")
    splits = generate_corpus(ds)
    run_data = make_run_data(splits, config.settings, teacher.config.max_seq_len)
    acc_original = evaluate_accuracy(teacher, run_data.test_batches)
    acc_compressed = evaluate_accuracy(student, run_data.test_batches)
    dconf = DistillConfig(
        temperature=config.distill_temperature,
        alpha=config.distill_alpha,
        train=replace(
            config.fine_tune,
            epochs=config.distill_epochs,
            seed=derive_seed(config.seeds[0], ds.name, "distill"),
        ),
    )
    distill_train(teacher, student, run_data.fine_tune_samples, dconf)
    acc_distilled = evaluate_accuracy(student, run_data.test_batches)
    params = param_count(student.config, student.prune_mask)
    report = ExperimentReport(
        distill_rows=[
            {
                "dataset": ds.name,
                "seed": config.seeds[0],
                "acc_original": acc_original,
                "acc_compressed": acc_compressed,
                "acc_distilled": acc_distilled,
                "params": params,
                "accuracy_to_size_ratio": acc_distilled / size_gb(params),
            }
        ]
    )
    emit_report(report, config.out_dir)
    if config.figures:
        from .figures import render_figures

        render_figures(report, config.out_dir)
    return 0


def _trace_from_log(records: list[dict]) -> tuple[str, PruningTrace, list | None]:
    header = records[0]
    if header.get("record") != "header":
        raise ConfigError("run log does not start with a header record")
    trace = PruningTrace(header["strategy"], header["seed"], header["n_layers"])
    trace.steps.append(TraceStep(0, -1, header["baseline_accuracy"], header["baseline_params"]))
    importances = None
    for rec in records[1:]:
        if rec.get("record") != "step":
            continue
        trace.steps.append(
            TraceStep(rec["step"], rec["chosen"], rec["accuracy"], rec["param_count"])
        )
        if importances is None and rec.get("importances") is not None:
            importances = rec["importances"]
    return header.get("dataset", "unknown"), trace, importances


def cmd_report(args) -> int:
    out_dir = Path(args.out_dir or os.environ.get("PRUNEFUSE_OUT") or "out")
    log_dir = out_dir / "logs"
    if not log_dir.is_dir():
        raise ConfigError(f"no run logs under {log_dir}; nothing to aggregate")
    report = ExperimentReport()
    for log_path in sorted(log_dir.glob("*.jsonl")):
        dataset, trace, importances = _trace_from_log(read_run_log(log_path))
        report.runs.append(RunRecord(dataset, trace.strategy, trace.seed, trace, importances))
    report.randomization_rows = _read_randomization_csv(out_dir / "randomization_tests.csv")
    report.distill_rows = _read_distill_csv(out_dir / "distill_report.csv")
    emit_report(report, out_dir)
    from .figures import render_figures

    render_figures(report, out_dir)
    return 0


def _read_randomization_csv(path: Path) -> list[dict]:
    if not path.is_file():
        return []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        for line in fh:
            ds, seed, kind, rep, mx, mean, order = line.rstrip("\n").split(",")
            rows.append(
                {
                    "dataset": ds,
                    "seed": int(seed),
                    "kind": kind,
                    "repeat": int(rep),
                    "max_accuracy": float(mx),
                    "mean_max_accuracy": float(mean),
                    "prune_order": [int(x) for x in order.split()] if order else [],
                }
            )
    return rows


def _read_distill_csv(path: Path) -> list[dict]:
    if not path.is_file():
        return []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            ds, seed, ao, ac, ad, params, _, ratio = line.rstrip("\n").split(",")
            rows.append(
                {
                    "dataset": ds,
                    "seed": int(seed),
                    "acc_original": float(ao),
                    "acc_compressed": float(ac),
                    "acc_distilled": float(ad),
                    "params": int(params),
                    "accuracy_to_size_ratio": float(ratio),
                }
            )
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunefuse",
        description="Transformer layer-pruning laboratory: single-signal and fusion strategies, "
        "knowledge distillation, and report generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--out-dir", dest="out_dir", default=None, help="output directory override")
        p.add_argument("--seed", default=None, help="comma-separated seed override")
        p.add_argument("--strategy", default=None, help="comma-separated strategy override")
        p.add_argument("--steps", type=int, default=None, help="pruning steps override")
        p.add_argument("--jobs", type=int, default=1, help="parallel (dataset, seed) cells")

    p_run = sub.add_parser("run", help="run the dataset x strategy x seed grid and emit reports")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_sig = sub.add_parser("signals", help="write the 12-column signal CSV for a checkpoint")
    common(p_sig)
    p_sig.add_argument("--checkpoint", required=True)
    p_sig.set_defaults(fn=cmd_signals)

    p_dst = sub.add_parser("distill", help="distill a compressed checkpoint against a teacher")
    common(p_dst)
    p_dst.add_argument("--teacher", required=True)
    p_dst.add_argument("--student", required=True)
    p_dst.set_defaults(fn=cmd_distill)

    p_rnd = sub.add_parser(
        "randomization-test",
        help="forest fusion once plus random12/random10 repeats per dataset-seed",
    )
    common(p_rnd)
    p_rnd.set_defaults(fn=cmd_randomization_test)

    p_rep = sub.add_parser("report", help="re-aggregate reports and figures from run logs")
    p_rep.add_argument("--out-dir", dest="out_dir", default=None)
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PruneError, ModelError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
