"""Sequential prune / fine-tune / evaluate engine and the strategy registry.

Fifteen strategies: the 12 single-signal rules (each pruning the extremum
of its signal column), two fusion rules (linear and forest regressors over
all 12 signals, pruning the argmin predicted impact), and uniform-random
baselines. random12 draws from all live layers; random10 excludes the
first and last layers.

Every run appends structured JSONL records (signal matrix snapshot,
measured and predicted impacts, chosen layer, accuracy) so the choice at
each step can be replayed from the log.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fusion as fusion_mod
from .data import TokenBatch, batches_of
from .model import (
    ModelState,
    evaluate_accuracy,
    forward,
    param_count,
    per_layer_param_count,
    size_gb,
)
from .seeding import derive_seed
from .signals import SIGNAL_NAMES, SignalMatrix, build_signal_matrix
from .tensor import Adam, backward, cross_entropy, zero_grads


class PruneError(Exception):
    pass


class TrainingDivergedError(PruneError):
    pass


#: pruning direction per single-signal strategy; every other signal prunes
#: its minimum first, these two prune their maximum first
PRUNE_MAX_FIRST = frozenset({"weight_sparsity", "attention_entropy"})

SIGNAL_STRATEGIES = tuple(SIGNAL_NAMES)
FUSION_STRATEGIES = ("linear_fusion", "forest_fusion")
RANDOM_STRATEGIES = ("random", "random12", "random10")
ALL_STRATEGIES = SIGNAL_STRATEGIES + FUSION_STRATEGIES + RANDOM_STRATEGIES


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    seed: int | None = None  # random kinds may carry their own seed

    def __post_init__(self):
        if self.kind not in ALL_STRATEGIES:
            raise PruneError(f"unknown strategy kind '{self.kind}'")

    @property
    def direction(self) -> str | None:
        if self.kind in SIGNAL_STRATEGIES:
            return "prune_max_first" if self.kind in PRUNE_MAX_FIRST else "prune_min_first"
        return None


@dataclass(frozen=True)
class FineTuneConfig:
    epochs: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TraceStep:
    step: int
    pruned_layer: int  # -1 on the baseline row
    accuracy: float
    param_count: int


@dataclass
class PruningTrace:
    strategy: str
    seed: int
    n_layers: int
    steps: list[TraceStep] = field(default_factory=list)

    @property
    def baseline_accuracy(self) -> float:
        return self.steps[0].accuracy

    @property
    def baseline_params(self) -> int:
        return self.steps[0].param_count

    @property
    def prune_order(self) -> list[int]:
        return [s.pruned_layer for s in self.steps if s.step > 0]

    def pruned_steps(self) -> list[TraceStep]:
        return [s for s in self.steps if s.step > 0]

    def max_accuracy(self) -> float:
        """Best test accuracy over pruned steps (baseline excluded)."""
        pruned = self.pruned_steps()
        if not pruned:
            raise PruneError(f"trace for '{self.strategy}' has no pruned steps")
        return max(s.accuracy for s in pruned)

    def argmax_step(self) -> int:
        pruned = self.pruned_steps()
        best = max(pruned, key=lambda s: (s.accuracy, -s.step))
        return best.step


def write_trace_csv(trace: PruningTrace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,pruned_layer,test_accuracy,param_count,size_gb\n")
        for s in trace.steps:
            fh.write(
                f"{s.step},{s.pruned_layer},{s.accuracy!r},{s.param_count},"
                f"{size_gb(s.param_count)!r}\n"
            )


# ---------------------------------------------------------------------------
# layer removal and fine-tuning


def prune_layer(model: ModelState, layer: int) -> ModelState:
    """Mask one live layer; forward then treats it as an identity wrapper.

    Double pruning is rejected rather than silently ignored.
    """
    if not 0 <= layer < model.config.n_layers:
        raise PruneError(f"layer index {layer} out of range [0, {model.config.n_layers})")
    if model.prune_mask[layer]:
        raise PruneError(f"layer {layer} is already pruned")
    model.prune_mask[layer] = True
    return model


def _trainable_params(model: ModelState) -> dict:
    """Embeddings, live layers, final norm, and head; pruned layers excluded."""
    live_prefixes = tuple(f"layer{i:02d}." for i in model.live_layers())
    out = {}
    for name, t in model.params.items():
        if name.startswith("layer") and not name.startswith(live_prefixes):
            continue
        out[name] = t
    return out


def _epoch_batches(samples, batch_size: int, max_len: int, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return batches_of(shuffled, batch_size, max_len)


@dataclass
class FineTuneResult:
    model: ModelState
    final_loss: float
    loss_curve: list[float]


def fine_tune(model: ModelState, samples, config: FineTuneConfig = FineTuneConfig()) -> FineTuneResult:
    """Adam fine-tuning over the sample list, in place, deterministic per seed.

    The optimizer state is fresh for every call; it does not persist across
    pruning steps.
    """
    if not samples:
        raise PruneError("fine_tune: no training samples")
    rng = np.random.default_rng(config.seed)
    adam = Adam(_trainable_params(model), lr=config.lr)
    curve: list[float] = []
    max_len = model.config.max_seq_len
    for epoch in range(config.epochs):
        for step, batch in enumerate(_epoch_batches(samples, config.batch_size, max_len, rng)):
            zero_grads(model.params)
            logits, _ = forward(model, batch)
            loss = cross_entropy(logits, batch.labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"fine_tune: non-finite loss at epoch {epoch} step {step}"
                )
            backward(loss)
            adam.step()
            curve.append(value)
    return FineTuneResult(model, curve[-1], curve)


# ---------------------------------------------------------------------------
# per-step layer choice


def next_layer_single_signal(spec: StrategySpec, matrix: SignalMatrix) -> int:
    """Registry-direction extremum of the strategy's signal column; ties
    break to the lowest live layer index."""
    if spec.kind not in SIGNAL_STRATEGIES:
        raise PruneError(f"'{spec.kind}' is not a single-signal strategy")
    col = matrix.column(spec.kind)
    values = -col if spec.direction == "prune_max_first" else col
    return fusion_mod.select_layer(matrix.layer_indices, values)


def _random_choice(kind: str, live: list[int], n_layers: int, rng: np.random.Generator) -> int:
    allowed = live
    if kind == "random10":
        allowed = [l for l in live if l not in (0, n_layers - 1)]
        if not allowed:
            raise PruneError("random10: no prunable layers left (edges excluded)")
    return int(allowed[rng.integers(0, len(allowed))])


# ---------------------------------------------------------------------------
# the sequential loop


@dataclass
class RunData:
    """Shared evaluation material for one (dataset, seed) cell. Reusing the
    same object across strategies keeps the protocol identical for all."""

    fine_tune_samples: list
    probe_batches: list[TokenBatch]
    impact_batches: list[TokenBatch]
    test_batches: list[TokenBatch]


@dataclass(frozen=True)
class RunSettings:
    fine_tune_subset: int = 64
    probe_batch_count: int = 4
    probe_batch_size: int = 32
    impact_eval_size: int = 256
    eval_batch_size: int = 256


def make_run_data(splits, settings: RunSettings, max_len: int = 32) -> RunData:
    """Deterministic subsets derived from the dataset seed only, so every
    strategy in a grid cell sees identical data."""
    rng = np.random.default_rng(derive_seed(splits.spec.seed, "rundata"))
    train, val = splits.train, splits.val

    ft_n = min(settings.fine_tune_subset, len(train))
    ft_idx = rng.choice(len(train), size=ft_n, replace=False)
    ft_samples = [train[i] for i in ft_idx]

    probe_n = min(settings.probe_batch_count * settings.probe_batch_size, len(val))
    probe_idx = rng.choice(len(val), size=probe_n, replace=False)
    probe_samples = [val[i] for i in probe_idx]
    probe = batches_of(probe_samples, settings.probe_batch_size, max_len)

    imp_n = min(settings.impact_eval_size, len(val))
    imp_idx = rng.choice(len(val), size=imp_n, replace=False)
    impact = batches_of([val[i] for i in imp_idx], settings.eval_batch_size, max_len)

    test = batches_of(splits.test, settings.eval_batch_size, max_len)
    return RunData(ft_samples, probe, impact, test)


@dataclass
class StrategyRunResult:
    trace: PruningTrace
    log_records: list[dict]
    best_model: ModelState | None = None
    best_step: int | None = None
    first_fit: object | None = None  # fusion regressor from the first step


def run_strategy(
    spec: StrategySpec,
    model: ModelState,
    run_data: RunData,
    steps: int,
    seed: int,
    fine_tune_config: FineTuneConfig = FineTuneConfig(),
    forest_params: fusion_mod.ForestParams = fusion_mod.ForestParams(),
    ridge_lambda: float = 1e-6,
    log_path=None,
    keep_best: bool = False,
    header_extra: dict | None = None,
) -> StrategyRunResult:
    """Prune `steps` layers one at a time, fine-tuning after each removal.

    The model is mutated in place. Signals are rebuilt every step from the
    probe batches; fusion strategies additionally re-measure ablation
    impacts and refit their regressor on the current live layers.
    """
    cfg = model.config
    if steps > cfg.n_layers:
        raise PruneError(f"cannot prune {steps} of {cfg.n_layers} layers")
    if spec.kind == "random10" and steps > cfg.n_layers - 2:
        raise PruneError(
            f"random10 can prune at most {cfg.n_layers - 2} layers (edges excluded)"
        )

    choice_rng = np.random.default_rng(
        derive_seed(spec.seed if spec.seed is not None else seed, "choice", spec.kind)
    )
    per_layer = per_layer_param_count(cfg)

    trace = PruningTrace(spec.kind, seed, cfg.n_layers)
    records: list[dict] = []
    baseline_acc = evaluate_accuracy(model, run_data.test_batches)
    baseline_params = param_count(cfg, model.prune_mask)
    trace.steps.append(TraceStep(0, -1, baseline_acc, baseline_params))
    header = {
        "record": "header",
        "strategy": spec.kind,
        "seed": seed,
        "n_layers": cfg.n_layers,
        "baseline_accuracy": baseline_acc,
        "baseline_params": baseline_params,
        "per_layer_params": per_layer,
        "steps": steps,
    }
    if header_extra:
        header.update(header_extra)
    records.append(header)

    best_model = None
    best = None  # (accuracy, -step)
    first_fit = None

    for step in range(1, steps + 1):
        live = model.live_layers()
        rec: dict = {"record": "step", "step": step, "live_layers": list(live)}

        if spec.kind in RANDOM_STRATEGIES:
            chosen = _random_choice(spec.kind, live, cfg.n_layers, choice_rng)
        else:
            matrix = build_signal_matrix(model, run_data.probe_batches)
            rec["signal_layers"] = list(matrix.layer_indices)
            rec["signals"] = [[float(v) for v in row] for row in matrix.values]
            if spec.kind in SIGNAL_STRATEGIES:
                chosen = next_layer_single_signal(spec, matrix)
            else:
                impacts = fusion_mod.measure_impacts(model, run_data.impact_batches)
                rec["impacts"] = {str(l): float(d) for l, d in zip(impacts.layer_indices, impacts.deltas)}
                if spec.kind == "linear_fusion":
                    fit = fusion_mod.fit_linear(matrix.values, impacts.deltas, ridge_lambda)
                else:
                    fit = fusion_mod.fit_forest(
                        matrix.values,
                        impacts.deltas,
                        replace(forest_params, seed=derive_seed(seed, "forest", step)),
                    )
                predicted = fit.predict(matrix.values)
                rec["predicted"] = {str(l): float(p) for l, p in zip(matrix.layer_indices, predicted)}
                normalized, _ = fusion_mod.extract_importance(fit)
                rec["importances"] = [float(v) for v in normalized]
                chosen = fusion_mod.select_layer(matrix.layer_indices, predicted)
                if first_fit is None:
                    first_fit = fit

        prune_layer(model, chosen)
        ft_seed = derive_seed(seed, "finetune", step)
        fine_tune(model, run_data.fine_tune_samples, replace(fine_tune_config, seed=ft_seed))
        acc = evaluate_accuracy(model, run_data.test_batches)
        params_now = param_count(cfg, model.prune_mask)

        trace.steps.append(TraceStep(step, chosen, acc, params_now))
        rec.update({"chosen": chosen, "accuracy": acc, "param_count": params_now})
        records.append(rec)

        if keep_best and (best is None or (acc, -step) > best):
            best = (acc, -step)
            best_model = model.copy()

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    best_step = -best[1] if best is not None else None
    return StrategyRunResult(trace, records, best_model, best_step, first_fit)


def read_run_log(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# layer-randomization tests


@dataclass
class RandomizationResult:
    kind: str
    per_repeat_max: list[float]
    per_repeat_orders: list[list[int]]
    traces: list[PruningTrace]

    @property
    def mean_max(self) -> float:
        return float(np.mean(self.per_repeat_max))


def randomization_test(
    kind: str,
    model: ModelState,
    run_data: RunData,
    steps: int,
    master_seed: int,
    repeats: int = 10,
    fine_tune_config: FineTuneConfig = FineTuneConfig(),
) -> RandomizationResult:
    """Repeat a random pruning run `repeats` times from the same starting
    model with distinct derived seeds; report per-repeat maxima and their
    mean. random10 never selects the first or last layer."""
    if kind not in ("random12", "random10"):
        raise PruneError(f"randomization_test: kind must be random12 or random10, got '{kind}'")
    if kind == "random10" and model.config.n_layers < 3:
        raise PruneError("random10 needs at least 3 layers")
    if kind == "random10":
        steps = min(steps, model.config.n_layers - 2)
    maxima, orders, traces = [], [], []
    for rep in range(repeats):
        rep_seed = derive_seed(master_seed, kind, "repeat", rep)
        result = run_strategy(
            StrategySpec(kind, seed=rep_seed),
            model.copy(),
            run_data,
            steps,
            rep_seed,
            fine_tune_config=fine_tune_config,
        )
        maxima.append(result.trace.max_accuracy())
        orders.append(result.trace.prune_order)
        traces.append(result.trace)
    return RandomizationResult(kind, maxima, orders, traces)
