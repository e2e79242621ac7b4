"""Shared fixtures. The directional grid is the expensive one (a full
10-seed forest/random comparison on the default dataset); it is session
scoped and computed once, only when the acceptance tests request it."""

import pytest

from prunefuse.data import DatasetSpec, generate_corpus
from prunefuse.model import ModelConfig, evaluate_accuracy, init_model
from prunefuse.pruning import (
    FineTuneConfig,
    RunSettings,
    StrategySpec,
    fine_tune,
    make_run_data,
    run_strategy,
)
from prunefuse.seeding import derive_seed

GRID_SEEDS = tuple(range(10))
GRID_KINDS = ("forest_fusion", "random", "random12", "random10")
GRID_FT = FineTuneConfig(epochs=1, batch_size=32, lr=3e-4)
GRID_BASELINE_EPOCHS = 12
GRID_STEPS = 11


@pytest.fixture(scope="session")
def directional_grid():
    """Forest fusion vs the three random controls on the default synthetic
    dataset: 12 layers, 10 seeds, full 11-step runs (10 for random10).

    Returns {kind: {seed: StrategyRunResult}} plus baselines.
    """
    splits = generate_corpus(DatasetSpec())
    run_data = make_run_data(splits, RunSettings())
    results = {kind: {} for kind in GRID_KINDS}
    baselines = {}
    for seed in GRID_SEEDS:
        model = init_model(ModelConfig(seed=derive_seed(seed, "desk", "model")))
        fine_tune(
            model,
            splits.train,
            FineTuneConfig(epochs=GRID_BASELINE_EPOCHS, seed=derive_seed(seed, "desk", "baseline")),
        )
        baselines[seed] = evaluate_accuracy(model, run_data.test_batches)
        for kind in GRID_KINDS:
            steps = GRID_STEPS - 1 if kind == "random10" else GRID_STEPS
            results[kind][seed] = run_strategy(
                StrategySpec(kind),
                model.copy(),
                run_data,
                steps,
                seed,
                fine_tune_config=GRID_FT,
                keep_best=False,
            )
    return {"results": results, "baselines": baselines, "splits": splits, "run_data": run_data}
