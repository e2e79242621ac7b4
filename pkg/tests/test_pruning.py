import numpy as np
import numpy.testing as npt
import pytest

from prunefuse.data import DatasetSpec, generate_corpus
from prunefuse.model import ModelConfig, init_model, param_count, per_layer_param_count
from prunefuse.pruning import (
    ALL_STRATEGIES,
    FineTuneConfig,
    PRUNE_MAX_FIRST,
    PruneError,
    PruningTrace,
    RunSettings,
    StrategySpec,
    TraceStep,
    fine_tune,
    make_run_data,
    next_layer_single_signal,
    prune_layer,
    randomization_test,
    read_run_log,
    run_strategy,
    write_trace_csv,
)
from prunefuse.signals import SIGNAL_NAMES, SignalMatrix

SMALL_MODEL = ModelConfig(n_classes=4, seed=13)


@pytest.fixture(scope="module")
def tiny_world():
    """Small corpus + trained starting model shared across loop tests."""
    spec = DatasetSpec(n_classes=4, n_train=192, n_val=128, n_test=96, seed=31)
    splits = generate_corpus(spec)
    settings = RunSettings(fine_tune_subset=64, impact_eval_size=64, eval_batch_size=96)
    run_data = make_run_data(splits, settings)
    model = init_model(SMALL_MODEL)
    fine_tune(model, splits.train, FineTuneConfig(epochs=1, seed=2))
    return splits, run_data, model


FAST_FT = FineTuneConfig(epochs=1, batch_size=32, lr=1e-3)


class TestRegistry:
    def test_every_signal_has_a_direction(self):
        for name in SIGNAL_NAMES:
            spec = StrategySpec(name)
            expected = "prune_max_first" if name in PRUNE_MAX_FIRST else "prune_min_first"
            assert spec.direction == expected

    def test_max_first_set_is_exactly_sparsity_and_attention_entropy(self):
        assert PRUNE_MAX_FIRST == {"weight_sparsity", "attention_entropy"}

    def test_unknown_kind_rejected(self):
        with pytest.raises(PruneError, match="unknown strategy"):
            StrategySpec("gradient_voodoo")

    def test_registry_has_all_fifteen_plus_controls(self):
        assert len(ALL_STRATEGIES) == 17  # 12 signals + 2 fusion + random/random12/random10


class TestPruneLayer:
    def test_prune_marks_identity(self):
        m = init_model(SMALL_MODEL)
        prune_layer(m, 3)
        assert m.prune_mask[3] and m.live_layers() == [l for l in range(12) if l != 3]

    def test_double_prune_rejected(self):
        m = init_model(SMALL_MODEL)
        prune_layer(m, 3)
        with pytest.raises(PruneError, match="already pruned"):
            prune_layer(m, 3)

    def test_out_of_range_rejected(self):
        m = init_model(SMALL_MODEL)
        with pytest.raises(PruneError, match="out of range"):
            prune_layer(m, 12)


class TestNextLayerSingleSignal:
    def _matrix(self, column_name, values):
        data = np.zeros((len(values), len(SIGNAL_NAMES)))
        data[:, SIGNAL_NAMES.index(column_name)] = values
        return SignalMatrix(list(range(len(values))), data)

    def test_min_first_picks_minimum(self):
        m = self._matrix("intensity", [0.5, 0.1, 0.3])
        assert next_layer_single_signal(StrategySpec("intensity"), m) == 1

    def test_max_first_picks_maximum(self):
        m = self._matrix("weight_sparsity", [0.2, 0.9, 0.5])
        assert next_layer_single_signal(StrategySpec("weight_sparsity"), m) == 1

    def test_tie_breaks_to_lowest_live_index(self):
        m = SignalMatrix([4, 7, 9], np.zeros((3, len(SIGNAL_NAMES))))
        for name in ("intensity", "attention_entropy"):
            assert next_layer_single_signal(StrategySpec(name), m) == 4

    def test_fusion_kind_rejected(self):
        m = self._matrix("intensity", [0.5])
        with pytest.raises(PruneError, match="single-signal"):
            next_layer_single_signal(StrategySpec("forest_fusion"), m)


class TestFineTune:
    def test_zero_lr_keeps_parameters(self, tiny_world):
        splits, _, model = tiny_world
        m = model.copy()
        before = {k: v.data.copy() for k, v in m.params.items()}
        result = fine_tune(m, splits.train[:64], FineTuneConfig(epochs=1, lr=0.0, seed=3))
        for k, v in m.params.items():
            npt.assert_array_equal(v.data, before[k])
        assert np.isfinite(result.final_loss)

    def test_same_seed_bit_identical(self, tiny_world):
        splits, _, model = tiny_world
        a, b = model.copy(), model.copy()
        ra = fine_tune(a, splits.train[:64], FineTuneConfig(epochs=1, seed=9))
        rb = fine_tune(b, splits.train[:64], FineTuneConfig(epochs=1, seed=9))
        assert ra.loss_curve == rb.loss_curve
        for k in a.params:
            npt.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_learnable_corpus_reaches_high_train_accuracy(self):
        # full-strength pair corpus, two classes: Bayes accuracy 1.0 by the
        # counting oracle; threshold frozen after desk-scale pilots
        from prunefuse.data import batches_of
        from prunefuse.model import evaluate_accuracy

        spec = DatasetSpec(n_classes=2, n_train=512, n_val=32, n_test=32,
                           keyword_strength=1.0, noise_rate=0.0, seed=7)
        splits = generate_corpus(spec)
        model = init_model(ModelConfig(n_classes=2, seed=5))
        fine_tune(model, splits.train, FineTuneConfig(epochs=2, seed=1))
        train_acc = evaluate_accuracy(model, batches_of(splits.train, 256))
        assert train_acc > 0.9

    def test_empty_samples_rejected(self, tiny_world):
        _, _, model = tiny_world
        with pytest.raises(PruneError):
            fine_tune(model.copy(), [], FAST_FT)


class TestRunStrategy:
    def test_zero_steps_gives_baseline_only(self, tiny_world):
        _, run_data, model = tiny_world
        result = run_strategy(StrategySpec("random"), model.copy(), run_data, 0, seed=1,
                              fine_tune_config=FAST_FT)
        trace = result.trace
        assert len(trace.steps) == 1
        assert trace.steps[0].step == 0 and trace.steps[0].pruned_layer == -1
        assert trace.prune_order == []

    def test_param_counts_decrease_by_per_layer_delta(self, tiny_world):
        _, run_data, model = tiny_world
        result = run_strategy(StrategySpec("random"), model.copy(), run_data, 4, seed=2,
                              fine_tune_config=FAST_FT)
        per_layer = per_layer_param_count(SMALL_MODEL)
        counts = [s.param_count for s in result.trace.steps]
        for k, count in enumerate(counts):
            assert count == counts[0] - k * per_layer

    def test_prune_order_is_permutation_subset(self, tiny_world):
        _, run_data, model = tiny_world
        result = run_strategy(StrategySpec("random"), model.copy(), run_data, 5, seed=3,
                              fine_tune_config=FAST_FT)
        order = result.trace.prune_order
        assert len(set(order)) == 5
        assert all(0 <= l < 12 for l in order)

    def test_random_reproducible(self, tiny_world):
        _, run_data, model = tiny_world
        a = run_strategy(StrategySpec("random"), model.copy(), run_data, 3, seed=11,
                         fine_tune_config=FAST_FT)
        b = run_strategy(StrategySpec("random"), model.copy(), run_data, 3, seed=11,
                         fine_tune_config=FAST_FT)
        assert a.trace.prune_order == b.trace.prune_order
        assert [s.accuracy for s in a.trace.steps] == [s.accuracy for s in b.trace.steps]

    def test_single_signal_order_replays_from_log(self, tiny_world):
        _, run_data, model = tiny_world
        result = run_strategy(StrategySpec("intensity"), model.copy(), run_data, 3, seed=4,
                              fine_tune_config=FAST_FT)
        col = SIGNAL_NAMES.index("intensity")
        for rec in result.log_records:
            if rec["record"] != "step":
                continue
            values = [row[col] for row in rec["signals"]]
            layers = rec["signal_layers"]
            replayed = min(zip(values, layers))[1]
            assert rec["chosen"] == replayed

    def test_max_first_signal_order_replays_from_log(self, tiny_world):
        _, run_data, model = tiny_world
        result = run_strategy(StrategySpec("attention_entropy"), model.copy(), run_data, 3,
                              seed=4, fine_tune_config=FAST_FT)
        col = SIGNAL_NAMES.index("attention_entropy")
        for rec in result.log_records:
            if rec["record"] != "step":
                continue
            pairs = list(zip(rec["signals"], rec["signal_layers"]))
            replayed = min(((-row[col], layer) for row, layer in pairs))[1]
            assert rec["chosen"] == replayed

    def test_fusion_order_replays_from_logged_predictions(self, tiny_world):
        _, run_data, model = tiny_world
        result = run_strategy(StrategySpec("forest_fusion"), model.copy(), run_data, 3, seed=5,
                              fine_tune_config=FAST_FT)
        from prunefuse.fusion import select_layer

        for rec in result.log_records:
            if rec["record"] != "step":
                continue
            layers = sorted(int(k) for k in rec["predicted"])
            values = [rec["predicted"][str(l)] for l in layers]
            assert rec["chosen"] == select_layer(layers, values)
            assert rec["importances"] is not None

    def test_log_written_and_parseable(self, tiny_world, tmp_path):
        _, run_data, model = tiny_world
        log_path = tmp_path / "run.jsonl"
        run_strategy(StrategySpec("energy"), model.copy(), run_data, 2, seed=6,
                     fine_tune_config=FAST_FT, log_path=log_path,
                     header_extra={"dataset": "tiny"})
        records = read_run_log(log_path)
        assert records[0]["record"] == "header"
        assert records[0]["dataset"] == "tiny"
        assert [r["step"] for r in records[1:]] == [1, 2]

    def test_keep_best_snapshot_matches_best_step(self, tiny_world):
        _, run_data, model = tiny_world
        result = run_strategy(StrategySpec("random"), model.copy(), run_data, 4, seed=8,
                              fine_tune_config=FAST_FT, keep_best=True)
        pruned = result.trace.pruned_steps()
        best = max(pruned, key=lambda s: (s.accuracy, -s.step))
        assert result.best_step == best.step
        expected_live = 12 - best.step
        assert len(result.best_model.live_layers()) == expected_live

    def test_too_many_steps_rejected(self, tiny_world):
        _, run_data, model = tiny_world
        with pytest.raises(PruneError):
            run_strategy(StrategySpec("random"), model.copy(), run_data, 13, seed=0)

    def test_random10_step_cap(self, tiny_world):
        _, run_data, model = tiny_world
        with pytest.raises(PruneError, match="random10"):
            run_strategy(StrategySpec("random10"), model.copy(), run_data, 11, seed=0)


class TestRandomizationTest:
    def test_random10_never_touches_edges(self, tiny_world):
        _, run_data, model = tiny_world
        result = randomization_test("random10", model, run_data, steps=4, master_seed=3,
                                    repeats=3, fine_tune_config=FAST_FT)
        for order in result.per_repeat_orders:
            assert 0 not in order and 11 not in order

    def test_single_repeat_mean_equals_max(self, tiny_world):
        _, run_data, model = tiny_world
        result = randomization_test("random12", model, run_data, steps=3, master_seed=4,
                                    repeats=1, fine_tune_config=FAST_FT)
        assert result.mean_max == result.per_repeat_max[0]

    def test_same_master_seed_identical(self, tiny_world):
        _, run_data, model = tiny_world
        a = randomization_test("random12", model, run_data, steps=2, master_seed=5,
                               repeats=2, fine_tune_config=FAST_FT)
        b = randomization_test("random12", model, run_data, steps=2, master_seed=5,
                               repeats=2, fine_tune_config=FAST_FT)
        assert a.per_repeat_max == b.per_repeat_max
        assert a.per_repeat_orders == b.per_repeat_orders

    def test_kind_validation(self, tiny_world):
        _, run_data, model = tiny_world
        with pytest.raises(PruneError, match="random12 or random10"):
            randomization_test("random", model, run_data, 2, 0)

    def test_random10_needs_three_layers(self, tiny_world):
        _, run_data, _ = tiny_world
        small = init_model(ModelConfig(n_classes=4, n_layers=2, seed=0))
        with pytest.raises(PruneError, match="3 layers"):
            randomization_test("random10", small, run_data, 1, 0)


class TestTraceCsv:
    def test_trace_csv_schema_and_determinism(self, tmp_path):
        trace = PruningTrace("energy", 3, 12)
        trace.steps.append(TraceStep(0, -1, 0.75, 112004))
        trace.steps.append(TraceStep(1, 5, 0.72, 112004 - 8544))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_trace_csv(trace, p1)
        write_trace_csv(trace, p2)
        lines = p1.read_text().splitlines()
        assert lines[0] == "step,pruned_layer,test_accuracy,param_count,size_gb"
        assert len(lines) == 3
        assert p1.read_bytes() == p2.read_bytes()

    def test_max_accuracy_excludes_baseline(self):
        trace = PruningTrace("energy", 0, 12)
        trace.steps.append(TraceStep(0, -1, 0.9, 100))
        trace.steps.append(TraceStep(1, 2, 0.8, 90))
        assert trace.max_accuracy() == 0.8
        assert trace.baseline_accuracy == 0.9
        assert trace.argmax_step() == 1
