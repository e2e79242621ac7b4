import numpy as np
import numpy.testing as npt
import pytest

from prunefuse.data import DatasetSpec, generate_corpus, batches_of, tokenize_batch
from prunefuse.model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    bert_base_per_layer_count,
    bert_base_reference_count,
    evaluate_accuracy,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grads,
    make_zero_effect_layer,
    param_count,
    per_layer_param_count,
    save_checkpoint,
    size_gb,
)

DESK = ModelConfig(seed=3)


@pytest.fixture(scope="module")
def small_batch():
    splits = generate_corpus(DatasetSpec(n_train=48, n_val=16, n_test=16, seed=5))
    return batches_of(splits.train[:16], 16)[0]


@pytest.fixture(scope="module")
def model():
    return init_model(DESK)


class TestParamCounts:
    def test_bert_base_reference_matches_published_total(self):
        assert bert_base_reference_count(n_classes=10) == 109_489_930

    def test_bert_base_per_layer_delta(self):
        assert bert_base_per_layer_count() == 7_087_872

    def test_desk_count_against_hand_formula(self):
        # independent closed form, per tensor kind
        c = DESK
        d, ff = c.d_model, c.d_ff
        emb = c.vocab_size * d + c.max_seq_len * d + 2 * d
        layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d)
        head = 2 * d + d * c.n_classes + c.n_classes
        assert param_count(c) == emb + c.n_layers * layer + head

    def test_desk_count_against_tensor_enumeration(self):
        m = init_model(DESK)
        assert param_count(DESK) == sum(t.data.size for t in m.params.values())

    def test_pruned_layers_subtract_exactly(self):
        per_layer = per_layer_param_count(DESK)
        for k in range(DESK.n_layers + 1):
            mask = [i < k for i in range(DESK.n_layers)]
            assert param_count(DESK, mask) == param_count(DESK) - k * per_layer

    def test_size_gb(self):
        assert size_gb(0) == 0.0
        assert size_gb(2**30) == 4.0
        npt.assert_allclose(size_gb(109_489_930), 0.40788, atol=5e-6)

    def test_negative_count_rejected(self):
        with pytest.raises(ModelError):
            size_gb(-1)


class TestForward:
    def test_logit_shape(self, model, small_batch):
        logits, caches = forward(model, small_batch)
        assert logits.data.shape == (16, DESK.n_classes)
        assert caches is None

    def test_all_layers_pruned_equals_head_on_embeddings(self, small_batch):
        m = init_model(DESK)
        full_logits, _ = forward(m, small_batch)
        m.prune_mask = [True] * DESK.n_layers
        pruned_logits, _ = forward(m, small_batch)
        m2 = init_model(ModelConfig(n_layers=2, seed=3))
        assert not np.array_equal(full_logits.data, pruned_logits.data)
        # identity composition: rerunning gives the identical embeddings->head path
        again, _ = forward(m, small_batch)
        npt.assert_array_equal(pruned_logits.data, again.data)

    def test_zero_effect_layer_prunes_bit_identically(self, small_batch):
        m = init_model(DESK)
        make_zero_effect_layer(m, 5)
        with_layer, _ = forward(m, small_batch)
        m.prune_mask[5] = True
        without_layer, _ = forward(m, small_batch)
        npt.assert_array_equal(with_layer.data, without_layer.data)

    def test_forward_deterministic(self, model, small_batch):
        a, _ = forward(model, small_batch)
        b, _ = forward(model, small_batch)
        npt.assert_array_equal(a.data, b.data)

    def test_capture_does_not_change_logits(self, model, small_batch):
        plain, _ = forward(model, small_batch)
        captured, caches = forward(model, small_batch, capture=True)
        npt.assert_array_equal(plain.data, captured.data)
        assert sorted(caches.activations) == list(range(DESK.n_layers))

    def test_capture_skips_pruned_layers(self, small_batch):
        m = init_model(DESK)
        m.prune_mask[4] = True
        _, caches = forward(m, small_batch, capture=True)
        assert 4 not in caches.activations
        assert 4 not in caches.attention

    def test_token_id_out_of_range(self, model):
        batch = tokenize_batch([((DESK.vocab_size + 3,), 0)])
        with pytest.raises(ModelError, match="token id out of range"):
            forward(model, batch)

    def test_attention_rows_stochastic_and_masked_keys_zero(self, model, small_batch):
        _, caches = forward(model, small_batch, capture=True)
        att = caches.attention[0]  # (batch, heads, seq, seq)
        mask = caches.mask
        for b in range(att.shape[0]):
            valid = mask[b] > 0
            rows = att[b][:, valid, :]
            npt.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-9)
            assert (att[b][:, :, ~valid] == 0.0).all()

    def test_activation_rows_match_unmasked_positions(self, model, small_batch):
        _, caches = forward(model, small_batch, capture=True)
        n_valid = int(small_batch.mask.sum())
        for layer, acts in caches.activations.items():
            assert acts.shape == (n_valid, DESK.d_model)


class TestLossAndGrads:
    def test_duplicated_sample_same_loss(self, model):
        splits = generate_corpus(DatasetSpec(n_train=48, n_val=16, n_test=16, seed=5))
        single = batches_of(splits.train[:1], 1)[0]
        double = batches_of(splits.train[:1] * 2, 2)[0]
        l1, _, _ = loss_and_grads(model, single)
        l2, _, _ = loss_and_grads(model, double)
        npt.assert_allclose(l1, l2, rtol=1e-12)

    def test_pruned_layer_has_no_bundle(self, small_batch):
        m = init_model(DESK)
        m.prune_mask[7] = True
        _, bundles, _ = loss_and_grads(m, small_batch)
        assert 7 not in bundles
        assert set(bundles) == set(m.live_layers())

    def test_gradients_match_finite_differences_spot_check(self, small_batch):
        from prunefuse.tensor import cross_entropy as ce_op

        m = init_model(ModelConfig(n_layers=2, seed=9))
        _, bundles, _ = loss_and_grads(m, small_batch)

        rng = np.random.default_rng(17)
        h = 1e-5
        checked = 0
        for layer, bundle in bundles.items():
            name, grads = sorted(bundle.items())[0]
            flat_idx = int(rng.integers(0, grads.size))
            param = m.params[name]
            old = param.data.reshape(-1)[flat_idx]

            def loss_value():
                logits, _ = forward(m, small_batch)
                return float(ce_op(logits, small_batch.labels).data)

            param.data.reshape(-1)[flat_idx] = old + h
            fp = loss_value()
            param.data.reshape(-1)[flat_idx] = old - h
            fm = loss_value()
            param.data.reshape(-1)[flat_idx] = old
            numeric = (fp - fm) / (2 * h)
            analytic = grads.reshape(-1)[flat_idx]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / denom < 1e-4
            checked += 1
        assert checked == 2

    def test_empty_batch_rejected(self, model):
        empty = tokenize_batch([])
        with pytest.raises(ModelError, match="empty"):
            loss_and_grads(model, empty)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        model.prune_mask[2] = True
        try:
            save_checkpoint(model, path)
            loaded = load_checkpoint(path)
        finally:
            model.prune_mask[2] = False
        assert loaded.config == model.config
        assert loaded.prune_mask[2] is True
        for name, t in model.params.items():
            npt.assert_array_equal(loaded.params[name].data, t.data)

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not json\n\x00\x01")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path, model):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        save_checkpoint(model, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestEvaluate:
    def test_accuracy_range_and_determinism(self, model):
        splits = generate_corpus(DatasetSpec(n_train=48, n_val=32, n_test=32, seed=5))
        batches = batches_of(splits.test, 16)
        a = evaluate_accuracy(model, batches)
        b = evaluate_accuracy(model, batches)
        assert 0.0 <= a <= 1.0
        assert a == b

    def test_no_samples_rejected(self, model):
        with pytest.raises(ModelError):
            evaluate_accuracy(model, [])


class TestConfigValidation:
    def test_heads_must_divide_d_model(self):
        with pytest.raises(ModelError):
            ModelConfig(d_model=30, n_heads=4)

    def test_min_layers(self):
        with pytest.raises(ModelError):
            ModelConfig(n_layers=1)
