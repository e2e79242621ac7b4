import numpy as np
import pytest

from prunefuse.data import (
    BOS_ID,
    PAD_ID,
    CorpusSplits,
    DataError,
    DatasetSpec,
    class_pair,
    export_corpus,
    generate_corpus,
    import_split,
    keyword_count_label,
    pool_size,
    tokenize_batch,
)


def small_spec(**kw):
    base = dict(n_classes=4, vocab_size=64, n_train=128, n_val=48, n_test=48, seed=9)
    base.update(kw)
    return DatasetSpec(**base)


class TestGeneration:
    def test_oracle_is_perfect_at_full_strength(self):
        splits = generate_corpus(small_spec(keyword_strength=1.0, noise_rate=0.0))
        for split in (splits.train, splits.val, splits.test):
            hits = [keyword_count_label(toks, 4) == y for toks, y in split]
            assert np.mean(hits) == 1.0

    def test_zero_strength_is_chance_level(self):
        splits = generate_corpus(small_spec(keyword_strength=0.0, n_train=512))
        hits = [keyword_count_label(toks, 4) == y for toks, y in splits.train]
        assert abs(np.mean(hits) - 0.25) < 0.08

    def test_same_seed_identical_corpora(self):
        a = generate_corpus(small_spec())
        b = generate_corpus(small_spec())
        assert a.train == b.train and a.val == b.val and a.test == b.test

    def test_different_seed_differs(self):
        a = generate_corpus(small_spec(seed=1))
        b = generate_corpus(small_spec(seed=2))
        assert a.train != b.train

    def test_splits_pairwise_disjoint(self):
        splits = generate_corpus(small_spec(keyword_strength=1.0, noise_rate=0.0))
        train = {t for t, _ in splits.train}
        val = {t for t, _ in splits.val}
        test = {t for t, _ in splits.test}
        assert not (train & val) and not (train & test) and not (val & test)

    def test_class_histogram_uniform_within_one(self):
        splits = generate_corpus(small_spec(n_train=130, n_val=49, n_test=50))
        for split in (splits.train, splits.val, splits.test):
            counts = np.bincount([y for _, y in split], minlength=4)
            assert counts.max() - counts.min() <= 1

    def test_samples_start_with_bos_and_stay_in_vocab(self):
        splits = generate_corpus(small_spec())
        for toks, _ in splits.train:
            assert toks[0] == BOS_ID
            assert 8 <= len(toks) <= 32
            assert all(0 <= t < 64 for t in toks)

    def test_no_foreign_pair_ever_completes(self):
        splits = generate_corpus(small_spec(keyword_strength=1.0, noise_rate=0.0, n_train=256))
        for toks, y in splits.train:
            present = set(toks)
            complete = [c for c in range(4) if set(class_pair(c)) <= present]
            assert complete == [y]

    def test_vocab_too_small_rejected(self):
        with pytest.raises(DataError, match="too small"):
            DatasetSpec(n_classes=20, vocab_size=23)

    def test_class_count_bounds(self):
        with pytest.raises(DataError):
            DatasetSpec(n_classes=1)
        with pytest.raises(DataError):
            DatasetSpec(n_classes=21)

    def test_pool_shares_singles_between_adjacent_classes(self):
        assert pool_size(4) == 5
        assert class_pair(0)[1] == class_pair(1)[0]


class TestTokenize:
    def test_short_sequence_padded(self):
        batch = tokenize_batch([((BOS_ID, 5, 6, 7, 8), 2)])
        assert batch.ids.shape == (1, 32)
        assert list(batch.ids[0][:5]) == [BOS_ID, 5, 6, 7, 8]
        assert (batch.ids[0][5:] == PAD_ID).all()
        assert list(batch.mask[0]) == [1] * 5 + [0] * 27
        assert batch.labels[0] == 2

    def test_long_sequence_truncated_keeps_first_32(self):
        toks = tuple(range(2, 42))
        batch = tokenize_batch([(toks, 0)])
        assert list(batch.ids[0]) == list(toks[:32])
        assert batch.mask[0].sum() == 32

    def test_empty_sequence_flagged_degenerate(self):
        batch = tokenize_batch([((), 1)])
        assert (batch.ids[0] == PAD_ID).all()
        assert batch.mask[0].sum() == 0
        assert batch.degenerate_rows == [0]


class TestExportImport:
    def test_roundtrip(self, tmp_path):
        splits = generate_corpus(small_spec())
        export_corpus(splits, tmp_path)
        for name in ("train", "val", "test"):
            loaded = import_split(tmp_path / f"{name}.txt")
            assert loaded == getattr(splits, name)

    def test_malformed_record_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 x 4\n")
        with pytest.raises(DataError, match="malformed"):
            import_split(path)

    def test_export_deterministic(self, tmp_path):
        splits = generate_corpus(small_spec())
        export_corpus(splits, tmp_path / "a")
        export_corpus(splits, tmp_path / "b")
        for name in ("train", "val", "test"):
            assert (tmp_path / "a" / f"{name}.txt").read_bytes() == (
                tmp_path / "b" / f"{name}.txt"
            ).read_bytes()
