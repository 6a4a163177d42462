import numpy as np
import pytest

from skipgate.data import (
    PAD,
    batch_iter,
    ingest_corpus,
    make_windows,
    split_dataset,
    synthetic_corpus,
    tokenize_text,
)
from skipgate.errors import DataError


class TestWindows:
    def test_two_chars_window_two(self):
        ds = make_windows(tokenize_text("ab"), 2)
        assert ds.inputs.tolist() == [[ord("a"), ord("b")]]
        assert ds.targets.tolist() == [[ord("b"), PAD]]

    def test_partial_final_window_dropped(self):
        ds = make_windows(tokenize_text("abcde"), 2)
        assert len(ds) == 2  # "ab", "cd"; the trailing "e" is dropped
        assert ds.targets.tolist() == [
            [ord("b"), ord("c")],
            [ord("d"), ord("e")],
        ]

    def test_too_short_corpus(self):
        with pytest.raises(DataError):
            make_windows(tokenize_text("a"), 2)

    def test_only_last_target_padded(self):
        ds = make_windows(tokenize_text("abcd"), 2)
        flat = ds.targets.reshape(-1)
        assert (flat == PAD).sum() == 1
        assert flat[-1] == PAD


class TestIngest:
    def test_deterministic_shuffle(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text(synthetic_corpus(5000, seed=3))
        a = ingest_corpus(path, 16, seed=7)
        b = ingest_corpus(path, 16, seed=7)
        assert np.array_equal(a.inputs, b.inputs)
        c = ingest_corpus(path, 16, seed=8)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_window_cap(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text(synthetic_corpus(200_000, seed=0))
        ds = ingest_corpus(path, 16, seed=0, max_windows=5000)
        assert len(ds) == 5000
        full = ingest_corpus(path, 16, seed=0, max_windows=None)
        assert len(full) > 5000

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        with pytest.raises(DataError):
            ingest_corpus(path, 16)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ingest_corpus(tmp_path / "nope.txt", 16)


class TestBatches:
    def test_identical_seed_identical_order(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text(synthetic_corpus(20_000, seed=1))
        ds = ingest_corpus(path, 16, seed=0)
        a = [inp.copy() for inp, _ in batch_iter(ds, 4, 10, seed=5)]
        b = [inp.copy() for inp, _ in batch_iter(ds, 4, 10, seed=5)]
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_yields_exactly_steps(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text(synthetic_corpus(20_000, seed=1))
        ds = ingest_corpus(path, 16, seed=0)
        assert sum(1 for _ in batch_iter(ds, 4, 37, seed=0)) == 37

    def test_batch_larger_than_dataset(self):
        ds = make_windows(tokenize_text("abcdefgh"), 2)
        with pytest.raises(DataError):
            next(batch_iter(ds, 100, 1, seed=0))


class TestSplit:
    def test_partitions_the_windows(self):
        ds = make_windows(tokenize_text(synthetic_corpus(10_000, 0)), 8)
        train, val = split_dataset(ds, 0.25)
        assert len(train) + len(val) == len(ds)
        # the two halves are exactly the original window list, split in two:
        # no window instance appears on both sides
        rejoined = np.concatenate([train.inputs, val.inputs])
        assert np.array_equal(rejoined, ds.inputs)

    def test_cannot_hold_out_everything(self):
        ds = make_windows(tokenize_text("abcdefgh"), 2)
        with pytest.raises(DataError):
            split_dataset(ds, 1.0)


class TestSyntheticCorpus:
    def test_deterministic_and_ascii(self):
        a = synthetic_corpus(10_000, seed=4)
        assert a == synthetic_corpus(10_000, seed=4)
        assert len(a) == 10_000
        assert max(tokenize_text(a)) < 256
