import numpy as np
import pytest

from cgl.config import load_config
from cgl.data import (Dataset, batches, blob_means, full_data_subsets, holdout_split, load_csv, load_idx,
                      partition, save_csv, save_idx, synth_blobs)
from cgl.errors import ConfigurationError, DataError, ParseError
from cgl.experiment import baseline_config, execute


def toy(N, C=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(N, 3)), np.arange(N) % C, C, "toy")


class TestDataset:
    def test_read_only(self):
        d = toy(4)
        with pytest.raises(ValueError):
            d.features[0, 0] = 1.0

    def test_label_range(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 1)), np.array([0, 2]), 2)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 1)), np.array([0, 1]), 2)


class TestPartition:
    def test_single_subset(self):
        p = partition(toy(7), 1, seed=0)
        np.testing.assert_array_equal(p.subset_indices(0), np.arange(7))

    def test_balanced_remainder(self):
        assert sorted(partition(toy(10), 4, seed=3).sizes(), reverse=True) == [3, 3, 2, 2]

    def test_stratified_two_per_class(self):
        d = toy(8, C=2)
        p = partition(d, 2, seed=5, mode="stratified")
        for k in range(2):
            labels = d.labels[p.subset_indices(k)]
            assert np.bincount(labels, minlength=2).tolist() == [2, 2]

    def test_disjoint_cover(self):
        p = partition(toy(101, C=3), 6, seed=1)
        parts = [p.subset_indices(k) for k in range(6)]
        joined = np.concatenate(parts)
        assert sorted(joined.tolist()) == list(range(101))

    def test_deterministic(self):
        a = partition(toy(50), 3, seed=9).assignment
        b = partition(toy(50), 3, seed=9).assignment
        np.testing.assert_array_equal(a, b)

    def test_overlap_extends_but_base_disjoint(self):
        p = partition(toy(100), 4, seed=2, overlap=0.2)
        for k in range(4):
            base = p.base_indices(k)
            full = p.subset_indices(k)
            assert len(full) == len(base) + 5
            assert set(base) <= set(full)

    def test_too_many_subsets(self):
        with pytest.raises(ConfigurationError):
            partition(toy(3), 4, seed=0)

    def test_full_data(self):
        subsets = full_data_subsets(5, 3)
        assert all(s.tolist() == list(range(5)) for s in subsets)


class TestHoldout:
    def test_sizes(self):
        train, hold = holdout_split(toy(1000), 0.1, seed=0)
        assert (len(train), len(hold)) == (900, 100)

    def test_large_split_sizes(self):
        d = Dataset(np.zeros((50_000, 1)), np.zeros(50_000, dtype=int), 1)
        train, hold = holdout_split(d, 0.1, seed=0)
        assert (len(train), len(hold)) == (45_000, 5_000)

    def test_deterministic_and_disjoint(self):
        d = toy(60)
        a_train, a_hold = holdout_split(d, 0.25, 4)
        b_train, b_hold = holdout_split(d, 0.25, 4)
        np.testing.assert_array_equal(a_hold.features, b_hold.features)
        rows = {tuple(r) for r in a_train.features} | {tuple(r) for r in a_hold.features}
        assert len(rows) == 60

    def test_bad_fraction(self):
        with pytest.raises(ConfigurationError):
            holdout_split(toy(10), 1.0, 0)


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(np.arange(10), 4, seed=0, epoch=0)] == [4, 4, 2]

    def test_deterministic(self):
        a = batches(np.arange(30), 7, seed=1, epoch=3)
        b = batches(np.arange(30), 7, seed=1, epoch=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_permutation(self):
        idx = np.array([3, 9, 14, 20, 21, 40, 41])
        got = np.concatenate(batches(idx, 3, seed=2, epoch=1))
        assert sorted(got.tolist()) == idx.tolist()

    def test_epochs_differ(self):
        a = np.concatenate(batches(np.arange(30), 30, seed=1, epoch=0))
        b = np.concatenate(batches(np.arange(30), 30, seed=1, epoch=1))
        assert not np.array_equal(a, b)


class TestBlobs:
    def test_shapes(self):
        d = synth_blobs(500, 8, 16, 1.0, 7)
        assert d.features.shape == (4000, 16) and np.bincount(d.labels).tolist() == [500] * 8

    def test_tiny_spread_separable(self):
        d = synth_blobs(50, 5, 6, 1e-3, 0)
        mu = blob_means(5, 6, 3.5)
        pred = ((d.features[:, None] - mu[None]) ** 2).sum(-1).argmin(1)
        assert (pred == d.labels).mean() == 1.0

    def test_large_spread_near_chance(self):
        d = synth_blobs(2000, 2, 4, 100.0, 1)
        w = np.linalg.lstsq(np.c_[d.features, np.ones(len(d))], 2.0 * d.labels - 1, rcond=None)[0]
        acc = ((np.c_[d.features, np.ones(len(d))] @ w > 0) == d.labels).mean()
        assert abs(acc - 0.5) < 0.05

    def test_circle_layout(self):
        mu = blob_means(10, 2, 2.0)
        np.testing.assert_allclose(np.linalg.norm(mu, axis=1), 2.0)

    def test_two_layer_baseline_regression(self):
        # frozen regression target for the generator: an L=2 single path learns it well
        cfg = load_config().replace(**{"data.spread": 1.0, "data.n_per_class": 500, "data.test_per_class": 125,
                                       "grid.L": 2, "train.epochs": 30, "seed": 7})
        run = execute(baseline_config(cfg))
        assert run.test_accuracy(0) > 0.90


class TestCsv:
    def test_three_rows(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,0\n")
        d = load_csv(f)
        assert (len(d), d.dim, d.n_classes) == (3, 2, 2)

    def test_label_by_position(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,a\n1,2.5\n0,3.5\n")
        d = load_csv(f, label_column=0)
        assert d.labels.tolist() == [1, 0] and d.features[:, 0].tolist() == [2.5, 3.5]

    def test_non_numeric_cell(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("a,b,label\n1,2,0\n3,oops,1\n")
        with pytest.raises(ParseError) as err:
            load_csv(f)
        assert err.value.line == 3 and err.value.field == "b"

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing.csv"):
            load_csv(tmp_path / "missing.csv")

    def test_round_trip_exact(self, tmp_path):
        d = synth_blobs(5, 3, 4, 1.0, 0)
        save_csv(d, tmp_path / "x.csv")
        back = load_csv(tmp_path / "x.csv", n_classes=3)
        np.testing.assert_array_equal(back.features, d.features)
        np.testing.assert_array_equal(back.labels, d.labels)


class TestIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(6, 4, 3), dtype=np.uint8)
        labels = np.array([0, 1, 2, 1, 0, 2], dtype=np.uint8)
        save_idx(imgs, labels, tmp_path / "i.idx", tmp_path / "l.idx")
        assert (tmp_path / "i.idx").read_bytes()[:4] == b"\x00\x00\x08\x03"
        assert (tmp_path / "l.idx").read_bytes()[:4] == b"\x00\x00\x08\x01"
        d = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        assert d.features.shape == (6, 12) and d.n_classes == 3
        np.testing.assert_allclose(d.features * 255, imgs.reshape(6, -1))

    def test_wrong_magic(self, tmp_path):
        save_idx(np.zeros((1, 2, 2)), np.zeros(1), tmp_path / "i.idx", tmp_path / "l.idx")
        with pytest.raises(ParseError, match="magic"):
            load_idx(tmp_path / "l.idx", tmp_path / "i.idx")

    def test_truncated(self, tmp_path):
        save_idx(np.zeros((2, 2, 2)), np.zeros(2), tmp_path / "i.idx", tmp_path / "l.idx")
        raw = (tmp_path / "i.idx").read_bytes()
        (tmp_path / "i.idx").write_bytes(raw[:-1])
        with pytest.raises(ParseError, match="byte"):
            load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
