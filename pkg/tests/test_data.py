import gzip
import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horde import data as D
from horde.oracle import mmd2_gaussian, moment_deltas


def _rand_dataset(n=7, hw=5, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n, hw, hw, 1)) / 255.0
    return D.Dataset(rng.integers(0, 10, size=n), images=imgs)


class TestIdx:
    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_round_trip(self, tmp_path, suffix):
        ds = _rand_dataset()
        ip, lp = tmp_path / f"i{suffix}", tmp_path / f"l{suffix}"
        D.write_idx(ds, ip, lp)
        back = D.load_idx(ip, lp)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.images, ds.images)

    def test_header_layout(self, tmp_path):
        ds = _rand_dataset(n=3, hw=4)
        D.write_idx(ds, tmp_path / "i", tmp_path / "l")
        raw = (tmp_path / "i").read_bytes()
        assert raw[:16] == bytes.fromhex("00000803" "00000003" "00000004" "00000004")
        assert (tmp_path / "l").read_bytes()[:8] == bytes.fromhex("00000801" "00000003")

    def test_bad_magic(self, tmp_path):
        ds = _rand_dataset()
        D.write_idx(ds, tmp_path / "i", tmp_path / "l")
        with pytest.raises(D.BadMagicError):
            D.load_idx(tmp_path / "l", tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        D.write_idx(_rand_dataset(n=5), tmp_path / "i", tmp_path / "l")
        D.write_idx(_rand_dataset(n=6), tmp_path / "i2", tmp_path / "l2")
        with pytest.raises(D.CountMismatchError):
            D.load_idx(tmp_path / "i", tmp_path / "l2")

    def test_truncated(self, tmp_path):
        D.write_idx(_rand_dataset(), tmp_path / "i", tmp_path / "l")
        raw = (tmp_path / "i").read_bytes()
        (tmp_path / "i").write_bytes(raw[:-3])
        with pytest.raises(D.TruncatedError):
            D.load_idx(tmp_path / "i", tmp_path / "l")
        (tmp_path / "i").write_bytes(raw[:10])
        with pytest.raises(D.TruncatedError):
            D.load_idx(tmp_path / "i", tmp_path / "l")

    def test_errors_are_distinct(self):
        kinds = {D.BadMagicError, D.CountMismatchError, D.TruncatedError}
        assert len(kinds) == 3 and all(issubclass(k, D.IdxError) for k in kinds)

    def test_bundled_subset(self):
        tr, te = D.mnist_subset("train"), D.mnist_subset("test")
        assert tr.images.shape == (6000, 28, 28, 1) and te.images.shape == (1000, 28, 28, 1)
        assert tr.images.min() >= 0.0 and tr.images.max() <= 1.0
        np.testing.assert_array_equal(np.bincount(tr.labels), [600] * 10)
        np.testing.assert_array_equal(np.bincount(te.labels), [100] * 10)


class TestSynthetic:
    def test_deterministic(self):
        a = D.synth_mixture(3, 5, 4, 0.2, seed=1)
        b = D.synth_mixture(3, 5, 4, 0.2, seed=1)
        np.testing.assert_array_equal(a.features, b.features)

    def test_unit_ball(self):
        ds = D.synth_mixture(4, 50, 3, 1.0, seed=0)
        assert np.linalg.norm(ds.features, axis=1).max() <= 1.0 + 1e-12

    def test_degenerate_spread(self):
        ds = D.synth_mixture(2, 10, 3, 1e-9, seed=2)
        a, b = ds.class_samples(0), ds.class_samples(1)
        assert mmd2_gaussian(a[:5], a[5:], 0.5) < 1e-6
        assert np.all(moment_deltas(a, b, 4) > 0)

    def test_between_exceeds_within(self):
        wins = 0
        for seed in range(100):
            ds = D.synth_mixture(2, 16, 4, 0.1, seed=seed)
            a, b = ds.class_samples(0), ds.class_samples(1)
            within = mmd2_gaussian(a[:8], a[8:], 0.5)
            between = mmd2_gaussian(a[:8], b[:8], 0.5)
            wins += between > within
        assert wins >= 95

    def test_spread_positive(self):
        with pytest.raises(ValueError):
            D.synth_mixture(2, 3, 2, 0.0, seed=0)

    def test_csv_round_trip(self, tmp_path):
        ds = D.synth_mixture(3, 4, 5, 0.3, seed=3)
        D.save_features_csv(ds, tmp_path / "f.csv")
        back = D.load_features_csv(tmp_path / "f.csv")
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.features, ds.features)


class TestBatches:
    def test_pq_contract(self):
        ds = D.mnist_subset("test")
        for imgs, labels in itertools.islice(D.sample_batches(ds, D.BatchSpec(5, 8, seed=0)), 20):
            assert imgs.shape == (40, 28, 28, 1)
            _, counts = np.unique(labels, return_counts=True)
            assert counts.tolist() == [8] * 5

    def test_whole_dataset(self):
        ds = D.Dataset([0, 0, 1, 1], features=np.arange(8.0).reshape(4, 2))
        idx = next(D.batch_indices(ds.labels, D.BatchSpec(2, 2, seed=0)))
        assert sorted(idx.tolist()) == [0, 1, 2, 3]

    def test_deterministic(self):
        labels = np.repeat(np.arange(6), 10)
        a = list(itertools.islice(D.batch_indices(labels, D.BatchSpec(3, 4, seed=5)), 12))
        b = list(itertools.islice(D.batch_indices(labels, D.BatchSpec(3, 4, seed=5)), 12))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_no_replacement_within_epoch(self):
        labels = np.repeat(np.arange(4), 6)
        # 4 classes x 6 samples, P=2 Q=3: one epoch is exactly 4 batches covering everything
        idx = np.concatenate(list(itertools.islice(D.batch_indices(labels, D.BatchSpec(2, 3, seed=1)), 4)))
        assert sorted(idx.tolist()) == list(range(24))

    def test_small_class_named(self):
        labels = np.array([0] * 8 + [1] * 3 + [2] * 8)
        with pytest.raises(ValueError, match="class 1"):
            next(D.batch_indices(labels, D.BatchSpec(2, 4)))

    def test_spec_limits(self):
        with pytest.raises(ValueError):
            D.BatchSpec(P=1, Q=4)

    @settings(max_examples=25, deadline=None)
    @given(P=st.integers(2, 4), Q=st.integers(2, 4), extra=st.integers(0, 5), seed=st.integers(0, 1000))
    def test_histogram_property(self, P, Q, extra, seed):
        labels = np.repeat(np.arange(P + 1), Q + extra)
        for idx in itertools.islice(D.batch_indices(labels, D.BatchSpec(P, Q, seed=seed)), 6):
            _, counts = np.unique(labels[idx], return_counts=True)
            assert counts.tolist() == [Q] * P
            assert len(set(idx.tolist())) == P * Q
