import struct

import numpy as np
import pytest

from subic.data import (
    Dataset,
    batches,
    gen_synthetic,
    load_dataset,
    load_features,
    load_labels,
    save_features,
    save_labels,
    split,
    split_counts,
)
from subic.errors import BadMagicError, DimensionOverflowError, FormatError, TruncatedFileError


class TestSynthetic:
    def test_zero_noise_collapses_classes(self):
        ds = gen_synthetic(40, 5, 4, 1.0, 0.0, seed=0)
        for c in range(4):
            rows = ds.features[ds.labels == c]
            assert np.all(rows == rows[0])

    def test_seeded(self):
        a = gen_synthetic(100, 8, 5, 1.0, 1.0, seed=3)
        b = gen_synthetic(100, 8, 5, 1.0, 1.0, seed=3)
        c = gen_synthetic(100, 8, 5, 1.0, 1.0, seed=4)
        np.testing.assert_array_equal(a.features, b.features)
        assert not np.array_equal(a.features, c.features)

    def test_balanced_labels(self):
        ds = gen_synthetic(103, 4, 10, 1.0, 1.0, seed=0)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_well_separated_is_nearly_separable(self):
        ds = gen_synthetic(2000, 32, 10, 10.0, 1.0, seed=1)
        centers = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(10)])
        d2 = ((ds.features[:, None, :] - centers[None]) ** 2).sum(-1)
        assert (d2.argmin(axis=1) == ds.labels).mean() > 0.99

    @pytest.mark.parametrize("args", [(5, 4, 10, 1, 1), (20, 0, 2, 1, 1), (20, 2, 2, 0, 1), (20, 2, 2, 1, -1)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(ValueError):
            gen_synthetic(*args, seed=0)


class TestFileFormats:
    def test_feature_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(17, 5)).astype(np.float32)
        save_features(tmp_path / "f", x)
        np.testing.assert_array_equal(load_features(tmp_path / "f"), x)
        raw = (tmp_path / "f").read_bytes()
        assert raw[:4] == b"SUBF" and struct.unpack("<3I", raw[4:16]) == (1, 17, 5)
        assert len(raw) == 16 + 4 * 17 * 5

    def test_empty_features(self, tmp_path):
        save_features(tmp_path / "f", np.zeros((0, 3)))
        assert load_features(tmp_path / "f").shape == (0, 3)

    def test_label_roundtrip(self, tmp_path):
        y = np.array([0, 3, 2, 2, 1])
        save_labels(tmp_path / "l", y, 4)
        back, C = load_labels(tmp_path / "l")
        np.testing.assert_array_equal(back, y)
        assert C == 4

    def test_bad_magic(self, tmp_path):
        save_features(tmp_path / "f", np.zeros((2, 2)))
        raw = (tmp_path / "f").read_bytes()
        (tmp_path / "g").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(BadMagicError):
            load_features(tmp_path / "g")
        with pytest.raises(BadMagicError):
            load_labels(tmp_path / "f")

    def test_truncated(self, tmp_path):
        save_features(tmp_path / "f", np.ones((4, 3)))
        raw = (tmp_path / "f").read_bytes()
        for cut in (2, 10, len(raw) - 1):
            (tmp_path / "g").write_bytes(raw[:cut])
            with pytest.raises(TruncatedFileError):
                load_features(tmp_path / "g")

    def test_trailing_bytes(self, tmp_path):
        save_labels(tmp_path / "l", [0, 1], 2)
        (tmp_path / "m").write_bytes((tmp_path / "l").read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_labels(tmp_path / "m")

    def test_overflow(self, tmp_path):
        (tmp_path / "f").write_bytes(b"SUBF" + struct.pack("<3I", 1, 2**20, 2**20))
        with pytest.raises(DimensionOverflowError):
            load_features(tmp_path / "f")

    def test_label_out_of_range_in_file(self, tmp_path):
        (tmp_path / "l").write_bytes(b"SUBL" + struct.pack("<3I", 1, 1, 2) + struct.pack("<I", 5))
        with pytest.raises(FormatError):
            load_labels(tmp_path / "l")

    def test_csv(self, tmp_path):
        (tmp_path / "f.csv").write_text("a,b\n1,2\n3.5,-4\n")
        (tmp_path / "l.csv").write_text("label\n0\n2\n")
        ds = load_dataset(tmp_path / "f.csv", tmp_path / "l.csv")
        np.testing.assert_array_equal(ds.features, [[1, 2], [3.5, -4]])
        assert ds.C == 3 and list(ds.labels) == [0, 2]
        (tmp_path / "bad.csv").write_text("a,b\n1,x\n")
        with pytest.raises(FormatError):
            load_features(tmp_path / "bad.csv")

    def test_row_count_mismatch(self, tmp_path):
        save_features(tmp_path / "f", np.zeros((3, 2)))
        save_labels(tmp_path / "l", [0, 1], 2)
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "f", tmp_path / "l")


class TestSplit:
    ds = gen_synthetic(100, 3, 4, 1.0, 1.0, seed=0)

    def test_everything_to_train(self):
        train, db, query = split(self.ds, (1, 0, 0), seed=0)
        assert (train.n, db.n, query.n) == (100, 0, 0)

    def test_sizes_and_disjoint(self):
        parts = split(self.ds, (0.5, 0.3, 0.2), seed=1)
        assert [p.n for p in parts] == [50, 30, 20]
        rows = np.concatenate([p.features for p in parts])
        assert len({r.tobytes() for r in rows}) == 100

    def test_seed_changes_split(self):
        a = split(self.ds, (0.5, 0.3, 0.2), seed=1)[1]
        b = split(self.ds, (0.5, 0.3, 0.2), seed=2)[1]
        assert not np.array_equal(a.features, b.features)

    def test_protocol_sized_split(self):
        ds = gen_synthetic(6200, 2, 10, 1.0, 1.0, seed=0)
        parts = split(ds, (5000 / 6200, 1000 / 6200, 200 / 6200), seed=0)
        assert [p.n for p in parts] == [5000, 1000, 200]

    def test_errors(self):
        with pytest.raises(ValueError):
            split(self.ds, (0.6, 0.3, 0.2), seed=0)
        with pytest.raises(ValueError):
            split(self.ds, (0.5, 0.5), seed=0)
        with pytest.raises(ValueError):
            split_counts(self.ds, (90, 20), seed=0)


class TestBatches:
    def test_full_batch_is_permutation(self):
        it = batches(10, 10, seed=0)
        for _ in range(3):
            assert sorted(next(it)) == list(range(10))

    def test_seeded(self):
        a, b = batches(50, 7, seed=5), batches(50, 7, seed=5)
        for _ in range(20):
            np.testing.assert_array_equal(next(a), next(b))

    def test_tail_dropped(self):
        it = batches(10, 3, seed=0)
        epoch = [next(it) for _ in range(3)]
        assert all(len(b) == 3 for b in epoch)
        assert len(set(np.concatenate(epoch))) == 9

    def test_accepts_dataset(self):
        ds = Dataset(np.zeros((6, 1)), np.zeros(6, dtype=int), 1)
        assert len(next(batches(ds, 4, seed=0))) == 4

    def test_batch_larger_than_data(self):
        with pytest.raises(ValueError):
            next(batches(5, 6, seed=0))
