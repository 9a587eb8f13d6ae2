import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rowquant.data import (
    DataFormatError,
    Dataset,
    batches,
    calibration_batch,
    fit_normalization,
    load_csv,
    load_idx,
    load_idx_dir,
    normalize,
    read_idx,
    save_csv,
    save_idx,
    synth_gaussians,
    train_val_split,
    write_idx,
)
from rowquant.models import Linear, Model
from rowquant.qat import QuantizedModel, TrainConfig, train


def hand_built(tmp_path, n_images=2, n_labels=2):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    pixels = bytes([0, 255, 51, 102, 0, 0, 255, 255][: 4 * n_images])
    img.write_bytes(struct.pack(">IIII", 0x803, n_images, 2, 2) + pixels)
    lab.write_bytes(struct.pack(">II", 0x801, n_labels) + bytes([3, 1, 2][:n_labels]))
    return img, lab


class TestIdx:
    def test_hand_built(self, tmp_path):
        ds = load_idx(*hand_built(tmp_path))
        assert len(ds) == 2 and ds.sample_shape == (1, 2, 2)
        np.testing.assert_array_equal(ds.features[0, 0], [[0.0, 1.0], [0.2, 0.4]])
        np.testing.assert_array_equal(ds.features[1, 0], [[0.0, 0.0], [1.0, 1.0]])
        assert ds.labels.tolist() == [3, 1] and ds.class_count == 4

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(DataFormatError, match="count mismatch"):
            load_idx(*hand_built(tmp_path, n_images=2, n_labels=3))

    def test_empty_file(self, tmp_path):
        img, lab = hand_built(tmp_path)
        img.write_bytes(b"")
        with pytest.raises(DataFormatError, match="truncated"):
            load_idx(img, lab)

    def test_truncated_payload(self, tmp_path):
        img, lab = hand_built(tmp_path)
        img.write_bytes(img.read_bytes()[:-1])
        with pytest.raises(DataFormatError, match="truncated"):
            load_idx(img, lab)

    def test_bad_magic(self, tmp_path):
        img, lab = hand_built(tmp_path)
        with pytest.raises(DataFormatError, match="bad magic"):
            load_idx(lab, img)

    @given(st.sampled_from(["u1", "i1", ">i2", ">i4", ">f4", ">f8"]), st.lists(st.integers(1, 5), min_size=1, max_size=3))
    def test_round_trip(self, dtype, dims):
        import tempfile

        arr = (np.arange(np.prod(dims)) % 100).astype(dtype).reshape(dims)
        with tempfile.TemporaryDirectory() as d:
            write_idx(d + "/a", arr)
            back = read_idx(d + "/a")
            assert back.shape == arr.shape and back.tobytes() == arr.astype(back.dtype).tobytes()
            write_idx(d + "/b", back)
            assert open(d + "/a", "rb").read() == open(d + "/b", "rb").read()

    def test_unencodable_dtype(self, tmp_path):
        with pytest.raises(DataFormatError):
            write_idx(tmp_path / "x", np.zeros(2, dtype=np.complex64))

    def test_dataset_round_trip(self, tmp_path):
        ds = load_idx(*hand_built(tmp_path))
        save_idx(ds, tmp_path / "i2", tmp_path / "l2")
        again = load_idx(tmp_path / "i2", tmp_path / "l2", class_count=4)
        assert np.array_equal(again.features, ds.features) and np.array_equal(again.labels, ds.labels)

    def test_digits_dir(self, digits_dir):
        train_set, test_set = load_idx_dir(digits_dir)
        assert (len(train_set), len(test_set)) == (1438, 359)
        assert train_set.class_count == test_set.class_count == 10
        assert train_set.sample_shape == (1, 8, 8)


class TestCsv:
    def test_round_trip(self, tmp_path, rng):
        ds = Dataset(rng.standard_normal((5, 3)), [0, 1, 2, 1, 0], 3)
        save_csv(ds, tmp_path / "d.csv")
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "label,f0,f1,f2"
        back = load_csv(tmp_path / "d.csv")
        assert np.array_equal(back.features, ds.features) and back.labels.tolist() == ds.labels.tolist()

    def test_bad_header(self, tmp_path):
        (tmp_path / "d.csv").write_text("x,f0\n1,2\n")
        with pytest.raises(DataFormatError):
            load_csv(tmp_path / "d.csv")


class TestDataset:
    def test_label_range(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((2, 1)), [0, 2], 2)
        with pytest.raises(DataFormatError, match="count mismatch"):
            Dataset(np.zeros((2, 1)), [0], 2)

    def test_synth_deterministic(self):
        a, b = synth_gaussians(3, 4, 10, seed=7), synth_gaussians(3, 4, 10, seed=7)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.features, synth_gaussians(3, 4, 10, seed=8).features)

    def test_synth_empty(self):
        ds = synth_gaussians(2, 3, 0)
        assert len(ds) == 0 and ds.sample_shape == (3,)

    def test_synth_needs_two_classes(self):
        with pytest.raises(ValueError):
            synth_gaussians(1, 2, 5)

    def test_synth_linearly_separable(self):
        ds = synth_gaussians(2, 2, 100, seed=0)
        layer = Linear(2, 2)
        qm = QuantizedModel(Model([layer], (2,), 2))
        train(qm, ds, TrainConfig(epochs=10, batch_size=16, learning_rate=0.05, ratio=None))
        assert qm.metrics[-1]["train_acc"] >= 0.99

    def test_normalization(self, rng):
        ds = Dataset(rng.standard_normal((50, 3)) * [1, 5, 0] + [2, -1, 4], rng.integers(0, 2, 50), 2)
        mean, std = fit_normalization(ds)
        out = normalize(ds, mean, std)
        np.testing.assert_allclose(out.features[:, :2].mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(out.features[:, :2].std(axis=0), 1, atol=1e-12)
        assert np.all(np.isfinite(out.features))

    def test_split(self):
        ds = synth_gaussians(2, 2, 10)
        tr, va = train_val_split(ds, 0.2, seed=1)
        assert len(tr) == 16 and len(va) == 4
        assert sorted(tr.features[:, 0].tolist() + va.features[:, 0].tolist()) == sorted(ds.features[:, 0].tolist())


class TestBatches:
    def test_deterministic_permutations(self):
        ds = synth_gaussians(2, 2, 20)
        for epoch in range(3):
            a = [y.tolist() for _, y in batches(ds, 7, seed=4, epoch=epoch)]
            b = [y.tolist() for _, y in batches(ds, 7, seed=4, epoch=epoch)]
            assert a == b
        first = np.concatenate([x[:, 0] for x, _ in batches(ds, 7, seed=4, epoch=0)])
        second = np.concatenate([x[:, 0] for x, _ in batches(ds, 7, seed=4, epoch=1)])
        assert not np.array_equal(first, second)
        assert sorted(first) == sorted(ds.features[:, 0])

    def test_sizes(self):
        ds = synth_gaussians(2, 2, 10)
        assert [len(y) for _, y in batches(ds, 6)] == [6, 6, 6, 2]
        with pytest.raises(ValueError):
            next(batches(ds, 0))

    def test_calibration_batch(self):
        ds = synth_gaussians(2, 2, 10)
        x, y = calibration_batch(ds, 128, seed=0)
        assert len(y) == 20
        x2, _ = calibration_batch(ds, 5, seed=0)
        assert len(x2) == 5 and np.array_equal(x2, calibration_batch(ds, 5, seed=0)[0])
        with pytest.raises(ValueError):
            calibration_batch(synth_gaussians(2, 2, 0))
