import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgn import data
from pgn.data import (
    STANDARDIZED,
    VANILLA,
    CorruptHeaderError,
    Dataset,
    DegenerateChannelError,
    LabelRangeError,
    TruncatedPayloadError,
)


@pytest.fixture(scope="module")
def ds():
    return data.make_synthetic(n_train=60, n_test=30, seed=7)


def test_synthetic_contract(ds):
    assert ds.train_images.shape == (60, 3, 32, 32)
    assert ds.test_images.shape == (30, 3, 32, 32)
    assert ds.train_images.dtype == np.float32
    assert ds.train_images.min() >= 0.0 and ds.train_images.max() <= 1.0
    assert ds.num_classes == 10
    assert np.bincount(ds.train_labels, minlength=10).tolist() == [6] * 10


def test_synthetic_is_deterministic(ds):
    again = data.make_synthetic(n_train=60, n_test=30, seed=7)
    assert np.array_equal(ds.train_images, again.train_images)
    assert not np.array_equal(ds.train_images, data.make_synthetic(60, 30, seed=8).train_images)


@pytest.mark.parametrize("fmt", data.FORMATS)
def test_save_load_is_bit_identical(ds, fmt, tmp_path):
    data.save_dataset(ds, tmp_path, fmt)
    back = data.load_dataset(str(tmp_path), fmt)
    for split in ("train", "test"):
        assert np.array_equal(back.split(split)[0], ds.split(split)[0])
        assert np.array_equal(back.split(split)[1], ds.split(split)[1])
    assert back.num_classes == ds.num_classes


def test_label_k_is_out_of_range(ds):
    bad = ds.train_labels.copy()
    bad[0] = 10
    with pytest.raises(LabelRangeError, match="10"):
        Dataset(ds.train_images, bad, ds.test_images, ds.test_labels, 10)


def test_idx_label_out_of_range_on_load(ds, tmp_path):
    data.save_dataset(ds, tmp_path)
    labels = ds.test_labels.astype(np.uint8)
    labels[3] = 10
    data.write_idx(tmp_path / "test-labels.idx", labels)
    with pytest.raises(LabelRangeError):
        data.load_dataset(str(tmp_path))


def test_idx_corrupt_header(tmp_path):
    path = tmp_path / "x.idx"
    data.write_idx(path, np.zeros((2, 3), np.float32))
    blob = bytearray(path.read_bytes())
    blob[0] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptHeaderError):
        data.read_idx(path)
    blob[0], blob[2] = 0, 0x42
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptHeaderError):
        data.read_idx(path)


def test_idx_truncated_payload(tmp_path):
    path = tmp_path / "x.idx"
    data.write_idx(path, np.ones((4, 5), np.float32))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TruncatedPayloadError):
        data.read_idx(path)


def test_raw_dir_truncated_and_malformed(ds, tmp_path):
    data.save_dataset(ds, tmp_path, "raw_tensor_dir")
    blob = (tmp_path / "test_labels.bin").read_bytes()
    (tmp_path / "test_labels.bin").write_bytes(blob[:-8])
    with pytest.raises(TruncatedPayloadError):
        data.load_dataset(str(tmp_path), "raw_tensor_dir")
    (tmp_path / "manifest.txt").write_text("num_classes 10\ntrain_images float99 1 2\n")
    with pytest.raises(CorruptHeaderError):
        data.load_dataset(str(tmp_path), "raw_tensor_dir")


def test_error_kinds_are_distinct():
    kinds = {CorruptHeaderError, LabelRangeError, TruncatedPayloadError}
    assert len(kinds) == 3
    for a in kinds:
        assert all(not issubclass(a, b) for b in kinds - {a})


def test_unknown_format_and_missing_dir(ds, tmp_path):
    with pytest.raises(data.DatasetError):
        data.save_dataset(ds, tmp_path, "jpeg")
    with pytest.raises(data.DatasetError):
        data.load_dataset(str(tmp_path / "absent"))


# ---------------------------------------------------------------- normalisation


def test_vanilla_mode_is_identity(ds):
    assert data.normalize(ds, VANILLA) is ds


def test_standardized_train_means(ds):
    n = data.normalize(ds, STANDARDIZED)
    means = n.train_images.mean(axis=(0, 2, 3), dtype=np.float64)
    assert np.all(np.abs(means) < 1e-5)
    assert np.allclose(n.train_images.std(axis=(0, 2, 3), dtype=np.float64), 1.0, atol=1e-4)


def test_normalize_round_trip(ds):
    back = data.denormalize(data.normalize(ds, STANDARDIZED))
    assert back.normalization == VANILLA
    assert np.max(np.abs(back.train_images - ds.train_images)) <= 1e-6
    assert np.max(np.abs(back.test_images - ds.test_images)) <= 1e-6


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 3.0), st.floats(-2.0, 2.0))
def test_normalize_round_trip_property(seed, scale, shift):
    r = np.random.default_rng(seed)
    x = np.clip(r.random((5, 2, 3, 3)) * scale + shift, 0.0, 1.0).astype(np.float32)
    x[0, :, 0, 0], x[0, :, 0, 1] = 0.0, 1.0  # keep every channel non-constant
    d = Dataset(x, np.zeros(5, np.int64), x[:2].copy(), np.zeros(2, np.int64), 1)
    back = data.denormalize(data.normalize(d))
    assert np.max(np.abs(back.train_images - x)) <= 1e-6


def test_degenerate_channel(ds):
    x = ds.train_images.copy()
    x[:, 1] = 0.5
    flat = Dataset(x, ds.train_labels, ds.test_images, ds.test_labels, 10)
    with pytest.raises(DegenerateChannelError, match="1"):
        data.normalize(flat)


def test_normalize_needs_vanilla_input(ds):
    with pytest.raises(data.DatasetError):
        data.normalize(data.normalize(ds))


def test_saving_normalized_data_writes_vanilla_pixels(ds, tmp_path):
    data.save_dataset(data.normalize(ds), tmp_path)
    back = data.load_dataset(str(tmp_path))
    assert np.max(np.abs(back.train_images - ds.train_images)) <= 1e-6
    assert os.path.exists(tmp_path / "num_classes.txt")
