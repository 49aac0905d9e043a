import math

import numpy as np
import pytest

from conftest import covariance_oracle
from dasnet import dataio
from dasnet.dataio import FormatError, IngestionError
from dasnet.numerics import DimensionError, RngStream


def write_cifar(path, labels, variant="cifar10", seed=0):
    rng = RngStream(seed)
    with open(path, "wb") as fh:
        for lab in labels:
            head = bytes([lab]) if variant == "cifar10" else bytes([lab % 20, lab])
            fh.write(head + rng.integers(0, 256, 3072).astype(np.uint8).tobytes())


# CIFAR ingestion


def test_cifar_first_label(tmp_path):
    f = tmp_path / "data_batch_1.bin"
    write_cifar(f, [7, 2])
    images, labels = dataio.read_cifar_file(f)
    assert labels[0] == 7 and labels.tolist() == [7, 2]
    assert images.shape == (2, 3, 32, 32)
    assert 0.0 <= images.min() and images.max() <= 1.0


def test_cifar_pixel_layout(tmp_path):
    f = tmp_path / "b.bin"
    pixels = np.arange(3072) % 256
    f.write_bytes(bytes([3]) + pixels.astype(np.uint8).tobytes())
    images, _ = dataio.read_cifar_file(f)
    # channel-major, then rows, then columns
    assert images[0, 1, 0, 0] == (1024 % 256) / 255.0
    assert images[0, 0, 1, 0] == 32 / 255.0


def test_cifar100_uses_fine_label(tmp_path):
    f = tmp_path / "train.bin"
    write_cifar(f, [42, 99], "cifar100")
    _, labels = dataio.read_cifar_file(f, "cifar100")
    assert labels.tolist() == [42, 99]


def test_cifar_truncated_reports_offset(tmp_path):
    f = tmp_path / "data_batch_1.bin"
    write_cifar(f, [1, 2])
    f.write_bytes(f.read_bytes()[:-100])
    with pytest.raises(IngestionError, match="offset 3073"):
        dataio.read_cifar_file(f)


def test_cifar_label_out_of_range(tmp_path):
    f = tmp_path / "data_batch_1.bin"
    write_cifar(f, [1, 12])
    with pytest.raises(IngestionError, match=r"data_batch_1.bin.*offset 3073"):
        dataio.read_cifar_file(f)


def test_cifar_missing_file(tmp_path):
    with pytest.raises(IngestionError, match="test_batch.bin"):
        dataio.load_cifar(tmp_path, "cifar10", "test")


def test_cifar_record_count_enforced(tmp_path):
    write_cifar(tmp_path / "test_batch.bin", [0, 1, 2])
    with pytest.raises(IngestionError, match="expected 10000"):
        dataio.load_cifar(tmp_path, "cifar10", "test")
    ds = dataio.load_cifar(tmp_path, "cifar10", "test", check_count=False)
    assert len(ds) == 3 and ds.classes == 10


# toy task


def test_toy_deterministic():
    a = dataio.make_toy_dataset(RngStream(3), 40, 4, 12)
    b = dataio.make_toy_dataset(RngStream(3), 40, 4, 12)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_toy_balanced():
    ds = dataio.make_toy_dataset(RngStream(1), 100, 4, 16)
    assert np.bincount(ds.labels).tolist() == [25, 25, 25, 25]
    assert ds.images.shape == (100, 1, 16, 16)


def test_toy_single_class():
    ds = dataio.make_toy_dataset(RngStream(1), 10, 1, 8)
    assert np.all(ds.labels == 0)
    assert np.mean(np.zeros(10, dtype=int) == ds.labels) == 1.0


def test_toy_defeats_linear_classifier():
    ds = dataio.make_toy_dataset(RngStream(2), 1200, 4, 16)
    x = ds.images.reshape(len(ds), -1)
    xtr, ytr, xte, yte = x[:900], ds.labels[:900], x[900:], ds.labels[900:]
    # least-squares one-vs-rest linear classifier
    a = np.hstack([xtr, np.ones((900, 1))])
    w = np.linalg.lstsq(a, np.eye(4)[ytr], rcond=None)[0]
    pred = np.argmax(np.hstack([xte, np.ones((300, 1))]) @ w, axis=1)
    assert np.mean(pred == yte) < 0.9


def test_dataset_validates_labels():
    with pytest.raises(ValueError):
        dataio.Dataset(np.zeros((2, 1, 2, 2)), [0, 3], classes=3)
    with pytest.raises(DimensionError):
        dataio.Dataset(np.zeros((2, 1, 2, 2)), [0], classes=3)


def test_split_validation_takes_last():
    ds = dataio.make_toy_dataset(RngStream(1), 20, 2, 8)
    tr, va = dataio.split_validation(ds, 5)
    np.testing.assert_array_equal(va.labels, ds.labels[15:])
    assert len(tr) == 15 and va.split == "val"


def test_batches_same_seed_same_order():
    ds = dataio.make_toy_dataset(RngStream(1), 30, 3, 8)
    a = [y.tolist() for _, y in ds.batches(7, RngStream(4))]
    b = [y.tolist() for _, y in ds.batches(7, RngStream(4))]
    assert a == b


# global contrast normalization


def test_gcn_constant_image_is_zero():
    out = dataio.global_contrast_normalize(np.full((1, 1, 3, 3), 0.7))
    assert not out.any()


def test_gcn_two_pixel():
    out = dataio.global_contrast_normalize(np.array([[[[1.0, -1.0]]]]))
    np.testing.assert_allclose(out.ravel(), [1 / math.sqrt(2), -1 / math.sqrt(2)], rtol=1e-15)


def test_gcn_mean_zero_unit_norm():
    x = RngStream(4).uniform(size=(20, 3, 8, 8))
    out = dataio.global_contrast_normalize(x).reshape(20, -1)
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-10)


def test_gcn_scale():
    x = RngStream(4).uniform(size=(3, 1, 4, 4))
    out = dataio.global_contrast_normalize(x, scale=4.0).reshape(3, -1)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 4.0, atol=1e-10)


# ZCA


@pytest.fixture(scope="module")
def zca_toy():
    rng = RngStream(12)
    mix = rng.normal((12, 12))
    x = rng.normal((100, 12)) @ mix + rng.normal(12)
    return x.reshape(100, 3, 2, 2)


def test_zca_whitens_training_set(zca_toy):
    t = dataio.fit_zca(zca_toy, epsilon=1e-6)
    out = dataio.apply_zca(t, zca_toy).reshape(100, 12)
    cov = covariance_oracle(out)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 0.05
    assert np.all((np.diag(cov) > 0.5) & (np.diag(cov) < 1.5))
    np.testing.assert_allclose(t.matrix, t.matrix.T, atol=1e-8)


def test_zca_identity_on_white_data():
    # Rows are scaled +-e_i so the biased covariance is exactly the identity.
    d = 6
    x = np.vstack([np.sqrt(d) * np.eye(d), -np.sqrt(d) * np.eye(d)])
    np.testing.assert_allclose(covariance_oracle(x), np.eye(d), atol=1e-12)
    t = dataio.fit_zca(x, epsilon=1e-12)
    np.testing.assert_allclose(t.matrix, np.eye(d), atol=1e-6)


def test_zca_large_epsilon_scales_identity(zca_toy):
    eps = 1e12
    t = dataio.fit_zca(zca_toy, epsilon=eps)
    np.testing.assert_allclose(t.matrix * np.sqrt(eps), np.eye(12), atol=1e-6)


def test_zca_needs_two_images():
    with pytest.raises(ValueError):
        dataio.fit_zca(np.zeros((1, 1, 2, 2)))


def test_apply_zca_mean_maps_to_zero(zca_toy):
    t = dataio.fit_zca(zca_toy)
    out = dataio.apply_zca(t, t.mean.reshape(1, 3, 2, 2))
    assert np.max(np.abs(out)) < 1e-12


def test_apply_zca_identity():
    t = dataio.ZcaTransform(np.zeros(4), np.eye(4))
    x = RngStream(1).normal((3, 1, 2, 2))
    np.testing.assert_array_equal(dataio.apply_zca(t, x), x)


def test_apply_zca_dimension_mismatch():
    with pytest.raises(DimensionError):
        dataio.apply_zca(dataio.ZcaTransform(np.zeros(4), np.eye(4)), np.zeros((2, 1, 3, 3)))


def test_zca_file_round_trip(tmp_path, zca_toy):
    t = dataio.fit_zca(zca_toy)
    dataio.save_zca(t, tmp_path / "z.bin")
    blob = (tmp_path / "z.bin").read_bytes()
    assert blob[:4] == b"ZCA1" and len(blob) == 4 + 8 + 8 + 8 * (12 + 144)
    back = dataio.load_zca(tmp_path / "z.bin")
    np.testing.assert_array_equal(back.mean, t.mean)
    np.testing.assert_array_equal(back.matrix, t.matrix)
    assert back.epsilon == t.epsilon
    a = dataio.apply_zca(back, zca_toy)
    np.testing.assert_array_equal(a, dataio.apply_zca(back, zca_toy))


def test_zca_file_errors(tmp_path, zca_toy):
    dataio.save_zca(dataio.fit_zca(zca_toy), tmp_path / "z.bin")
    blob = (tmp_path / "z.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        dataio.load_zca(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        dataio.load_zca(tmp_path / "short.bin")
